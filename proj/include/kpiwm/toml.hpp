#pragma once

#include <string>

namespace kpiwm::toml {

// Minimal TOML reader covering the subset used by run configs: [table] and
// [table.sub] headers, bare keys, strings, integers, floats, booleans, and
// single-line arrays, with # comments. Returns a JSON text rendering of the
// parsed tree.
std::string parse_file_to_json(const std::string& path);
std::string parse_text_to_json(const std::string& text);

} // namespace kpiwm::toml
