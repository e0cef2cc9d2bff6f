#include "kpiwm/toml.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kpiwm/errors.hpp"

namespace kpiwm::toml {

namespace {

using nlohmann::json;

std::string strip(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Removes a trailing comment that is not inside a string literal.
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

json parse_scalar(const std::string& raw, int line_no) {
    const std::string s = strip(raw);
    if (s.empty()) throw ConfigError("toml: empty value at line " + std::to_string(line_no));
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"')
            throw ConfigError("toml: unterminated string at line " + std::to_string(line_no));
        std::string out;
        for (std::size_t i = 1; i + 1 < s.size(); ++i) {
            if (s[i] == '\\' && i + 2 < s.size()) {
                ++i;
                switch (s[i]) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default: out += s[i];
                }
            } else {
                out += s[i];
            }
        }
        return json(out);
    }
    if (s == "true") return json(true);
    if (s == "false") return json(false);
    // Integer first, then float.
    {
        char* end = nullptr;
        const long long v = std::strtoll(s.c_str(), &end, 10);
        if (end == s.c_str() + s.size()) return json(v);
    }
    {
        char* end = nullptr;
        const double v = std::strtod(s.c_str(), &end);
        if (end == s.c_str() + s.size()) return json(v);
    }
    throw ConfigError("toml: cannot parse value \"" + s + "\" at line " + std::to_string(line_no));
}

json parse_value(const std::string& raw, int line_no) {
    const std::string s = strip(raw);
    if (!s.empty() && s.front() == '[') {
        if (s.back() != ']')
            throw ConfigError("toml: arrays must close on the same line (line " +
                              std::to_string(line_no) + ")");
        json arr = json::array();
        std::string body = s.substr(1, s.size() - 2);
        std::string item;
        bool in_string = false;
        int depth = 0;
        for (char c : body) {
            if (c == '"') in_string = !in_string;
            if (!in_string && c == '[') ++depth;
            if (!in_string && c == ']') --depth;
            if (c == ',' && !in_string && depth == 0) {
                if (!strip(item).empty()) arr.push_back(parse_value(item, line_no));
                item.clear();
            } else {
                item += c;
            }
        }
        if (!strip(item).empty()) arr.push_back(parse_value(item, line_no));
        return arr;
    }
    return parse_scalar(s, line_no);
}

json* descend(json& root, const std::string& dotted, int line_no) {
    json* node = &root;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
        part = strip(part);
        if (part.empty())
            throw ConfigError("toml: bad table name at line " + std::to_string(line_no));
        node = &(*node)[part];
        if (!node->is_object() && !node->is_null())
            throw ConfigError("toml: table collides with a value at line " +
                              std::to_string(line_no));
        if (node->is_null()) *node = json::object();
    }
    return node;
}

} // namespace

std::string parse_text_to_json(const std::string& text) {
    json root = json::object();
    json* table = &root;
    std::stringstream ss(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        const std::string line = strip(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("toml: bad table header at line " + std::to_string(line_no));
            table = descend(root, line.substr(1, line.size() - 2), line_no);
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toml: expected key = value at line " + std::to_string(line_no));
        const std::string key = strip(line.substr(0, eq));
        if (key.empty())
            throw ConfigError("toml: empty key at line " + std::to_string(line_no));
        (*table)[key] = parse_value(line.substr(eq + 1), line_no);
    }
    return root.dump();
}

std::string parse_file_to_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_text_to_json(buf.str());
}

} // namespace kpiwm::toml
