#include "qadv/config.hpp"

#include <cctype>
#include <charconv>
#include <sstream>

#include "qadv/error.hpp"
#include "qadv/io.hpp"

namespace qadv {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

Config Config::parse(std::string_view text, const std::string& origin) {
    Config c;
    c.origin_ = origin;
    std::size_t line_no = 0, start = 0;
    while (start <= text.size()) {
        const auto end = text.find('\n', start);
        std::string_view line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
        ++line_no;
        start = end == std::string_view::npos ? text.size() + 1 : end + 1;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        const std::string where = origin + ":" + std::to_string(line_no);
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": empty key");
        for (char ch : key)
            if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_' || ch == '-'))
                throw ConfigError(where + ": invalid character in key '" + key + "'");
        if (!c.values_.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    }
    return c;
}

Config Config::load(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const FormatError&) {
        throw ConfigError("cannot read config file " + path.string());
    }
    Config c = parse(text, path.string());
    c.base_ = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return c;
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::string Config::require(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
    return it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key, "");
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(origin_ + ": key '" + key + "' expects a number, got '" + v + "'");
    }
}

long long Config::get_int(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key, "");
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(origin_ + ": key '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

std::size_t Config::get_size(const std::string& key, std::size_t fallback) const {
    const long long v = get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(origin_ + ": key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(origin_ + ": key '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::string> Config::get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    if (!has(key)) return fallback;
    return split(get(key, ""), ',');
}

std::filesystem::path Config::get_path(const std::string& key, const std::filesystem::path& fallback) const {
    std::filesystem::path p = has(key) ? std::filesystem::path(get(key, "")) : fallback;
    if (p.empty() || p.is_absolute()) return p;
    return base_.empty() ? p : base_ / p;
}

void Config::check_keys(const std::vector<std::string>& patterns) const {
    for (const auto& [key, value] : values_) {
        bool ok = false;
        for (const auto& pat : patterns) {
            if (!pat.empty() && pat.back() == '*') ok = key.compare(0, pat.size() - 1, pat, 0, pat.size() - 1) == 0;
            else ok = key == pat;
            if (ok) break;
        }
        if (!ok) throw ConfigError(origin_ + ": unknown key '" + key + "'");
    }
}

std::string Config::dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
}

}  // namespace qadv
