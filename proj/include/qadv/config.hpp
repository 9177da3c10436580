#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace qadv {

// Flat `key = value` file with dotted keys. '#' starts a comment; blank
// lines are ignored; a repeated key is an error.
class Config {
public:
    static Config parse(std::string_view text, const std::string& origin = "<config>");
    static Config load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    std::string get(const std::string& key, const std::string& fallback) const;
    std::string require(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    std::size_t get_size(const std::string& key, std::size_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback = {}) const;

    // Relative paths resolve against the directory of the config file.
    std::filesystem::path get_path(const std::string& key, const std::filesystem::path& fallback = {}) const;
    const std::filesystem::path& base_dir() const { return base_; }
    void set_base_dir(std::filesystem::path p) { base_ = std::move(p); }

    // Throws ConfigError naming the first key that matches none of the
    // patterns; a pattern ending in '*' matches any suffix.
    void check_keys(const std::vector<std::string>& patterns) const;

    const std::map<std::string, std::string>& entries() const { return values_; }
    // Canonical `key = value` lines in key order.
    std::string dump() const;

private:
    std::map<std::string, std::string> values_;
    std::filesystem::path base_;
    std::string origin_;
};

std::vector<std::string> split(std::string_view s, char sep);
std::string trim(std::string_view s);

}  // namespace qadv
