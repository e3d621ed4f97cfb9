#pragma once

#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <string_view>

namespace qkv {

// Flat "key = value" settings. '#' starts a comment; blank lines are
// ignored; later assignments override earlier ones. Keys are
// [A-Za-z0-9_.-]+; values are trimmed and may contain spaces.
class Config {
public:
    static Config parse(std::string_view text);
    static Config load(const std::string& path);

    void set(std::string key, std::string value) { entries_[std::move(key)] = std::move(value); }
    bool has(std::string_view key) const { return entries_.find(std::string(key)) != entries_.end(); }

    std::string get(std::string_view key, std::string_view fallback) const;
    std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
    double get_double(std::string_view key, double fallback) const;
    bool get_bool(std::string_view key, bool fallback) const;

    // Parameter error naming the first key not in `known`.
    void check_known(std::initializer_list<std::string_view> known) const;

    const std::map<std::string, std::string, std::less<>>& entries() const { return entries_; }

private:
    std::map<std::string, std::string, std::less<>> entries_;
};

}  // namespace qkv
