#include "qkv/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

#include "qkv/bytes.hpp"

namespace qkv {

namespace {

std::string_view trim(std::string_view s) {
    const auto* ws = " \t\r";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

bool valid_key(std::string_view k) {
    return !k.empty() && std::ranges::all_of(k, [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
    });
}

}  // namespace

Config Config::parse(std::string_view text) {
    Config cfg;
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) fail(ErrorCode::parameter, "config line " + std::to_string(line_no) + ": expected key = value");
        const auto key = trim(line.substr(0, eq));
        if (!valid_key(key)) fail(ErrorCode::parameter, "config line " + std::to_string(line_no) + ": bad key '" + std::string(key) + "'");
        cfg.set(std::string(key), std::string(trim(line.substr(eq + 1))));
    }
    return cfg;
}

Config Config::load(const std::string& path) {
    const Bytes b = read_file(path);
    return parse(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

std::string Config::get(std::string_view key, std::string_view fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? std::string(fallback) : it->second;
}

std::uint64_t Config::get_u64(std::string_view key, std::uint64_t fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const std::string& v = it->second;
    std::uint64_t out = 0;
    int base = 10;
    std::string_view digits = v;
    if (digits.starts_with("0x") || digits.starts_with("0X")) {
        base = 16;
        digits.remove_prefix(2);
    }
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out, base);
    if (ec != std::errc() || p != digits.data() + digits.size() || digits.empty())
        fail(ErrorCode::parameter, "config key '" + it->first + "' needs a non-negative integer, got '" + v + "'");
    return out;
}

double Config::get_double(std::string_view key, double fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const std::string& v = it->second;
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
        fail(ErrorCode::parameter, "config key '" + it->first + "' needs a finite number, got '" + v + "'");
    return out;
}

bool Config::get_bool(std::string_view key, bool fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(ErrorCode::parameter, "config key '" + it->first + "' needs a boolean, got '" + v + "'");
}

void Config::check_known(std::initializer_list<std::string_view> known) const {
    for (const auto& [k, v] : entries_)
        if (std::ranges::find(known, std::string_view(k)) == known.end()) fail(ErrorCode::parameter, "unknown config key '" + k + "'");
}

}  // namespace qkv
