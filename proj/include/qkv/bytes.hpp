#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qkv/error.hpp"

namespace qkv {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

// Little-endian append-only writer used by every on-disk and on-wire format.
class ByteWriter {
public:
    ByteWriter() = default;
    explicit ByteWriter(Bytes initial) : buf_(std::move(initial)) {}

    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void i32(std::int32_t v) { put_le(static_cast<std::uint32_t>(v)); }
    void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }

    void raw(ByteView bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
    void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    void f32_array(std::span<const float> values) {
        buf_.reserve(buf_.size() + values.size() * 4);
        for (float v : values) f32(v);
    }

    // 1-byte length prefix.
    void short_string(std::string_view s) {
        require(s.size() <= 255, ErrorCode::parameter, "string longer than 255 bytes");
        u8(static_cast<std::uint8_t>(s.size()));
        raw(s);
    }

    std::size_t size() const { return buf_.size(); }
    const Bytes& bytes() const& { return buf_; }
    Bytes take() && { return std::move(buf_); }

private:
    template <class T>
    void put_le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    Bytes buf_;
};

// Bounds-checked little-endian reader. Running off the end raises the
// error code given at construction (truncation for files, short read for
// frames).
class ByteReader {
public:
    explicit ByteReader(ByteView data, ErrorCode on_short = ErrorCode::truncated)
        : data_(data), on_short_(on_short) {}

    std::uint8_t u8() { return take<std::uint8_t>(); }
    std::uint16_t u16() { return take<std::uint16_t>(); }
    std::uint32_t u32() { return take<std::uint32_t>(); }
    std::uint64_t u64() { return take<std::uint64_t>(); }
    std::int32_t i32() { return static_cast<std::int32_t>(take<std::uint32_t>()); }
    float f32() { return std::bit_cast<float>(take<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(take<std::uint64_t>()); }

    ByteView raw(std::size_t n) {
        need(n);
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    std::string short_string() {
        std::size_t n = u8();
        auto v = raw(n);
        return std::string(v.begin(), v.end());
    }

    void f32_array(std::span<float> out) {
        need(out.size() * 4);
        for (float& v : out) v = f32();
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (n > data_.size() - pos_) fail(on_short_, "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", have " + std::to_string(data_.size() - pos_));
    }

    template <class T>
    T take() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return v;
    }

    ByteView data_;
    std::size_t pos_ = 0;
    ErrorCode on_short_;
};

// IEEE CRC-32 (the zlib/PNG polynomial).
std::uint32_t crc32(ByteView data);

Bytes read_file(const std::string& path);
void write_file(const std::string& path, ByteView data);

}  // namespace qkv
