#include <gtest/gtest.h>

#include <cmath>

#include <cstdio>
#include <filesystem>

#include "qkv/bytes.hpp"

using namespace qkv;

TEST(Crc32, StandardCheckValue) {
    const std::string s = "123456789";
    EXPECT_EQ(crc32(ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
    EXPECT_EQ(crc32({}), 0u);
}

TEST(ByteWriter, LittleEndianLayout) {
    ByteWriter w;
    w.u16(0x0102);
    w.u32(0x03040506);
    w.i32(-2);
    w.f32(1.0f);
    EXPECT_EQ(w.bytes(), (Bytes{0x02, 0x01, 0x06, 0x05, 0x04, 0x03, 0xFE, 0xFF, 0xFF, 0xFF, 0x00, 0x00, 0x80, 0x3F}));
}

TEST(ByteReader, RoundTripsEveryType) {
    ByteWriter w;
    w.u8(7);
    w.u16(65535);
    w.u32(123456789);
    w.u64(0xFEDCBA9876543210ULL);
    w.i32(-123);
    w.f32(-0.0f);
    w.f64(3.141592653589793);
    w.short_string("model");
    const Bytes b = std::move(w).take();
    ByteReader r(b);
    EXPECT_EQ(r.u8(), 7);
    EXPECT_EQ(r.u16(), 65535);
    EXPECT_EQ(r.u32(), 123456789u);
    EXPECT_EQ(r.u64(), 0xFEDCBA9876543210ULL);
    EXPECT_EQ(r.i32(), -123);
    const float nz = r.f32();
    EXPECT_TRUE(std::signbit(nz));
    EXPECT_EQ(r.f64(), 3.141592653589793);
    EXPECT_EQ(r.short_string(), "model");
    EXPECT_EQ(r.remaining(), 0u);
}

TEST(ByteReader, ShortReadRaisesConfiguredCode) {
    const Bytes b{1, 2, 3};
    ByteReader r(b, ErrorCode::short_read);
    try {
        r.u32();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::short_read);
    }
    ByteReader t(b);
    EXPECT_THROW(t.raw(4), Error);
    EXPECT_EQ(t.position(), 0u);
}

TEST(ByteWriter, RejectsLongStrings) {
    ByteWriter w;
    EXPECT_NO_THROW(w.short_string(std::string(255, 'a')));
    try {
        w.short_string(std::string(256, 'a'));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::parameter);
    }
}

TEST(Files, WriteReadAndMissing) {
    const auto path = (std::filesystem::temp_directory_path() / "qkv_bytes_test.bin").string();
    const Bytes b{0, 1, 2, 255};
    write_file(path, b);
    EXPECT_EQ(read_file(path), b);
    std::remove(path.c_str());
    try {
        read_file(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::io);
    }
}

TEST(Errors, ClassesMapToExitGroups) {
    EXPECT_EQ(classify(ErrorCode::parameter), ErrorClass::usage);
    EXPECT_EQ(classify(ErrorCode::dimension), ErrorClass::usage);
    EXPECT_EQ(classify(ErrorCode::crc_mismatch), ErrorClass::data);
    EXPECT_EQ(classify(ErrorCode::io), ErrorClass::data);
    EXPECT_EQ(classify(ErrorCode::frame_crc), ErrorClass::protocol);
    EXPECT_EQ(classify(ErrorCode::handshake_rejected), ErrorClass::protocol);
    Error e(ErrorCode::truncated, "short");
    EXPECT_EQ(e.detail(), "short");
    EXPECT_NE(std::string(e.what()).find("short"), std::string::npos);
}
