// Regenerates the golden files under tests/fixtures:
//   make_fixtures <dir>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "qkv/cachecard.hpp"
#include "qkv/tensorio.hpp"
#include "qkv/transport.hpp"

using namespace qkv;

namespace {

KVCache fixture_cache() {
    SyntheticConfig c;
    c.seed = 42;
    c.layers = 1;
    c.heads = 2;
    c.tokens = 8;
    c.head_dim = 4;
    return generate_synthetic_cache(c);
}

std::string hex(ByteView b) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (auto v : b) {
        s += digits[v >> 4];
        s += digits[v & 15];
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_fixtures <dir>\n";
        return 2;
    }
    const std::string dir = argv[1];
    const KVCache cache = fixture_cache();
    store_container(cache, dir + "/source.qkvt");

    const std::vector<BitWidth> q4(8, BitWidth::b4), q8(8, BitWidth::b8);
    const std::vector<BitWidth> mixed{BitWidth::b16, BitWidth::b2, BitWidth::b4, BitWidth::b8,
                                      BitWidth::b2,  BitWidth::b4, BitWidth::b8, BitWidth::b16};
    const Bytes c4 = encode_card(build_card(quantize_cache(cache, q4, 4), "toy-v1", "agent0"));
    const Bytes c8 = encode_card(build_card(quantize_cache(cache, q8, 4), "toy-v1", "agent0"));
    const Bytes cm = encode_card(build_card(quantize_cache(cache, mixed, 4), "toy-v1", "agent1", -3));
    write_file(dir + "/uniform_q4.qkvc", c4);
    write_file(dir + "/uniform_q8.qkvc", c8);
    write_file(dir + "/mixed.qkvc", cm);

    Handshake client{protocol_version, "agent0", "toy-v1", 0x0F};
    Handshake server{protocol_version, "agent1", "toy-v1", 0x0F};
    std::ofstream out(dir + "/exchange.hex");
    out << "# one frame per line: client hello, server hello_ack, client card (uniform_q4.qkvc), client bye\n";
    out << hex(frame_encode(FrameType::hello, client.encode())) << "\n";
    out << hex(frame_encode(FrameType::hello_ack, server.encode())) << "\n";
    out << hex(frame_encode(FrameType::card, c4)) << "\n";
    out << hex(frame_encode(FrameType::bye, {})) << "\n";
    return out ? 0 : 1;
}
