#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "qkv/cachecard.hpp"
#include "qkv/cli.hpp"
#include "qkv/config.hpp"
#include "qkv/controller.hpp"
#include "qkv/tensorio.hpp"

using namespace qkv;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
    int rc;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int rc = run_cli(args, out, err);
    return {rc, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::path(::testing::TempDir()) / ("qkvcli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }
    void write_text(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }
    std::string synth(const std::string& name = "src.qkvt", const std::string& tokens = "24") {
        const auto r = cli({"synth", "--tokens", tokens, "--head-dim", "8", "--seed", "3", "--out", path(name)});
        EXPECT_EQ(r.rc, 0) << r.err;
        return path(name);
    }

    fs::path dir_;
};

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorCode::protocol;
}

}  // namespace

TEST(Config, ParseAndTypedGetters) {
    const auto c = Config::parse("# comment\nseed = 0x10\n  name=two words  \nflag = yes\nx = 2.5 # trailing\nseed = 17\n");
    EXPECT_EQ(c.get_u64("seed", 0), 17u);
    EXPECT_EQ(c.get("name", ""), "two words");
    EXPECT_TRUE(c.get_bool("flag", false));
    EXPECT_EQ(c.get_double("x", 0), 2.5);
    EXPECT_EQ(c.get_u64("missing", 5), 5u);
    EXPECT_EQ(Config::parse("a = 0x1f").get_u64("a", 0), 31u);
    EXPECT_FALSE(Config::parse("b = off").get_bool("b", true));
}

TEST(Config, Errors) {
    EXPECT_EQ(code_of([] { Config::parse("novalue\n"); }), ErrorCode::parameter);
    EXPECT_EQ(code_of([] { Config::parse("bad key = 1\n"); }), ErrorCode::parameter);
    EXPECT_EQ(code_of([] { Config::parse("a = -1").get_u64("a", 0); }), ErrorCode::parameter);
    EXPECT_EQ(code_of([] { Config::parse("a = 1x").get_double("a", 0); }), ErrorCode::parameter);
    EXPECT_EQ(code_of([] { Config::parse("a = maybe").get_bool("a", false); }), ErrorCode::parameter);
    EXPECT_EQ(code_of([] { Config::parse("a = 1").check_known({"b"}); }), ErrorCode::parameter);
    EXPECT_NO_THROW(Config::parse("a = 1").check_known({"a"}));
}

TEST_F(CliTest, UsageErrors) {
    EXPECT_EQ(cli({}).rc, exit_usage);
    EXPECT_EQ(cli({"bogus"}).rc, exit_usage);
    EXPECT_EQ(cli({"synth", "--nope", "1"}).rc, exit_usage);
    EXPECT_EQ(cli({"synth"}).rc, exit_usage);  // needs --out
    EXPECT_EQ(cli({"card"}).rc, exit_usage);
    const auto h = cli({"--help"});
    EXPECT_EQ(h.rc, exit_ok);
    EXPECT_NE(h.out.find("handoff"), std::string::npos);
}

TEST_F(CliTest, SynthWritesContainerAndRecord) {
    const std::string f = synth();
    const KVCache k = load_container(f);
    EXPECT_EQ(k.dims(), (CacheDims{2, 2, 24, 8}));
    SyntheticConfig sc;
    sc.seed = 3;
    sc.tokens = 24;
    sc.head_dim = 8;
    EXPECT_TRUE(k.bit_identical(generate_synthetic_cache(sc)));
    const auto r = cli({"synth", "--tokens", "24", "--head-dim", "8", "--seed", "3", "--format", "csv", "--out", path("b.qkvt")});
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "command,seed,layers,heads,tokens,head_dim,bytes,crc32");
    EXPECT_EQ(fs::file_size(f), fs::file_size(path("b.qkvt")));
}

TEST_F(CliTest, QuantizeReportsBoundedError) {
    const std::string f = synth();
    const auto r = cli({"quantize", "--in", f, "--bits", "8", "--out", path("q.qkvt")});
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["bits"], 8);
    EXPECT_GT(j["max_abs_error"].get<double>(), 0.0);
    EXPECT_LT(j["max_abs_error"].get<double>(), 0.1);
    EXPECT_EQ(cli({"quantize", "--in", f, "--bits", "3", "--out", path("q.qkvt")}).rc, exit_usage);
    EXPECT_EQ(cli({"quantize", "--in", path("missing.qkvt"), "--out", path("q.qkvt")}).rc, exit_data);
}

TEST_F(CliTest, CardEncodeDecodeStats) {
    const std::string f = synth();
    const auto e = cli({"card", "encode", "--in", f, "--method", "adaptive_topology", "--budget", "5", "--position-offset", "-3",
                        "--out", path("c.qkvc")});
    ASSERT_EQ(e.rc, 0) << e.err;
    const auto card = decode_card(read_file(path("c.qkvc")));
    EXPECT_EQ(card.header.position_offset_placeholder, -3);
    EXPECT_LE(card.stats.average_bits, 5.0);
    const auto ej = json::parse(e.out);
    EXPECT_LE(ej["objective"].get<double>(), ej["uniform_objective"].get<double>());
    EXPECT_EQ(ej["crc32"].get<std::uint32_t>(), card_checksum(read_file(path("c.qkvc"))));

    const auto s = cli({"card", "stats", "--in", path("c.qkvc")});
    ASSERT_EQ(s.rc, 0);
    EXPECT_EQ(json::parse(s.out)["model_id"], "toy-v1");
    EXPECT_EQ(json::parse(s.out)["card_bytes"].get<std::size_t>(), fs::file_size(path("c.qkvc")));

    ASSERT_EQ(cli({"card", "decode", "--in", path("c.qkvc"), "--out", path("d.qkvt")}).rc, 0);
    EXPECT_TRUE(load_container(path("d.qkvt")).bit_identical(dequantize_cache(card.kv)));
}

TEST_F(CliTest, CorruptCardIsDataError) {
    const std::string f = synth();
    ASSERT_EQ(cli({"card", "encode", "--in", f, "--out", path("c.qkvc")}).rc, 0);
    Bytes b = read_file(path("c.qkvc"));
    b[b.size() / 2] ^= 0x20;
    write_file(path("bad.qkvc"), b);
    const auto r = cli({"card", "stats", "--in", path("bad.qkvc")});
    EXPECT_EQ(r.rc, exit_data);
    EXPECT_NE(r.err.find("checksum mismatch"), std::string::npos);
}

TEST_F(CliTest, ConfigFileAndFlagOverride) {
    write_text("run.conf", "clock = model\nagents = 3\nmethod = uniform_q8\ntokens = 16\nhead_dim = 8\n");
    const auto a = cli({"--config", path("run.conf"), "handoff", "run"});
    ASSERT_EQ(a.rc, 0) << a.err;
    const auto j = json::parse(a.out);
    ASSERT_EQ(j["hops"].size(), 2u);
    EXPECT_EQ(j["hops"][0]["method"], "uniform_q8");
    const auto b = cli({"--config", path("run.conf"), "handoff", "run", "--method", "fp16_share"});
    EXPECT_EQ(json::parse(b.out)["hops"][0]["output_relative_error"], 0.0);
    write_text("bad.conf", "colour = blue\n");
    EXPECT_EQ(cli({"--config", path("bad.conf"), "density"}).rc, exit_usage);
    EXPECT_EQ(cli({"--config", path("absent.conf"), "density"}).rc, exit_data);
}

TEST_F(CliTest, HandoffErrorsMapToExitCodes) {
    write_text("tree.topo", "agent a toy-v1\nagent b toy-v1\nagent c toy-v1\nedge a b\nedge a c\n");
    EXPECT_EQ(cli({"handoff", "run", "--topology", path("tree.topo"), "--clock", "model"}).rc, exit_data);
    write_text("mixed.topo", "agent a toy-v1\nagent b toy-v2\nedge a b\n");
    EXPECT_EQ(cli({"handoff", "run", "--topology", path("mixed.topo"), "--clock", "model"}).rc, exit_protocol);
    EXPECT_EQ(cli({"handoff", "run", "--method", "zip"}).rc, exit_usage);
}

TEST_F(CliTest, DensityDefaults) {
    const auto r = cli({"density"});
    ASSERT_EQ(r.rc, 0);
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["context_bytes"].get<double>(), 1073741824.0);
    EXPECT_EQ(j["contexts"], 12);
    EXPECT_EQ(json::parse(cli({"density", "--bytes-per-element", "0.5"}).out)["contexts"], 48);
    const auto csv = cli({"density", "--format", "csv", "--out", path("d.csv")});
    EXPECT_EQ(csv.out, "");
    EXPECT_TRUE(fs::exists(path("d.csv")));
}

TEST_F(CliTest, BenchCommandsWithModeledClock) {
    const auto t = cli({"bench", "ttft", "--contexts", "32,64", "--trials", "2", "--clock", "model", "--format", "csv"});
    ASSERT_EQ(t.rc, 0) << t.err;
    EXPECT_TRUE(t.out.starts_with("context,tokens,trials,"));
    const auto s = cli({"bench", "sweep", "--methods", "uniform_q4,adaptive_local", "--hops", "1,2", "--budgets", "4", "--seeds", "2",
                        "--tokens", "16", "--head-dim", "8", "--clock", "model"});
    ASSERT_EQ(s.rc, 0) << s.err;
    const auto j = json::parse(s.out);
    EXPECT_EQ(j["cells"].size(), 4u);
    EXPECT_EQ(j["seeds"], json::array({0, 1}));
}

TEST_F(CliTest, ControllerTrainWritesWeights) {
    const auto r = cli({"controller", "train", "--tokens", "16", "--head-dim", "8", "--seeds", "2", "--epochs", "20", "--out",
                        path("w.qkvw")});
    ASSERT_EQ(r.rc, 0) << r.err;
    EXPECT_NO_THROW(decode_weights(read_file(path("w.qkvw"))));
    EXPECT_EQ(json::parse(r.out)["samples"], 32);
    const std::string f = synth();
    const auto e = cli({"card", "encode", "--in", f, "--method", "adaptive_local", "--solver", "controller", "--weights", path("w.qkvw"),
                        "--out", path("c.qkvc")});
    EXPECT_EQ(e.rc, 0) << e.err;
}

TEST_F(CliTest, ServeAndSendOverLoopback) {
    const std::string f = synth();
    ASSERT_EQ(cli({"card", "encode", "--in", f, "--out", path("c.qkvc")}).rc, 0);
    Result served{};
    std::thread server([&] { served = cli({"serve", "--port", "0", "--port-file", path("port"), "--out", path("recv.qkvc")}); });
    std::string port;
    for (int i = 0; i < 500 && port.empty(); ++i) {
        std::ifstream in(path("port"));
        std::string line;
        if (std::getline(in, line) && !in.eof()) port = line;
        if (port.empty()) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ASSERT_FALSE(port.empty());
    const auto sent = cli({"send", "--in", path("c.qkvc"), "--port", port});
    server.join();
    EXPECT_EQ(sent.rc, 0) << sent.err;
    EXPECT_EQ(served.rc, 0) << served.err;
    EXPECT_EQ(read_file(path("recv.qkvc")), read_file(path("c.qkvc")));
    EXPECT_EQ(json::parse(served.out)["cards"], 1);
}

TEST_F(CliTest, SendWithWrongModelIsRejected) {
    const std::string f = synth();
    ASSERT_EQ(cli({"card", "encode", "--in", f, "--out", path("c.qkvc")}).rc, 0);
    Result served{};
    std::thread server([&] {
        served = cli({"serve", "--port", "0", "--port-file", path("port"), "--model", "toy-v2", "--out", path("recv.qkvc")});
    });
    std::string port;
    for (int i = 0; i < 500 && port.empty(); ++i) {
        std::ifstream in(path("port"));
        std::string line;
        if (std::getline(in, line) && !in.eof()) port = line;
        if (port.empty()) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ASSERT_FALSE(port.empty());
    const auto sent = cli({"send", "--in", path("c.qkvc"), "--port", port});
    server.join();
    EXPECT_EQ(sent.rc, exit_protocol);
    EXPECT_EQ(served.rc, exit_protocol);
    EXPECT_FALSE(fs::exists(path("recv.qkvc")));
}
