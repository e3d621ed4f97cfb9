#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <utility>
#include <optional>
#include <string>
#include <vector>

#include "qkv/bytes.hpp"
#include "qkv/cachecard.hpp"

namespace qkv {

// ---------------------------------------------------------------- streams

// Reliable, ordered byte stream. read_some returns 0 only at end of stream.
class ByteStream {
public:
    virtual ~ByteStream() = default;
    virtual std::size_t read_some(std::span<std::uint8_t> out) = 0;
    virtual void write_all(ByteView data) = 0;

    // Fills `out` completely; false when the stream ends first (any bytes
    // read before the end are discarded by the caller).
    bool read_exact(std::span<std::uint8_t> out);
};

// In-memory stream: reads consume `input`, writes append to `output`.
class MemoryStream : public ByteStream {
public:
    MemoryStream() = default;
    explicit MemoryStream(Bytes input) : input_(std::move(input)) {}

    std::size_t read_some(std::span<std::uint8_t> out) override;
    void write_all(ByteView data) override { output_.insert(output_.end(), data.begin(), data.end()); }

    void feed(ByteView data) { input_.insert(input_.end(), data.begin(), data.end()); }
    const Bytes& output() const { return output_; }
    Bytes take_output() { return std::exchange(output_, {}); }
    std::size_t read_position() const { return pos_; }

private:
    Bytes input_;
    std::size_t pos_ = 0;
    Bytes output_;
};

// POSIX socket / file descriptor stream. Owns the descriptor.
class FdStream : public ByteStream {
public:
    explicit FdStream(int fd) : fd_(fd) {}
    ~FdStream() override;
    FdStream(const FdStream&) = delete;
    FdStream& operator=(const FdStream&) = delete;

    std::size_t read_some(std::span<std::uint8_t> out) override;
    void write_all(ByteView data) override;
    void shutdown_write();
    int fd() const { return fd_; }

private:
    int fd_;
};

// Connected pair of local sockets, for loopback handoffs.
std::pair<std::unique_ptr<FdStream>, std::unique_ptr<FdStream>> socket_pair();

// TCP helpers for the serve/send commands (IPv4).
class TcpListener {
public:
    explicit TcpListener(std::uint16_t port, const std::string& host = "127.0.0.1");
    ~TcpListener();
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;

    std::uint16_t port() const { return port_; }
    std::unique_ptr<FdStream> accept();

private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

std::unique_ptr<FdStream> tcp_connect(const std::string& host, std::uint16_t port);

// ---------------------------------------------------------------- frames

enum class FrameType : std::uint8_t { hello = 1, hello_ack = 2, card = 3, error = 4, bye = 5 };

std::string_view to_string(FrameType t);

inline constexpr std::size_t frame_header_bytes = 5;  // type u8 + length u32
inline constexpr std::size_t frame_trailer_bytes = 4;  // crc32
inline constexpr std::uint64_t max_frame_payload = std::uint64_t{1} << 31;

struct Frame {
    FrameType type = FrameType::bye;
    Bytes payload;

    friend bool operator==(const Frame&, const Frame&) = default;
};

// type | length (LE u32) | payload | CRC-32 over type, length and payload.
Bytes frame_encode(FrameType type, ByteView payload);
// Reads exactly one frame. Throws FrameError: short_read, frame_crc,
// frame_oversize or frame_unknown_type. No partial frame is returned.
Frame frame_decode(ByteStream& in, std::uint64_t max_payload = max_frame_payload);

// ---------------------------------------------------------------- handshake

inline constexpr std::uint16_t protocol_version = 1;

struct Handshake {
    std::uint16_t protocol = protocol_version;
    std::string agent_id;
    std::string model_id;
    std::uint8_t supported_widths = 0x0F;  // bit i set: width all_bit_widths[i] accepted

    void validate() const;
    Bytes encode() const;
    static Handshake decode(ByteView payload);

    friend bool operator==(const Handshake&, const Handshake&) = default;
};

enum class RejectReason : std::uint8_t { none = 0, version_mismatch = 1, model_mismatch = 2 };

struct SessionDescriptor {
    Handshake local;
    Handshake remote;
};

struct HandshakeOutcome {
    std::optional<SessionDescriptor> session;
    RejectReason reason = RejectReason::none;

    bool accepted() const { return session.has_value(); }
};

// Accept iff protocol versions and model ids are equal.
HandshakeOutcome handshake_exchange(const Handshake& local, const Handshake& remote);

// Error frame payload: reason code u8 | message (u8 length + bytes).
Bytes encode_error_payload(RejectReason reason, std::string_view message);
std::pair<RejectReason, std::string> decode_error_payload(ByteView payload);

// ---------------------------------------------------------------- session

struct TransferStats {
    std::size_t bytes = 0;
    double duration_ms = 0.0;
};

// One logical peer over one stream. States: fresh -> established -> closed.
class Session {
public:
    Session(ByteStream& stream, Handshake local);

    // Client side: send hello, wait for hello_ack or error.
    void connect();
    // Server side: wait for hello, answer with hello_ack or error.
    void accept();

    bool established() const { return state_ == State::established; }
    const std::optional<Handshake>& remote() const { return remote_; }

    TransferStats send_card(const CacheCard& card);
    TransferStats send_card_bytes(ByteView encoded_card);
    // Returns nullopt when the peer said bye.
    std::optional<CacheCard> receive_card();
    std::optional<Bytes> receive_card_bytes();
    void close();  // sends bye

    const TransferStats& last_transfer() const { return last_; }

private:
    enum class State { fresh, established, closed };
    void require_established(const char* op) const;

    ByteStream& stream_;
    Handshake local_;
    std::optional<Handshake> remote_;
    State state_ = State::fresh;
    TransferStats last_;
};

}  // namespace qkv
