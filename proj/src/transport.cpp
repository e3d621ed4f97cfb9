#include "qkv/transport.hpp"

#include <algorithm>
#include <arpa/inet.h>
#include <cerrno>
#include <cstring>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

namespace qkv {

namespace {

[[noreturn]] void frame_fail(ErrorCode code, const std::string& what) { throw FrameError(code, what); }

[[noreturn]] void sys_fail(const std::string& what) { fail(ErrorCode::io, what + ": " + std::strerror(errno)); }

}  // namespace

// ---------------------------------------------------------------- streams

bool ByteStream::read_exact(std::span<std::uint8_t> out) {
    std::size_t got = 0;
    while (got < out.size()) {
        const std::size_t n = read_some(out.subspan(got));
        if (n == 0) return false;
        got += n;
    }
    return true;
}

std::size_t MemoryStream::read_some(std::span<std::uint8_t> out) {
    const std::size_t n = std::min(out.size(), input_.size() - pos_);
    std::copy_n(input_.begin() + static_cast<std::ptrdiff_t>(pos_), n, out.begin());
    pos_ += n;
    return n;
}

FdStream::~FdStream() {
    if (fd_ >= 0) ::close(fd_);
}

std::size_t FdStream::read_some(std::span<std::uint8_t> out) {
    if (out.empty()) return 0;
    while (true) {
        const ssize_t n = ::read(fd_, out.data(), out.size());
        if (n >= 0) return static_cast<std::size_t>(n);
        if (errno != EINTR) sys_fail("read");
    }
}

void FdStream::write_all(ByteView data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
        const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            sys_fail("send");
        }
        sent += static_cast<std::size_t>(n);
    }
}

void FdStream::shutdown_write() { ::shutdown(fd_, SHUT_WR); }

std::pair<std::unique_ptr<FdStream>, std::unique_ptr<FdStream>> socket_pair() {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) sys_fail("socketpair");
    return {std::make_unique<FdStream>(fds[0]), std::make_unique<FdStream>(fds[1])};
}

TcpListener::TcpListener(std::uint16_t port, const std::string& host) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) sys_fail("socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd_);
        fail(ErrorCode::parameter, "bad IPv4 address '" + host + "'");
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 4) != 0) {
        const int saved = errno;
        ::close(fd_);
        errno = saved;
        sys_fail("bind/listen on port " + std::to_string(port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<FdStream> TcpListener::accept() {
    while (true) {
        const int c = ::accept(fd_, nullptr, nullptr);
        if (c >= 0) return std::make_unique<FdStream>(c);
        if (errno != EINTR) sys_fail("accept");
    }
}

std::unique_ptr<FdStream> tcp_connect(const std::string& host, std::uint16_t port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) sys_fail("socket");
    auto stream = std::make_unique<FdStream>(fd);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) fail(ErrorCode::parameter, "bad IPv4 address '" + host + "'");
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) sys_fail("connect to " + host + ":" + std::to_string(port));
    return stream;
}

// ---------------------------------------------------------------- frames

std::string_view to_string(FrameType t) {
    switch (t) {
        case FrameType::hello: return "hello";
        case FrameType::hello_ack: return "hello_ack";
        case FrameType::card: return "card";
        case FrameType::error: return "error";
        case FrameType::bye: return "bye";
    }
    return "?";
}

Bytes frame_encode(FrameType type, ByteView payload) {
    require(payload.size() <= max_frame_payload, ErrorCode::parameter, "frame payload exceeds 2^31 bytes");
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(type));
    w.u32(static_cast<std::uint32_t>(payload.size()));
    w.raw(payload);
    w.u32(crc32(w.bytes()));
    return std::move(w).take();
}

Frame frame_decode(ByteStream& in, std::uint64_t max_payload) {
    std::array<std::uint8_t, frame_header_bytes> head{};
    if (!in.read_exact(head)) frame_fail(ErrorCode::short_read, "stream ended inside a frame header");
    const std::uint8_t type = head[0];
    std::uint32_t length = 0;
    for (int i = 0; i < 4; ++i) length |= std::uint32_t{head[1 + static_cast<std::size_t>(i)]} << (8 * i);
    if (type < 1 || type > 5) frame_fail(ErrorCode::frame_unknown_type, "unknown frame type " + std::to_string(type));
    if (length > max_payload)
        frame_fail(ErrorCode::frame_oversize, "frame declares " + std::to_string(length) + " payload bytes, limit " + std::to_string(max_payload));

    // Grow the buffer as bytes arrive so a corrupt length cannot force a
    // large allocation up front.
    constexpr std::size_t chunk = std::size_t{1} << 20;
    const std::size_t total = frame_header_bytes + std::size_t{length} + frame_trailer_bytes;
    Bytes buf(head.begin(), head.end());
    while (buf.size() < total) {
        const std::size_t at = buf.size();
        buf.resize(std::min(total, at + chunk));
        if (!in.read_exact(std::span(buf).subspan(at)))
            frame_fail(ErrorCode::short_read, "stream ended inside a frame payload");
    }
    const std::size_t body = frame_header_bytes + length;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t{buf[body + static_cast<std::size_t>(i)]} << (8 * i);
    if (crc32(ByteView(buf).first(body)) != stored) frame_fail(ErrorCode::frame_crc, "frame checksum mismatch");

    Frame f;
    f.type = static_cast<FrameType>(type);
    f.payload.assign(buf.begin() + frame_header_bytes, buf.begin() + static_cast<std::ptrdiff_t>(body));
    return f;
}

// ---------------------------------------------------------------- handshake

void Handshake::validate() const {
    require(!agent_id.empty() && !model_id.empty(), ErrorCode::protocol, "handshake ids must be non-empty");
    require(agent_id.size() <= 255 && model_id.size() <= 255, ErrorCode::protocol, "handshake ids are limited to 255 bytes");
    require((supported_widths & ~0x0F) == 0, ErrorCode::protocol, "unknown width bits in handshake");
}

Bytes Handshake::encode() const {
    validate();
    ByteWriter w;
    w.u16(protocol);
    w.short_string(agent_id);
    w.short_string(model_id);
    w.u8(supported_widths);
    return std::move(w).take();
}

Handshake Handshake::decode(ByteView payload) {
    ByteReader r(payload, ErrorCode::protocol);
    Handshake h;
    h.protocol = r.u16();
    h.agent_id = r.short_string();
    h.model_id = r.short_string();
    h.supported_widths = r.u8();
    if (r.remaining() != 0) fail(ErrorCode::protocol, "trailing bytes in handshake");
    h.validate();
    return h;
}

HandshakeOutcome handshake_exchange(const Handshake& local, const Handshake& remote) {
    local.validate();
    remote.validate();
    HandshakeOutcome out;
    if (local.protocol != remote.protocol)
        out.reason = RejectReason::version_mismatch;
    else if (local.model_id != remote.model_id)
        out.reason = RejectReason::model_mismatch;
    else
        out.session = SessionDescriptor{local, remote};
    return out;
}

Bytes encode_error_payload(RejectReason reason, std::string_view message) {
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(reason));
    w.short_string(message.substr(0, 255));
    return std::move(w).take();
}

std::pair<RejectReason, std::string> decode_error_payload(ByteView payload) {
    ByteReader r(payload, ErrorCode::protocol);
    const std::uint8_t code = r.u8();
    if (code > 2) fail(ErrorCode::protocol, "unknown reject reason " + std::to_string(code));
    std::string msg = r.short_string();
    return {static_cast<RejectReason>(code), std::move(msg)};
}

// ---------------------------------------------------------------- session

namespace {

std::string_view reason_text(RejectReason r) {
    switch (r) {
        case RejectReason::version_mismatch: return "version_mismatch";
        case RejectReason::model_mismatch: return "model_mismatch";
        default: return "none";
    }
}

[[noreturn]] void rejected(RejectReason r, const std::string& detail) {
    fail(ErrorCode::handshake_rejected, std::string(reason_text(r)) + ": " + detail);
}

}  // namespace

Session::Session(ByteStream& stream, Handshake local) : stream_(stream), local_(std::move(local)) { local_.validate(); }

void Session::require_established(const char* op) const {
    if (state_ != State::established) fail(ErrorCode::session_state, std::string(op) + " requires an established session");
}

void Session::connect() {
    if (state_ != State::fresh) fail(ErrorCode::session_state, "connect on a used session");
    state_ = State::closed;  // only a completed handshake reopens it
    stream_.write_all(frame_encode(FrameType::hello, local_.encode()));
    Frame f = frame_decode(stream_);
    if (f.type == FrameType::error) {
        auto [reason, msg] = decode_error_payload(f.payload);
        state_ = State::closed;
        rejected(reason, msg);
    }
    if (f.type != FrameType::hello_ack) fail(ErrorCode::protocol, "expected hello_ack, got " + std::string(to_string(f.type)));
    Handshake remote = Handshake::decode(f.payload);
    auto outcome = handshake_exchange(local_, remote);
    if (!outcome.accepted()) {
        state_ = State::closed;
        rejected(outcome.reason, "peer acknowledged an incompatible handshake");
    }
    remote_ = std::move(remote);
    state_ = State::established;
}

void Session::accept() {
    if (state_ != State::fresh) fail(ErrorCode::session_state, "accept on a used session");
    state_ = State::closed;  // only a completed handshake reopens it
    Frame f = frame_decode(stream_);
    if (f.type != FrameType::hello) fail(ErrorCode::protocol, "expected hello, got " + std::string(to_string(f.type)));
    Handshake remote = Handshake::decode(f.payload);
    auto outcome = handshake_exchange(local_, remote);
    if (!outcome.accepted()) {
        const std::string msg = "local protocol " + std::to_string(local_.protocol) + " model '" + local_.model_id + "', remote protocol " +
                                std::to_string(remote.protocol) + " model '" + remote.model_id + "'";
        stream_.write_all(frame_encode(FrameType::error, encode_error_payload(outcome.reason, msg)));
        state_ = State::closed;
        rejected(outcome.reason, msg);
    }
    stream_.write_all(frame_encode(FrameType::hello_ack, local_.encode()));
    remote_ = std::move(remote);
    state_ = State::established;
}

TransferStats Session::send_card(const CacheCard& card) { return send_card_bytes(encode_card(card)); }

TransferStats Session::send_card_bytes(ByteView encoded_card) {
    require_established("send_card");
    const auto t0 = std::chrono::steady_clock::now();
    const Bytes frame = frame_encode(FrameType::card, encoded_card);
    stream_.write_all(frame);
    last_.bytes = frame.size();
    last_.duration_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return last_;
}

std::optional<Bytes> Session::receive_card_bytes() {
    require_established("receive_card");
    const auto t0 = std::chrono::steady_clock::now();
    Frame f = frame_decode(stream_);
    if (f.type == FrameType::bye) {
        state_ = State::closed;
        return std::nullopt;
    }
    if (f.type == FrameType::error) {
        auto [reason, msg] = decode_error_payload(f.payload);
        state_ = State::closed;
        fail(ErrorCode::protocol, "peer error: " + msg);
    }
    if (f.type != FrameType::card) fail(ErrorCode::protocol, "expected card frame, got " + std::string(to_string(f.type)));
    last_.bytes = frame_header_bytes + f.payload.size() + frame_trailer_bytes;
    last_.duration_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return std::move(f.payload);
}

std::optional<CacheCard> Session::receive_card() {
    auto bytes = receive_card_bytes();
    if (!bytes) return std::nullopt;
    return decode_card(*bytes);  // CardError, not FrameError
}

void Session::close() {
    if (state_ == State::closed) return;
    require_established("close");
    stream_.write_all(frame_encode(FrameType::bye, {}));
    state_ = State::closed;
}

}  // namespace qkv
