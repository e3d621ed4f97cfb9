#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qkv {

// Every failure the library raises carries one of these codes so callers
// (the CLI in particular) can map them onto exit statuses without parsing
// messages.
enum class ErrorCode {
    // generic argument/shape problems
    parameter,
    dimension,
    size,
    data,
    model,
    io,
    // container / card decoding
    bad_magic,
    unsupported_version,
    truncated,
    crc_mismatch,
    malformed,
    // receiver compatibility
    compatibility,
    unsupported_topology,
    // framing / protocol
    frame_crc,
    frame_oversize,
    frame_unknown_type,
    short_read,
    session_state,
    handshake_rejected,
    protocol,
};

std::string_view to_string(ErrorCode code);

// Coarse classes used for exit codes: data/format problems versus
// protocol problems versus bad arguments.
enum class ErrorClass { usage, data, protocol };

ErrorClass classify(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

// Decode failures of a CacheCard. Kept separate from frame errors so a
// receiver can tell a corrupt wire frame from a corrupt card.
class CardError : public Error {
public:
    using Error::Error;
};

class FrameError : public Error {
public:
    using Error::Error;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const char* what) {
    if (!cond) throw Error(code, what);
}

}  // namespace qkv
