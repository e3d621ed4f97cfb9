#include "qkv/error.hpp"

namespace qkv {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::parameter: return "parameter error";
        case ErrorCode::dimension: return "dimension error";
        case ErrorCode::size: return "size error";
        case ErrorCode::data: return "data error";
        case ErrorCode::model: return "model error";
        case ErrorCode::io: return "io error";
        case ErrorCode::bad_magic: return "bad magic";
        case ErrorCode::unsupported_version: return "unsupported version";
        case ErrorCode::truncated: return "truncated";
        case ErrorCode::crc_mismatch: return "crc mismatch";
        case ErrorCode::malformed: return "malformed";
        case ErrorCode::compatibility: return "compatibility error";
        case ErrorCode::unsupported_topology: return "unsupported topology";
        case ErrorCode::frame_crc: return "frame crc mismatch";
        case ErrorCode::frame_oversize: return "frame oversize";
        case ErrorCode::frame_unknown_type: return "unknown frame type";
        case ErrorCode::short_read: return "short read";
        case ErrorCode::session_state: return "session state error";
        case ErrorCode::handshake_rejected: return "handshake rejected";
        case ErrorCode::protocol: return "protocol error";
    }
    return "error";
}

ErrorClass classify(ErrorCode code) {
    switch (code) {
        case ErrorCode::parameter:
        case ErrorCode::dimension:
        case ErrorCode::size:
            return ErrorClass::usage;
        case ErrorCode::frame_crc:
        case ErrorCode::frame_oversize:
        case ErrorCode::frame_unknown_type:
        case ErrorCode::short_read:
        case ErrorCode::session_state:
        case ErrorCode::handshake_rejected:
        case ErrorCode::protocol:
        case ErrorCode::compatibility:
            return ErrorClass::protocol;
        default:
            return ErrorClass::data;
    }
}

}  // namespace qkv
