#include "common/error.hpp"

namespace bimors {

const char* error_code_name(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::ok: return "ok";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::version: return "version";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::validation: return "validation";
    case ErrorCode::shape: return "shape";
    case ErrorCode::index: return "index";
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::split: return "split";
    case ErrorCode::contract: return "contract";
    case ErrorCode::missing_tensor: return "missing_tensor";
    case ErrorCode::extra_tensor: return "extra_tensor";
    case ErrorCode::length: return "length";
    case ErrorCode::internal: return "internal";
    }
    return "unknown";
}

} // namespace bimors
