#pragma once

#include <stdexcept>
#include <string>

namespace bimors {

// Values mirror bimors_status in include/bimors/bimors.h.
enum class ErrorCode : int {
    ok = 0,
    invalid_argument = 1,
    io = 2,
    format = 3,
    version = 4,
    truncated = 5,
    checksum = 6,
    validation = 7,
    shape = 8,
    index = 9,
    protocol = 10,
    split = 11,
    contract = 12,
    missing_tensor = 13,
    extra_tensor = 14,
    length = 15,
    internal = 16,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

} // namespace bimors
