#pragma once

#include "common/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace bimors {

static_assert(std::endian::native == std::endian::little, "container formats assume a little-endian host");

class ByteWriter {
public:
    void u32(std::uint32_t v) { raw(&v, sizeof v); }

    void f32s(std::span<const float> values) { raw(values.data(), values.size_bytes()); }

    void bytes(std::string_view s) { raw(s.data(), s.size()); }

    // u32 length prefix then the bytes.
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }

    std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader; running past the end raises ErrorCode::truncated.
class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, std::string what)
        : bytes_(bytes), what_(std::move(what)) {}

    std::uint32_t u32() {
        std::uint32_t v;
        copy(&v, sizeof v);
        return v;
    }

    void f32s(std::span<float> out) { copy(out.data(), out.size_bytes()); }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::string str() { return bytes(u32()); }

    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    void seek(std::size_t pos) { pos_ = pos; }

private:
    void need(std::size_t n) const {
        if (n > remaining())
            fail(ErrorCode::truncated, what_ + " truncated at byte " + std::to_string(pos_) + " (needed " +
                                           std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
    }

    void copy(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    std::span<const std::uint8_t> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

} // namespace bimors
