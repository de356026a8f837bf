#include "common/byte_io.hpp"

#include <fstream>

namespace bimors {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) fail(ErrorCode::io, "cannot open " + path);
    const auto size = static_cast<std::size_t>(in.tellg());
    std::vector<std::uint8_t> out(size);
    in.seekg(0);
    if (size && !in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size)))
        fail(ErrorCode::io, "read failed for " + path);
    return out;
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io, "write failed for " + path);
}

} // namespace bimors
