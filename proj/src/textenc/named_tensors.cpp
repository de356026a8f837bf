#include "textenc/named_tensors.hpp"

#include "common/byte_io.hpp"
#include "common/error.hpp"

#include <cstring>
#include <set>

namespace bimors {

std::vector<std::uint8_t> encode_container(std::span<const NamedTensor> tensors) {
    ByteWriter w;
    w.bytes(std::string_view(kContainerMagic, 4));
    w.u32(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (shape_numel(t.shape) != t.values.size())
            fail(ErrorCode::shape, "tensor '" + t.name + "' shape " + shape_str(t.shape) + " does not match its " +
                                       std::to_string(t.values.size()) + " values");
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
        w.f32s(t.values);
    }
    return w.take();
}

std::vector<NamedTensor> decode_container(std::span<const std::uint8_t> bytes, const std::string& what) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
        fail(ErrorCode::format, what + ": bad magic (expected BMTW)");
    ByteReader r(bytes, what);
    r.skip(4);
    const std::uint32_t version = r.u32();
    if (version != kContainerVersion) fail(ErrorCode::version, what + ": unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    std::vector<NamedTensor> out;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str();
        if (!names.insert(t.name).second) fail(ErrorCode::format, what + ": duplicate tensor name '" + t.name + "'");
        const std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 8) fail(ErrorCode::format, what + ": tensor '" + t.name + "' has rank " + std::to_string(rank));
        std::size_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const std::uint32_t d = r.u32();
            if (d == 0) fail(ErrorCode::format, what + ": tensor '" + t.name + "' has a zero dimension");
            t.shape.push_back(d);
            n *= d;
        }
        if (n > r.remaining() / sizeof(float) + 1)
            fail(ErrorCode::truncated, what + ": tensor '" + t.name + "' needs " + std::to_string(n * sizeof(float)) +
                                           " bytes, " + std::to_string(r.remaining()) + " remain");
        t.values.resize(n);
        r.f32s(t.values);
        out.push_back(std::move(t));
    }
    if (r.remaining() != 0) fail(ErrorCode::format, what + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return out;
}

void save_container(std::span<const NamedTensor> tensors, const std::filesystem::path& path) {
    write_file_bytes(path.string(), encode_container(tensors));
}

std::vector<NamedTensor> load_container(const std::filesystem::path& path) {
    return decode_container(read_file_bytes(path.string()), path.string());
}

} // namespace bimors
