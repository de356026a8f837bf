#pragma once

#include "tensor/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bimors {

inline constexpr char kContainerMagic[4] = {'B', 'M', 'T', 'W'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const NamedTensor&) const = default;
};

// "BMTW", u32 version, u32 count, then per tensor: u32 name length + UTF-8
// name, u32 rank, u32 dims[rank], f32-LE values. Order is preserved.
std::vector<std::uint8_t> encode_container(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_container(std::span<const std::uint8_t> bytes, const std::string& what);

void save_container(std::span<const NamedTensor> tensors, const std::filesystem::path& path);
std::vector<NamedTensor> load_container(const std::filesystem::path& path);

} // namespace bimors
