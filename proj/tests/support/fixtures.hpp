#pragma once

#include "common/error.hpp"
#include "common/rng.hpp"
#include "featio/records.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <functional>
#include <string>
#include <unistd.h>

namespace bimors::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("bimors_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

inline ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::ok;
}

inline std::string message_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

inline featio::Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    featio::Matrix m{rows, cols, std::vector<float>(rows * cols)};
    for (auto& v : m.values) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    return m;
}

inline featio::DatasetManifest small_manifest(std::vector<std::string> names, std::uint32_t d_vis, std::uint32_t d_clip,
                                              std::uint32_t d_cap) {
    featio::DatasetManifest m;
    m.dataset_name = "toy";
    m.class_names = std::move(names);
    for (std::size_t i = 0; i < m.class_names.size(); ++i)
        m.class_token_ids.push_back({static_cast<std::uint32_t>(10 + i)});
    m.d_vis = d_vis;
    m.d_clip = d_clip;
    m.d_cap = d_cap;
    m.context_length = 16;
    return m;
}

inline featio::FeatureRecord random_record(const featio::DatasetManifest& m, std::uint32_t class_id, std::size_t index,
                                           Rng& rng) {
    featio::FeatureRecord r;
    r.image_id = "img_" + std::to_string(index);
    r.class_id = class_id;
    r.visual_tokens = random_matrix(1 + index % 3, m.d_vis, rng);
    r.global_embed = random_matrix(1, m.d_clip, rng).values;
    r.caption_text = "caption " + std::to_string(index) + " \xc3\xa9";
    r.caption_token_embeds = random_matrix(1 + index % 4, m.d_cap, rng);
    return r;
}

} // namespace bimors::test
