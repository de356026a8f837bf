#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bimors {

// Line-oriented "key=value" document. '#' starts a comment line, keys keep
// insertion order on output, values run to end of line.
class KvDocument {
public:
    static KvDocument parse(const std::string& text);
    static KvDocument load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    void set(const std::string& key, std::int64_t value);
    void set(const std::string& key, double value);
    void set_ints(const std::string& key, const std::vector<std::int64_t>& values);

    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;
    std::optional<std::string> find(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::vector<std::int64_t> get_ints(const std::string& key) const;

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::string str() const;
    void save(const std::filesystem::path& path) const;

private:
    std::vector<std::pair<std::string, std::string>> entries_;
    std::map<std::string, std::size_t> index_;
};

std::string format_float(double value);

} // namespace bimors
