#include "common/kv_text.hpp"

#include "common/error.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace bimors {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return {};
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

} // namespace

std::string format_float(double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", value);
    return buf;
}

KvDocument KvDocument::parse(const std::string& text) {
    KvDocument doc;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped.front() == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos || eq == 0)
            fail(ErrorCode::format, "key/value line " + std::to_string(line_no) + " has no key");
        doc.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    return doc;
}

KvDocument KvDocument::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void KvDocument::set(const std::string& key, const std::string& value) {
    if (auto it = index_.find(key); it != index_.end()) {
        entries_[it->second].second = value;
        return;
    }
    index_.emplace(key, entries_.size());
    entries_.emplace_back(key, value);
}

void KvDocument::set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }

void KvDocument::set(const std::string& key, double value) { set(key, format_float(value)); }

void KvDocument::set_ints(const std::string& key, const std::vector<std::int64_t>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(values[i]);
    }
    set(key, out);
}

bool KvDocument::has(const std::string& key) const { return index_.count(key) != 0; }

const std::string& KvDocument::get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) fail(ErrorCode::validation, "missing key '" + key + "'");
    return entries_[it->second].second;
}

std::optional<std::string> KvDocument::find(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return entries_[it->second].second;
}

std::int64_t KvDocument::get_int(const std::string& key) const {
    const std::string& v = get(key);
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        fail(ErrorCode::validation, "key '" + key + "' is not an integer: " + v);
    return out;
}

std::uint64_t KvDocument::get_u64(const std::string& key) const {
    const std::string& v = get(key);
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        fail(ErrorCode::validation, "key '" + key + "' is not an unsigned integer: " + v);
    return out;
}

double KvDocument::get_double(const std::string& key) const {
    const std::string& v = get(key);
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size())
        fail(ErrorCode::validation, "key '" + key + "' is not a number: " + v);
    return out;
}

std::vector<std::int64_t> KvDocument::get_ints(const std::string& key) const {
    std::vector<std::int64_t> out;
    std::istringstream in(get(key));
    std::string tok;
    while (in >> tok) {
        std::int64_t x = 0;
        auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
        if (ec != std::errc{} || ptr != tok.data() + tok.size())
            fail(ErrorCode::validation, "key '" + key + "' holds a non-integer entry: " + tok);
        out.push_back(x);
    }
    return out;
}

std::string KvDocument::str() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

void KvDocument::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + path.string());
    out << str();
    if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

} // namespace bimors
