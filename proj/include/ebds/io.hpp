// Binary/JSON file helpers and content hashing for run artifacts.
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ebds/errors.hpp"

namespace ebds::io {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "artifact files are little-endian float64");

/// 64-bit FNV-1a, incremental.
class Fnv1a {
  public:
    void update(std::span<const std::byte> bytes) {
        for (auto b : bytes) {
            hash_ ^= static_cast<std::uint64_t>(b);
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }
    void update(std::span<const double> v) { update(std::as_bytes(v)); }
    std::uint64_t value() const { return hash_; }

  private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string to_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string hash_string(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return to_hex(h.value());
}

/// Hash of a JSON document in its canonical (sorted-key, compact) dump.
inline std::string hash_json(const json &j) { return hash_string(j.dump()); }

inline std::string hash_doubles(std::span<const double> v) {
    Fnv1a h;
    h.update(v);
    return to_hex(h.value());
}

inline void write_doubles(const std::filesystem::path &path, std::span<const double> data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char *>(data.data()),
              static_cast<std::streamsize>(data.size_bytes()));
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<double> read_doubles(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    auto size = static_cast<std::size_t>(in.tellg());
    if (size % sizeof(double) != 0) throw IoError("truncated float64 file: " + path.string());
    std::vector<double> data(size / sizeof(double));
    in.seekg(0);
    in.read(reinterpret_cast<char *>(data.data()), static_cast<std::streamsize>(size));
    if (!in) throw IoError("read failed: " + path.string());
    return data;
}

inline void write_json(const std::filesystem::path &path, const json &j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline json read_json(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception &e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline void ensure_directory(const std::filesystem::path &dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

/// Round-trip-exact decimal formatting for CSV output.
inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace ebds::io

namespace ebds {

/// Receives structured progress lines; may be empty.
using Logger = std::function<void(const std::string &)>;

} // namespace ebds
