#include "msom/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <string>

#include "msom/error.hpp"

namespace msom::io {

namespace {

template <class T>
void write_le(std::ostream& out, std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (T v : values) {
            char bytes[sizeof(T)];
            std::memcpy(bytes, &v, sizeof(T));
            std::reverse(bytes, bytes + sizeof(T));
            out.write(bytes, sizeof(T));
        }
    }
}

template <class T>
std::vector<T> read_le(std::istream& in, std::size_t count, const std::filesystem::path& path) {
    std::vector<T> values(count);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(T))
        throw DataError("truncated payload in " + path.string());
    if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
        for (T& v : values) {
            char bytes[sizeof(T)];
            std::memcpy(bytes, &v, sizeof(T));
            std::reverse(bytes, bytes + sizeof(T));
            std::memcpy(&v, bytes, sizeof(T));
        }
    }
    return values;
}

}  // namespace

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    return in;
}

void write_header(std::ostream& out, const nlohmann::json& header) { out << header.dump() << '\n'; }

nlohmann::json read_header(std::istream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("missing header line in " + path.string());
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed header in " + path.string() + ": " + e.what());
    }
}

void write_f32(std::ostream& out, std::span<const float> values) { write_le(out, values); }
std::vector<float> read_f32(std::istream& in, std::size_t count, const std::filesystem::path& path) {
    return read_le<float>(in, count, path);
}
void write_u32(std::ostream& out, std::span<const std::uint32_t> values) { write_le(out, values); }
std::vector<std::uint32_t> read_u32(std::istream& in, std::size_t count, const std::filesystem::path& path) {
    return read_le<std::uint32_t>(in, count, path);
}
void write_u8(std::ostream& out, std::span<const std::uint8_t> values) { write_le(out, values); }
std::vector<std::uint8_t> read_u8(std::istream& in, std::size_t count, const std::filesystem::path& path) {
    return read_le<std::uint8_t>(in, count, path);
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    auto in = open_in(path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed json in " + path.string() + ": " + e.what());
    }
}

void throw_missing(const char* key, const std::filesystem::path& path) {
    throw DataError(std::string("missing field '") + key + "' in " + path.string());
}

}  // namespace msom::io
