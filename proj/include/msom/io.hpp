#pragma once

// Framing shared by every binary artifact: one UTF-8 JSON header line, then
// raw little-endian payload.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace msom::io {

std::ofstream open_out(const std::filesystem::path& path);
std::ifstream open_in(const std::filesystem::path& path);

void write_header(std::ostream& out, const nlohmann::json& header);
nlohmann::json read_header(std::istream& in, const std::filesystem::path& path);

void write_f32(std::ostream& out, std::span<const float> values);
std::vector<float> read_f32(std::istream& in, std::size_t count, const std::filesystem::path& path);
void write_u32(std::ostream& out, std::span<const std::uint32_t> values);
std::vector<std::uint32_t> read_u32(std::istream& in, std::size_t count, const std::filesystem::path& path);
void write_u8(std::ostream& out, std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_u8(std::istream& in, std::size_t count, const std::filesystem::path& path);

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::filesystem::path& path);

[[noreturn]] void throw_missing(const char* key, const std::filesystem::path& path);

// Fetches a required header field, raising DataError naming the file.
template <class T>
T field(const nlohmann::json& j, const char* key, const std::filesystem::path& path) {
    if (!j.contains(key)) throw_missing(key, path);
    return j.at(key).get<T>();
}

}  // namespace msom::io
