#pragma once

// MERA raw tensor container:
//   "MERA" | u32 version | u32 rank | u32 extent * rank | f32 payload
// All integers and floats little-endian, payload row-major.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "meranet/tensor.hpp"

namespace meranet {

inline constexpr std::uint32_t mera_version = 1;
inline constexpr std::array<char, 4> mera_magic{'M', 'E', 'R', 'A'};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const Tensor<float>& t) {
  std::vector<unsigned char> out(mera_magic.begin(), mera_magic.end());
  out.reserve(12 + 4 * t.rank() + 4 * t.numel());
  detail::put_u32(out, mera_version);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) {
    require(e <= UINT32_MAX, Errc::invalid_argument, "extent too large for MERA");
    detail::put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Tensor<float> decode_tensor(const std::vector<unsigned char>& bytes) {
  const std::size_t size = bytes.size();
  require(size >= 4, Errc::truncated, "MERA: file shorter than magic");
  require(std::memcmp(bytes.data(), mera_magic.data(), 4) == 0, Errc::bad_magic,
          "MERA: bad magic");
  require(size >= 12, Errc::truncated, "MERA: truncated header");
  const auto version = detail::get_u32(bytes.data() + 4);
  require(version == mera_version, Errc::version_mismatch,
          "MERA: unsupported version " + std::to_string(version));
  const auto rank = detail::get_u32(bytes.data() + 8);
  require(rank >= 1, Errc::parse, "MERA: rank must be >= 1");
  require(size >= 12 + 4 * std::size_t(rank), Errc::truncated,
          "MERA: truncated extents");
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = detail::get_u32(bytes.data() + 12 + 4 * i);
    require(shape[i] >= 1, Errc::parse, "MERA: zero extent");
    numel *= shape[i];
  }
  const std::size_t header = 12 + 4 * std::size_t(rank);
  require((size - header) / 4 >= numel, Errc::truncated,
          "MERA: payload truncated (" + std::to_string(size - header) + " of " +
              std::to_string(4 * numel) + " bytes)");
  require(size - header == 4 * numel, Errc::parse, "MERA: trailing bytes after payload");
  std::vector<float> data(numel);
  for (std::size_t i = 0; i < numel; ++i)
    data[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + header + 4 * i));
  return Tensor<float>(std::move(shape), std::move(data));
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path,
                        const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), Errc::io, "write failed: " + path.string());
}

inline void write_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  write_bytes(path, encode_tensor(t));
}

inline Tensor<float> read_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_bytes(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace meranet
