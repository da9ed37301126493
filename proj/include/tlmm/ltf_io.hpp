#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tlmm/errors.hpp"
#include "tlmm/tensor.hpp"

// LTF1 binary tensors: magic "LTF1", u32 LE order word, order x u32 LE dims, then the
// payload (f64 LE by default) with the last index fastest. The high byte of the order
// word is a flag byte; flag 0x01 marks an int32 payload (label volumes).
namespace tlmm {

namespace ltf_detail {

constexpr char kMagic[4] = {'L', 'T', 'F', '1'};
constexpr std::uint32_t kIntFlag = 0x01;

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFFu));
}
inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFFu));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int b = 3; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int b = 7; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}

inline void put_header(std::vector<unsigned char>& out, const Dims& dims, std::uint32_t flag) {
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(dims.size()) | (flag << 24));
  for (Index d : dims) put_u32(out, static_cast<std::uint32_t>(d));
}

struct Header {
  Dims dims;
  std::uint32_t flag = 0;
  std::size_t payload_offset = 0;
};

inline Header parse_header(const std::vector<unsigned char>& buf, const std::string& where) {
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw DataError(where + ": bad magic, expected LTF1");
  const std::uint32_t word = get_u32(buf.data() + 4);
  Header h;
  h.flag = word >> 24;
  const std::uint32_t order = word & 0x00FFFFFFu;
  if (order == 0) throw DataError(where + ": tensor order is 0");
  if (buf.size() < 8 + 4ull * order) throw DataError(where + ": truncated header");
  for (std::uint32_t j = 0; j < order; ++j) {
    const std::uint32_t d = get_u32(buf.data() + 8 + 4 * j);
    if (d == 0) throw DataError(where + ": zero dimension in header");
    h.dims.push_back(static_cast<Index>(d));
  }
  h.payload_offset = 8 + 4ull * order;
  return h;
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace ltf_detail

struct LabelVolume {
  Dims dims;
  std::vector<std::int32_t> labels;
};

inline std::vector<unsigned char> encode_ltf(const DenseTensor& t) {
  std::vector<unsigned char> out;
  out.reserve(8 + 4 * t.order() + 8 * static_cast<std::size_t>(t.size()));
  ltf_detail::put_header(out, t.dims(), 0);
  for (double v : t.values()) ltf_detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline DenseTensor decode_ltf(const std::vector<unsigned char>& buf, const std::string& where = "LTF1") {
  const auto h = ltf_detail::parse_header(buf, where);
  if (h.flag != 0) throw DataError(where + ": integer payload where real tensor expected");
  const Index n = dims_product(h.dims);
  if (buf.size() != h.payload_offset + 8 * static_cast<std::size_t>(n))
    throw DataError(where + ": truncated or oversized payload (expected " + std::to_string(n) +
                    " values)");
  std::vector<double> vals(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    vals[static_cast<std::size_t>(i)] =
        std::bit_cast<double>(ltf_detail::get_u64(buf.data() + h.payload_offset + 8 * i));
  return DenseTensor(h.dims, std::move(vals));
}

inline std::vector<unsigned char> encode_ltf(const LabelVolume& v) {
  std::vector<unsigned char> out;
  ltf_detail::put_header(out, v.dims, ltf_detail::kIntFlag);
  for (std::int32_t l : v.labels) ltf_detail::put_u32(out, static_cast<std::uint32_t>(l));
  return out;
}

inline LabelVolume decode_label_ltf(const std::vector<unsigned char>& buf, const std::string& where = "LTF1") {
  const auto h = ltf_detail::parse_header(buf, where);
  if (h.flag != ltf_detail::kIntFlag) throw DataError(where + ": expected integer payload flag");
  const Index n = dims_product(h.dims);
  if (buf.size() != h.payload_offset + 4 * static_cast<std::size_t>(n))
    throw DataError(where + ": truncated or oversized label payload");
  LabelVolume v;
  v.dims = h.dims;
  v.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    v.labels[static_cast<std::size_t>(i)] =
        static_cast<std::int32_t>(ltf_detail::get_u32(buf.data() + h.payload_offset + 4 * i));
  return v;
}

inline void write_ltf(const std::string& path, const DenseTensor& t) {
  ltf_detail::write_file(path, encode_ltf(t));
}
inline DenseTensor read_ltf(const std::string& path) { return decode_ltf(ltf_detail::read_file(path), path); }

inline void write_label_ltf(const std::string& path, const LabelVolume& v) {
  ltf_detail::write_file(path, encode_ltf(v));
}
inline LabelVolume read_label_ltf(const std::string& path) {
  return decode_label_ltf(ltf_detail::read_file(path), path);
}

}  // namespace tlmm
