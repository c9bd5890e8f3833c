#pragma once

// ModelParams on disk ("FSPM", little-endian):
//   magic "FSPM" | u32 version=1 | u64 n | n x f64
//   u32 entries | per entry: u16 name_len, name, u64 offset, u8 rank, rank x u64 dims

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fedsim/bytes.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_params(const ModelParams& params) {
  check_params(params);
  bytes::Writer w;
  w.raw("FSPM");
  w.u32(kCheckpointVersion);
  w.u64(params.values.size());
  for (double v : params.values) w.f64(v);
  w.u32(static_cast<std::uint32_t>(params.layout.size()));
  for (const auto& s : params.layout) {
    if (s.name.size() > std::numeric_limits<std::uint16_t>::max())
      throw LayoutError("slice name too long: " + s.name);
    w.u16(static_cast<std::uint16_t>(s.name.size()));
    w.raw(s.name);
    w.u64(s.offset);
    w.u8(static_cast<std::uint8_t>(s.shape.size()));
    for (auto d : s.shape) w.u64(d);
  }
  return w.buffer();
}

inline ModelParams decode_params(const std::vector<char>& buf) {
  bytes::Reader r(buf);
  if (r.raw(4, "magic") != "FSPM") throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.offset();
  if (auto v = r.u32("version"); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  const std::uint64_t n = r.u64("vector length");
  if (n > r.remaining() / 8) throw FormatError("vector length exceeds payload", r.offset());
  ModelParams p;
  p.values.resize(n);
  for (auto& v : p.values) v = r.f64("parameter value");
  const std::uint32_t entries = r.u32("layout entry count");
  for (std::uint32_t i = 0; i < entries; ++i) {
    ParamSlice s;
    s.name = r.raw(r.u16("name length"), "slice name");
    s.offset = r.u64("slice offset");
    const std::size_t rank_at = r.offset();
    const std::uint8_t rank = r.u8("slice rank");
    if (rank == 0) throw FormatError("slice '" + s.name + "' has rank 0", rank_at);
    for (std::uint8_t d = 0; d < rank; ++d) s.shape.push_back(r.u64("slice dim"));
    p.layout.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after layout table", r.offset());
  try {
    check_params(p);
  } catch (const LayoutError& e) {
    throw FormatError(std::string("inconsistent layout table: ") + e.what(), r.offset());
  }
  return p;
}

inline void save_params(const ModelParams& params, const std::string& path) {
  bytes::write_file(path, encode_params(params));
}

inline ModelParams load_params(const std::string& path) { return decode_params(bytes::read_file(path)); }

}  // namespace fedsim
