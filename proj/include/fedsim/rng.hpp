#pragma once

#include <cstdint>
#include <random>

namespace fedsim {

using Rng = std::mt19937_64;

// What a derived stream is used for. Part of the stream key, so two purposes
// never share random numbers even for the same (round, client).
enum class StreamPurpose : std::uint64_t {
  init = 1,
  sampling = 2,
  local_train = 3,
  partition = 4,
  synthetic = 5,
  synthetic_test = 6,
  eval_crop = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for the stream identified by (master, purpose, round, client).
// Streams depend only on their key, never on the order in which they are
// requested, which is what makes parallel clients reproducible.
inline std::uint64_t derive_seed(std::uint64_t master, StreamPurpose purpose,
                                 std::uint64_t round = 0, std::uint64_t client = 0) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  h = splitmix64(h ^ round);
  h = splitmix64(h ^ client);
  return h;
}

inline Rng make_stream(std::uint64_t master, StreamPurpose purpose,
                       std::uint64_t round = 0, std::uint64_t client = 0) {
  return Rng(derive_seed(master, purpose, round, client));
}

}  // namespace fedsim
