#ifndef MEDL_RNG_HPP
#define MEDL_RNG_HPP

#include <array>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace medl {

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// reproducible bit-for-bit regardless of the standard library in use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform double in [0, 1).
  double uniform();

  // Standard normal via Box-Muller (one spare cached).
  double normal();

  // Uniform integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t hash_name(std::string_view name);

// Every random decision in the toolkit draws from a named sub-stream of one
// master seed: derive_stream(seed, "init", fold), derive_stream(seed,
// "sampling", draw), ... Streams with distinct (name, index) are independent.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name,
                          std::uint64_t index = 0);
Rng derive_stream(std::uint64_t master, std::string_view name, std::uint64_t index = 0);

}  // namespace medl

#endif  // MEDL_RNG_HPP
