#pragma once

#include <cstdint>
#include <random>

namespace balance {

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Stream seed for one replication of one scenario. Depends only on its
// arguments, so replications can be generated in any order or in parallel.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t scenario_index,
                                    std::uint64_t replication) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ splitmix64(scenario_index + 0x1234567ull));
  h = splitmix64(h ^ splitmix64(replication + 0x89ABCDEFull));
  return h;
}

}  // namespace balance
