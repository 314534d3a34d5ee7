#pragma once

#include <cstdint>
#include <random>

namespace ctc {

/// Engine for one subject. The stream depends only on (seed, subject index,
/// stream tag), never on which thread runs the subject.
inline std::mt19937_64 subject_engine(std::uint64_t seed, std::uint64_t index, std::uint32_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), stream};
  return std::mt19937_64(seq);
}

}  // namespace ctc
