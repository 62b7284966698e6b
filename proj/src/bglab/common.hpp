// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bglab {

using Token = std::int32_t;

inline constexpr int kVocabSize = 64;
inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;
inline constexpr Token kEos = 2;

// Evaluation actions: every token except PAD and BOS (EOS included).
inline constexpr int kEvalActions = kVocabSize - 2;
inline constexpr Token kFirstEvalToken = 2;

constexpr Token eval_token(int action_index) noexcept { return kFirstEvalToken + action_index; }
constexpr int eval_index(Token token) noexcept { return token - kFirstEvalToken; }
constexpr bool in_eval_set(Token token) noexcept { return token >= kFirstEvalToken && token < kVocabSize; }

// Error categories. The C API maps each one onto a stable return code, and the
// CLI uses the same numbers as process exit codes.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to derive independent RNG stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t stream_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                    std::uint64_t c = 0) noexcept {
  return mix64(mix64(mix64(mix64(base) ^ a) ^ b) ^ c);
}

// Uniform double in [0, 1) from a 64-bit engine, independent of the
// standard library's distribution implementation.
template <class Engine>
double uniform01(Engine& engine) {
  return static_cast<double>(engine() >> 11) * 0x1.0p-53;
}

// FNV-1a, 64 bit. Stable content hash for run configs and model ids.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) noexcept {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001B3ULL;
    }
  }
  void update(std::string_view text) noexcept { update(text.data(), text.size()); }
  std::uint64_t digest() const noexcept { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

std::string to_hex(std::uint64_t value);

// Worker threads for parallel sections: BGLAB_THREADS if set, otherwise the
// hardware concurrency. Results never depend on this value.
int worker_threads();

}  // namespace bglab
