// Copyright 2026 The DAFed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DAFED_RNG_HPP_
#define DAFED_RNG_HPP_

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace dafed {

// Random streams are addressed by a tuple of integers (seed, site, round,
// layer, sample, ...) and never by call order, so results do not depend on
// which site or sample is processed first.

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x2545f4914f6cdd1dULL;
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

inline std::mt19937_64 make_stream(std::initializer_list<std::uint64_t> parts) {
  return std::mt19937_64(stream_seed(parts));
}

/// FNV-1a, used to fold string ids (subjects, sites) into stream keys.
inline std::uint64_t hash_id(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Uniform double in [0, 1) with 53 random bits; portable across standard libraries.
inline double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// Stream tags, folded into keys so distinct uses never share a stream.
enum class StreamTag : std::uint64_t {
  kInit = 1,
  kDropout = 2,
  kBatch = 3,
  kMinePerm = 4,
  kNoise = 5,
  kSynth = 6,
  kFolds = 7,
  kRandomMask = 8,
};

inline std::uint64_t tag(StreamTag t) { return static_cast<std::uint64_t>(t); }

}  // namespace dafed

#endif  // DAFED_RNG_HPP_
