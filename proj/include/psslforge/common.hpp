// Copyright 2026 The psslforge Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pssl {

// Error taxonomy. Format errors name the offending field in the message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("i/o error: " + msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

class TrainError : public Error {
 public:
  explicit TrainError(const std::string& msg) : Error("training error: " + msg) {}
};

class MetricError : public Error {
 public:
  explicit MetricError(const std::string& msg) : Error("metric error: " + msg) {}
};

// A run that completed but missed its configured quality floor.
class QualityError : public Error {
 public:
  explicit QualityError(const std::string& msg) : Error("quality floor: " + msg) {}
};

// SplitMix64. All randomness in the library flows through this generator so
// that identical seeds give bit-identical streams on every platform
// (std::random distributions are implementation-defined).
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
  std::uint64_t below(std::uint64_t n) { return n ? next() % n : 0; }

 private:
  std::uint64_t state_ = 0;
};

// Combines a base seed with a stream index into a fresh seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  SplitMix64 g(base ^ (0x632be59bd9b4e019ull * (stream + 1)));
  return g.next();
}

// Standard-normal stream: Box-Muller over SplitMix64 uniforms, draws strictly
// sequential (the cosine branch first, the sine branch cached for the next
// call). This is the documented noise stream referenced by smoothgrad.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - rng_.uniform();  // (0,1], keeps log finite
    double u2 = rng_.uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

 private:
  SplitMix64 rng_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Fisher-Yates with SplitMix64 indices; deterministic per seed.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

// FNV-1a 64-bit, used as the trailing checksum in checkpoint files and as
// the parameter checksum in train logs.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// Little-endian scalar append/read over byte buffers.
inline void put_u8(std::vector<std::uint8_t>& buf, std::uint8_t v) { buf.push_back(v); }

inline void put_u16le(std::vector<std::uint8_t>& buf, std::uint16_t v) {
  buf.push_back(static_cast<std::uint8_t>(v & 0xff));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32le(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64le(std::vector<std::uint8_t>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32le(std::vector<std::uint8_t>& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32le(buf, bits);
}

inline std::uint16_t get_u16le(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t get_u64le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline float get_f32le(const std::uint8_t* p) {
  std::uint32_t bits = get_u32le(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Tasks must be
// independent; output determinism is the caller's contract (each i writes
// only its own slot).
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::atomic<std::size_t> cursor{0};
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex err_mu;
  for (std::size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = cursor.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
          failed.store(true);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace pssl
