// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace flexattn {

#ifdef FLEXATTN_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

inline constexpr real kInf = std::numeric_limits<real>::infinity();

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Non-finite value detected at an operation boundary.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// File contents are syntactically fine but inconsistent (truncation,
// shape/count mismatch against the header).
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnsupportedModeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Deterministic 64-bit generator (splitmix64).  The standard engines are
/// portable but the standard distributions are not, so all sampling goes
/// through the explicit mappings below.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  real uniform(real lo, real hi) {
    return lo + static_cast<real>(unit()) * (hi - lo);
  }

  // Uniform over {0, ..., n-1}.
  int uniform_int(int n) {
    return static_cast<int>(unit() * static_cast<double>(n));
  }

  bool bernoulli(double p) { return unit() < p; }

  // Derives an independent stream, e.g. per corpus-pair index.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
};

}  // namespace flexattn
