// Copyright 2026 The vgsfod Authors.
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

#pragma once

#include <cstdint>

namespace vgsfod {

// Stream ids keep the random sequences of different consumers independent
// even when they share a seed.
enum class RngStream : std::uint64_t {
  kWorld = 1,
  kImage = 2,
  kSplit = 3,
  kKMeans = 4,
  kSinkhorn = 5,
  kAugment = 6,
  kInit = 7,
  kBatch = 8,
  kShiftNoise = 9,
  kTest = 99,
};

// Counter-based generator: output i is a pure function of (seed, stream, i),
// so results do not depend on platform or standard-library distributions.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream = 0);
  Rng(std::uint64_t seed, RngStream stream, std::uint64_t substream = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  // Standard normal (Box-Muller, no cached second value).
  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace vgsfod
