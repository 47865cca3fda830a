#pragma once

// Visual language: each (percepts, action) step becomes one integer token.
//
//   pa  = concat(percepts[0..q), one_hot_m(action))
//   psi = sum_{n=0}^{q+m-1} pa[n] * 2^n        (bit n of psi is pa[n])
//   id  = 4 + psi
//
// Ids 0..3 are <pad>, <start>, <sep>, <end>. A demo set is rendered as
// <start> demo_1 <sep> demo_2 ... <sep> demo_k <end>.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "demosynth/exec.hpp"
#include "demosynth/world.hpp"

namespace demosynth::vislang {

inline constexpr std::uint32_t kPad = 0, kStart = 1, kSep = 2, kEnd = 3, kPayloadOffset = 4;

// Identifies the id convention above in manifests and checkpoints.
inline constexpr const char* kConventionId = "vislang-le-v1";

struct VisualToken {
  std::uint32_t id = 0;
  bool operator==(const VisualToken&) const = default;
};

struct VisualSequence {
  std::vector<VisualToken> tokens;
  // Half-open [begin, end) token index range of each demo's payload.
  std::vector<std::pair<std::size_t, std::size_t>> demo_boundaries;
};

class Tokenizer {
 public:
  // Throws RangeError unless q >= 1, m >= 2 and q + m <= 20.
  Tokenizer(int q, int m);

  int q() const { return q_; }
  int m() const { return m_; }
  std::uint32_t vocab_size() const { return kPayloadOffset + (1U << (q_ + m_)); }

  // Throws RangeError on bad lengths / indices.
  VisualToken tokenize(const world::PerceptVector& percepts, int action) const;
  // Throws MalformedToken when the action bits are not one-hot, RangeError for
  // special or out-of-vocabulary ids.
  std::pair<world::PerceptVector, int> detokenize(VisualToken token) const;

  // Throws RangeError on an empty demo.
  VisualSequence assemble(const std::vector<exec::Demonstration>& demos) const;

 private:
  int q_;
  int m_;
};

struct NoiseSpec {
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  // Off by default; replaces an action with a different uniformly drawn one.
  double action_epsilon = 0.0;

  bool operator==(const NoiseSpec&) const = default;
};

// Flips each percept bit independently with probability epsilon. The draw for
// a bit is keyed by (seed, demo index, step index, bit index).
std::vector<exec::Demonstration> inject_noise(const std::vector<exec::Demonstration>& demos,
                                              const NoiseSpec& spec, int m);
exec::DemoSet inject_noise(const exec::DemoSet& set, const NoiseSpec& spec, int m);

}  // namespace demosynth::vislang
