#include "demosynth/vislang.hpp"

#include <bit>

#include "demosynth/error.hpp"
#include "demosynth/rng.hpp"

namespace demosynth::vislang {

namespace {
constexpr std::uint64_t kPerceptStream = 0x4e4f4953;  // "NOIS"
constexpr std::uint64_t kActionStream = 0x41435449;   // "ACTI"
}  // namespace

Tokenizer::Tokenizer(int q, int m) : q_(q), m_(m) {
  if (q < 1 || m < 2 || q + m > 20) throw RangeError("tokenizer needs q >= 1, m >= 2, q + m <= 20");
}

VisualToken Tokenizer::tokenize(const world::PerceptVector& percepts, int action) const {
  if (percepts.size() != q_)
    throw RangeError("percept vector has length " + std::to_string(percepts.size()) +
                     ", expected " + std::to_string(q_));
  if (action < 0 || action >= m_) throw RangeError("action index out of range");
  std::uint32_t psi = 0;
  for (int n = 0; n < q_; ++n)
    if (percepts[n]) psi += 1U << n;
  psi += 1U << (q_ + action);
  return VisualToken{kPayloadOffset + psi};
}

std::pair<world::PerceptVector, int> Tokenizer::detokenize(VisualToken token) const {
  if (token.id < kPayloadOffset || token.id >= vocab_size())
    throw RangeError("token id " + std::to_string(token.id) + " is not a payload token");
  const std::uint32_t psi = token.id - kPayloadOffset;
  const std::uint32_t action_bits = psi >> q_;
  if (std::popcount(action_bits) != 1)
    throw MalformedToken("token id " + std::to_string(token.id) + " has " +
                         std::to_string(std::popcount(action_bits)) + " action bits set");
  const std::uint32_t percept_mask = (1U << q_) - 1U;
  return {world::PerceptVector(q_, psi & percept_mask), std::countr_zero(action_bits)};
}

VisualSequence Tokenizer::assemble(const std::vector<exec::Demonstration>& demos) const {
  VisualSequence seq;
  seq.tokens.push_back({kStart});
  for (std::size_t i = 0; i < demos.size(); ++i) {
    if (demos[i].steps.empty()) throw RangeError("cannot assemble an empty demonstration");
    if (i > 0) seq.tokens.push_back({kSep});
    const std::size_t begin = seq.tokens.size();
    for (const exec::Step& s : demos[i].steps) seq.tokens.push_back(tokenize(s.percepts, s.action));
    seq.demo_boundaries.emplace_back(begin, seq.tokens.size());
  }
  seq.tokens.push_back({kEnd});
  return seq;
}

std::vector<exec::Demonstration> inject_noise(const std::vector<exec::Demonstration>& demos,
                                              const NoiseSpec& spec, int m) {
  if (!(spec.epsilon >= 0.0 && spec.epsilon <= 1.0) ||
      !(spec.action_epsilon >= 0.0 && spec.action_epsilon <= 1.0))
    throw RangeError("noise rates must lie in [0, 1]");
  std::vector<exec::Demonstration> out = demos;
  if (spec.epsilon == 0.0 && spec.action_epsilon == 0.0) return out;
  for (std::size_t d = 0; d < out.size(); ++d) {
    for (std::size_t t = 0; t < out[d].steps.size(); ++t) {
      exec::Step& s = out[d].steps[t];
      for (int b = 0; b < s.percepts.size(); ++b) {
        const double u = to_unit(counter_hash({spec.seed, kPerceptStream, d, t,
                                               static_cast<std::uint64_t>(b)}));
        if (u < spec.epsilon) s.percepts.set(b, !s.percepts[b]);
      }
      if (spec.action_epsilon > 0.0) {
        const std::uint64_t h = counter_hash({spec.seed, kActionStream, d, t});
        if (to_unit(h) < spec.action_epsilon) {
          const int shift = 1 + static_cast<int>(bounded(mix64(h), static_cast<std::uint64_t>(m - 1)));
          s.action = (s.action + shift) % m;
        }
      }
    }
  }
  return out;
}

exec::DemoSet inject_noise(const exec::DemoSet& set, const NoiseSpec& spec, int m) {
  exec::DemoSet out;
  out.program = set.program;
  out.coverage = set.coverage;
  out.demos = inject_noise(set.demos, spec, m);
  return out;
}

}  // namespace demosynth::vislang
