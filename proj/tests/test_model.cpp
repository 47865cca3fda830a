#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "demosynth/error.hpp"
#include "demosynth/model.hpp"
#include "demosynth/rng.hpp"

using namespace demosynth;
using namespace demosynth::model;

namespace {

constexpr int kBos = 1;
constexpr int kEos = 2;

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 1;
  c.n_enc_blocks = 1;
  c.n_dec_blocks = 1;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.max_src_len = 8;
  c.max_tgt_len = 6;
  c.src_vocab = 12;
  c.tgt_vocab = 9;
  return c;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_enc_blocks = 2;
  c.n_dec_blocks = 2;
  c.d_ff = 64;
  c.dropout = 0.1;
  c.max_src_len = 40;
  c.max_tgt_len = 16;
  c.src_vocab = 50;
  c.tgt_vocab = 20;
  return c;
}

Example random_example(std::mt19937& rng, const ModelConfig& c, int src_len, int tgt_len) {
  Example e;
  std::uniform_int_distribution<int> s(4, c.src_vocab - 1);
  std::uniform_int_distribution<int> t(3, c.tgt_vocab - 1);
  e.src.push_back(1);
  for (int i = 1; i + 1 < src_len; ++i) e.src.push_back(s(rng));
  e.src.push_back(3);
  e.tgt.push_back(kBos);
  for (int i = 1; i + 1 < tgt_len; ++i) e.tgt.push_back(t(rng));
  e.tgt.push_back(kEos);
  return e;
}

std::vector<Example> random_examples(const ModelConfig& c, unsigned seed, int n) {
  std::mt19937 rng(seed);
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    const int sl = 3 + static_cast<int>(rng() % static_cast<unsigned>(c.max_src_len - 2));
    const int tl = 2 + static_cast<int>(rng() % static_cast<unsigned>(c.max_tgt_len));
    out.push_back(random_example(rng, c, sl, tl));
  }
  return out;
}

// Greedy decoding that recomputes the whole prefix at every step; at most
// max_tgt_len tokens follow <bos>.
template <class T>
std::vector<int> greedy_by_full_recompute(const Params<T>& p, const Encoded<T>& enc) {
  std::vector<int> prefix{kBos};
  while (static_cast<int>(prefix.size()) <= p.config.max_tgt_len) {
    const kernels::Mat<T> logits = decode_step(p, enc, prefix);
    const T* last = logits.row(logits.rows - 1);
    int best = 0;
    for (int j = 1; j < logits.cols; ++j)
      if (last[j] > last[best]) best = j;
    prefix.push_back(best);
    if (best == kEos) break;
  }
  return prefix;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace

TEST(Model, ConfigValidation) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.positional = "rotary";
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, InitIsDeterministic) {
  const auto a = init_params<float>(small_config(), 3);
  const auto b = init_params<float>(small_config(), 3);
  const auto c = init_params<float>(small_config(), 4);
  EXPECT_EQ(a.data, b.data);
  EXPECT_NE(a.data, c.data);
  EXPECT_TRUE(a.all_finite());
  const TensorInfo& g = a.layout.find("enc.0.attn_norm");
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(a.data[g.offset + i], 1.0f);
  EXPECT_THROW(a.layout.find("nope"), RangeError);
}

TEST(Model, UniformLogitsGiveLogV) {
  auto p = init_params<double>(small_config(), 1);
  const TensorInfo& out = p.layout.find("out_proj");
  std::fill(p.data.begin() + static_cast<std::ptrdiff_t>(out.offset),
            p.data.begin() + static_cast<std::ptrdiff_t>(out.offset + out.size()), 0.0);
  const Batch b = Batch::from_examples(random_examples(p.config, 5, 4));
  const LossStats s = loss(p, b);
  EXPECT_NEAR(s.mean(), std::log(20.0), 1e-12);
}

// Oracle: per-position log-softmax of decode_step logits, summed by hand.
TEST(Model, LossMatchesScalarRecomputation) {
  const auto p = init_params<double>(small_config(), 2);
  const auto examples = random_examples(p.config, 6, 5);
  const Batch b = Batch::from_examples(examples);
  const auto encoded = encode(p, b);
  double total = 0.0;
  std::uint64_t n = 0;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const std::vector<int>& tgt = examples[e].tgt;
    const std::vector<int> prefix(tgt.begin(), tgt.end() - 1);
    const kernels::Mat<double> logits = decode_step(p, encoded[e], prefix);
    for (int t = 0; t < logits.rows; ++t) {
      double mx = -1e300;
      for (int j = 0; j < logits.cols; ++j) mx = std::max(mx, logits.at(t, j));
      double z = 0.0;
      for (int j = 0; j < logits.cols; ++j) z += std::exp(logits.at(t, j) - mx);
      total += -(logits.at(t, tgt[static_cast<std::size_t>(t) + 1]) - mx - std::log(z));
      ++n;
    }
  }
  const LossStats s = loss(p, b);
  EXPECT_EQ(s.tokens, n);
  EXPECT_NEAR(s.mean(), total / static_cast<double>(n), 1e-10);
}

TEST(Model, LargeMarginLossGoesToZero) {
  ModelConfig c = tiny_config();
  auto p = init_params<double>(c, 3);
  Example ex;
  ex.src = {1, 5, 6, 3};
  ex.tgt = {kBos, kEos};
  const Batch b = Batch::from_examples({ex});
  const TensorInfo& out = p.layout.find("out_proj");
  ASSERT_EQ(out.rows, c.d_model);
  ASSERT_EQ(out.cols, c.tgt_vocab);
  // Probe the final hidden state: identity projection on the first d columns.
  std::fill(p.data.begin() + static_cast<std::ptrdiff_t>(out.offset),
            p.data.begin() + static_cast<std::ptrdiff_t>(out.offset + out.size()), 0.0);
  for (int i = 0; i < c.d_model; ++i) p.data[out.offset + static_cast<std::size_t>(i) * out.cols + i] = 1.0;
  const auto h = decode_step(p, encode(p, b)[0], {kBos});
  int axis = 0;
  for (int i = 1; i < c.d_model; ++i)
    if (std::abs(h.at(0, i)) > std::abs(h.at(0, axis))) axis = i;
  std::fill(p.data.begin() + static_cast<std::ptrdiff_t>(out.offset),
            p.data.begin() + static_cast<std::ptrdiff_t>(out.offset + out.size()), 0.0);
  double previous = loss(p, b).mean();
  for (double alpha : {10.0, 100.0, 1000.0}) {
    p.data[out.offset + static_cast<std::size_t>(axis) * out.cols + kEos] =
        alpha * (h.at(0, axis) > 0 ? 1.0 : -1.0);
    const double l = loss(p, b).mean();
    EXPECT_LE(l, previous);
    previous = l;
  }
  EXPECT_LT(previous, std::log(static_cast<double>(c.tgt_vocab)));
  EXPECT_LT(previous, 1e-12);
}

TEST(Model, GradientMatchesFiniteDifferences) {
  const ModelConfig c = tiny_config();
  auto p = init_params<double>(c, 11);
  // Non-trivial norm gains so their gradients are exercised away from 1.
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (const TensorInfo& t : p.layout.tensors())
    if (t.name.find("norm") != std::string::npos)
      for (std::size_t i = 0; i < t.size(); ++i) p.data[t.offset + i] = u(rng);
  std::vector<Example> ex;
  ex.push_back(random_example(rng, c, 4, 5));
  ex.push_back(random_example(rng, c, 6, 3));
  const Batch b = Batch::from_examples(ex);
  std::vector<double> grad;
  loss_and_grad(p, b, ForwardOptions{}, grad);
  ASSERT_EQ(grad.size(), p.data.size());
  const double h = 1e-6;
  double worst = 0.0;
  for (const TensorInfo& t : p.layout.tensors()) {
    const std::size_t n = std::min<std::size_t>(t.size(), 200);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = t.offset + (t.size() <= 200 ? k : (k * 7919) % t.size());
      const double saved = p.data[i];
      p.data[i] = saved + h;
      const double up = loss(p, b).mean();
      p.data[i] = saved - h;
      const double down = loss(p, b).mean();
      p.data[i] = saved;
      const double fd = (up - down) / (2 * h);
      const double err = rel_err(grad[i], fd);
      worst = std::max(worst, err);
      EXPECT_LE(err, 1e-3) << t.name << "[" << i - t.offset << "] analytic " << grad[i] << " fd " << fd;
    }
  }
  RecordProperty("worst_rel_err", std::to_string(worst));
}

TEST(Model, ZeroOutputProjectionBlocksUpstreamGradients) {
  auto p = init_params<double>(small_config(), 4);
  const TensorInfo& out = p.layout.find("out_proj");
  std::fill(p.data.begin() + static_cast<std::ptrdiff_t>(out.offset),
            p.data.begin() + static_cast<std::ptrdiff_t>(out.offset + out.size()), 0.0);
  std::vector<double> grad;
  loss_and_grad(p, Batch::from_examples(random_examples(p.config, 8, 3)), ForwardOptions{}, grad);
  for (const TensorInfo& t : p.layout.tensors()) {
    if (t.name == "out_proj") continue;
    for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(grad[t.offset + i], 0.0) << t.name;
  }
  bool any = false;
  for (std::size_t i = 0; i < out.size(); ++i) any |= grad[out.offset + i] != 0.0;
  EXPECT_TRUE(any);
}

TEST(Model, PadTargetsDoNotContributeGradient) {
  const auto p = init_params<double>(small_config(), 5);
  auto examples = random_examples(p.config, 9, 3);
  Batch b = Batch::from_examples(examples, 0, p.config.max_tgt_len);
  std::vector<double> g1;
  std::vector<double> g2;
  const LossStats s1 = loss_and_grad(p, b, ForwardOptions{}, g1);
  for (std::size_t i = 0; i < b.tgt_out.size(); ++i)
    if (!b.tgt_mask[i]) {
      b.tgt_out[i] = 7;
      b.tgt_in[i] = 9;
    }
  const LossStats s2 = loss_and_grad(p, b, ForwardOptions{}, g2);
  EXPECT_EQ(s1.loss_sum, s2.loss_sum);
  EXPECT_EQ(g1, g2);
}

TEST(Model, DecoderIsCausal) {
  const auto p = init_params<float>(small_config(), 6);
  const auto examples = random_examples(p.config, 10, 1);
  const auto enc = encode(p, Batch::from_examples(examples));
  const std::vector<int> prefix{kBos, 5, 6, 7, 8, 9};
  const auto base = decode_step(p, enc[0], prefix);
  for (std::size_t t = 1; t < prefix.size(); ++t) {
    std::vector<int> changed = prefix;
    for (std::size_t u = t; u < changed.size(); ++u) changed[u] = 3 + static_cast<int>(u % 5);
    changed[t] = prefix[t] == 4 ? 10 : 4;
    const auto other = decode_step(p, enc[0], changed);
    for (std::size_t r = 0; r < t; ++r)
      for (int j = 0; j < other.cols; ++j)
        ASSERT_EQ(other.at(static_cast<int>(r), j), base.at(static_cast<int>(r), j)) << t << " " << r;
  }
  // Appending a token leaves earlier rows unchanged.
  std::vector<int> longer = prefix;
  longer.push_back(11);
  const auto ext = decode_step(p, enc[0], longer);
  for (int r = 0; r < base.rows; ++r)
    for (int j = 0; j < base.cols; ++j) ASSERT_EQ(ext.at(r, j), base.at(r, j));
}

TEST(Model, PaddingDoesNotChangeOutputs) {
  const auto p = init_params<float>(small_config(), 7);
  const auto examples = random_examples(p.config, 11, 3);
  const Batch tight = Batch::from_examples(examples);
  const Batch padded = Batch::from_examples(examples, p.config.max_src_len, p.config.max_tgt_len - 1);
  EXPECT_EQ(loss(p, tight).loss_sum, loss(p, padded).loss_sum);
  const auto et = encode(p, tight);
  const auto ep = encode(p, padded);
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const std::vector<int> prefix{kBos, 4, 5};
    EXPECT_EQ(decode_step(p, et[e], prefix).data, decode_step(p, ep[e], prefix).data);
    EXPECT_EQ(greedy_by_full_recompute(p, ep[e]), synthesize(p, examples[e].src));
  }
}

TEST(Model, AttentionRowsSumToOne) {
  const auto p = init_params<float>(small_config(), 8);
  const auto examples = random_examples(p.config, 12, 3);
  const Batch b = Batch::from_examples(examples, p.config.max_src_len);
  AttentionProbe<float> probe;
  encode(p, b, &probe);
  ASSERT_EQ(probe.encoder.size(), examples.size() * static_cast<std::size_t>(p.config.n_enc_blocks));
  for (std::size_t li = 0; li < probe.encoder.size(); ++li) {
    const std::size_t e = li / static_cast<std::size_t>(p.config.n_enc_blocks);
    const int valid = static_cast<int>(examples[e].src.size());
    ASSERT_EQ(probe.encoder[li].size(), static_cast<std::size_t>(p.config.n_heads));
    for (const auto& head : probe.encoder[li]) {
      for (int i = 0; i < valid; ++i) {
        double sum = 0.0;
        for (int j = 0; j < head.cols; ++j) {
          if (j >= valid) {
            ASSERT_EQ(head.at(i, j), 0.0f);
          }
          sum += head.at(i, j);
        }
        ASSERT_NEAR(sum, 1.0, 1e-5);
      }
    }
  }
}

TEST(Model, DecoderSoftmaxSumsToOne) {
  const auto p = init_params<float>(small_config(), 9);
  const auto enc = encode(p, Batch::from_examples(random_examples(p.config, 13, 1)));
  const auto logits = decode_step(p, enc[0], {kBos, 4, 5, 6});
  for (int r = 0; r < logits.rows; ++r) {
    double mx = -1e30;
    for (int j = 0; j < logits.cols; ++j) {
      ASSERT_TRUE(std::isfinite(logits.at(r, j)));
      mx = std::max(mx, static_cast<double>(logits.at(r, j)));
    }
    double z = 0.0;
    for (int j = 0; j < logits.cols; ++j) z += std::exp(static_cast<double>(logits.at(r, j)) - mx);
    double sum = 0.0;
    for (int j = 0; j < logits.cols; ++j) sum += std::exp(static_cast<double>(logits.at(r, j)) - mx) / z;
    EXPECT_NEAR(sum, 1.0, 1e-5);
  }
}

TEST(Model, IncrementalDecodingMatchesFullRecompute) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = init_params<float>(small_config(), 20 + seed);
    const auto examples = random_examples(p.config, 30 + static_cast<unsigned>(seed), 4);
    const auto enc = encode(p, Batch::from_examples(examples));
    for (std::size_t e = 0; e < examples.size(); ++e)
      EXPECT_EQ(synthesize(p, examples[e].src), greedy_by_full_recompute(p, enc[e]));
  }
}

TEST(Model, BeamOfOneIsGreedyAndBeamIsWellFormed) {
  const auto p = init_params<float>(small_config(), 10);
  for (const Example& ex : random_examples(p.config, 14, 5)) {
    const auto greedy = synthesize(p, ex.src);
    EXPECT_EQ(synthesize(p, ex.src, {1, 0}), greedy);
    EXPECT_EQ(synthesize(p, ex.src), greedy);
    const auto beam = synthesize(p, ex.src, {4, 0});
    EXPECT_EQ(beam, synthesize(p, ex.src, {4, 0}));
    ASSERT_FALSE(beam.empty());
    EXPECT_EQ(beam.front(), kBos);
    EXPECT_LE(static_cast<int>(beam.size()), p.config.max_tgt_len + 1);
    const auto capped = synthesize(p, ex.src, {3, 3});
    EXPECT_LE(capped.size(), 4u);
  }
}

TEST(Model, GradientIsIndependentOfJobsAndDeterministic) {
  const auto p = init_params<float>(small_config(), 12);
  const Batch b = Batch::from_examples(random_examples(p.config, 15, 6));
  ForwardOptions opts;
  opts.train = true;
  opts.seed = 99;
  opts.step = 4;
  std::vector<float> g1;
  std::vector<float> g3;
  std::vector<float> again;
  const LossStats s1 = loss_and_grad(p, b, opts, g1, 1);
  const LossStats s3 = loss_and_grad(p, b, opts, g3, 3);
  loss_and_grad(p, b, opts, again, 1);
  EXPECT_EQ(s1.loss_sum, s3.loss_sum);
  EXPECT_EQ(g1, g3);
  EXPECT_EQ(g1, again);
  // Dropout masks move with the step.
  opts.step = 5;
  std::vector<float> g5;
  loss_and_grad(p, b, opts, g5, 1);
  EXPECT_NE(g1, g5);
}

TEST(Model, DropoutOffInEvalMode) {
  const auto p = init_params<float>(small_config(), 13);
  const Batch b = Batch::from_examples(random_examples(p.config, 16, 3));
  ForwardOptions eval;
  eval.seed = 1;
  ForwardOptions other;
  other.seed = 2;
  EXPECT_EQ(loss(p, b, eval).loss_sum, loss(p, b, other).loss_sum);
}

TEST(Model, ShapeErrors) {
  const auto p = init_params<float>(small_config(), 14);
  std::vector<int> too_long(static_cast<std::size_t>(p.config.max_src_len) + 1, 5);
  EXPECT_THROW(synthesize(p, too_long), ShapeError);
  EXPECT_THROW(synthesize(p, {1, 999, 3}), ShapeError);
  EXPECT_THROW(Batch::from_examples({Example{{1, 3}, {kBos}}}), ShapeError);
}
