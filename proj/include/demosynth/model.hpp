#pragma once

// Encoder-decoder transformer over visual-token sources and program-token
// targets. Pre-norm residual blocks with scale-only RMS layer norm, no biases,
// ReLU feed-forward, learned absolute positions. Forward and backward passes
// are written out by hand and templated on the scalar type so the same code
// runs in float (training) and double (gradient checks).

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "demosynth/kernels.hpp"

namespace demosynth::model {

inline constexpr const char* kPositionalScheme = "learned-absolute";

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_blocks = 2;
  int n_dec_blocks = 2;
  int d_ff = 256;
  double dropout = 0.1;
  int max_src_len = 526;
  int max_tgt_len = 64;
  int src_vocab = 4 + (1 << 12);
  int tgt_vocab = 35;
  std::string positional = kPositionalScheme;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  // Matrices get weight decay; norm gains and embeddings do not.
  bool decay = false;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Offsets of every tensor inside the flat parameter vector.
class ParamLayout {
 public:
  struct Attention {
    std::size_t q, k, v, o;
  };
  struct EncBlock {
    std::size_t attn_norm;
    Attention attn;
    std::size_t ff_norm, ff_in, ff_out;
  };
  struct DecBlock {
    std::size_t self_norm;
    Attention self;
    std::size_t cross_norm;
    Attention cross;
    std::size_t ff_norm, ff_in, ff_out;
  };

  explicit ParamLayout(const ModelConfig& config);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t size() const { return size_; }
  // Throws RangeError for unknown names.
  const TensorInfo& find(std::string_view name) const;

  std::size_t src_embed = 0, src_pos = 0, tgt_embed = 0, tgt_pos = 0;
  std::vector<EncBlock> enc;
  std::size_t enc_final = 0;
  std::vector<DecBlock> dec;
  std::size_t dec_final = 0, out_proj = 0;

 private:
  std::size_t add(const std::string& name, int rows, int cols, bool decay);
  std::vector<TensorInfo> tensors_;
  std::size_t size_ = 0;
};

template <class T>
struct Params {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> data;

  explicit Params(const ModelConfig& c)
      : config(c), layout(c), data(layout.size(), T(0)) {}

  T* at(std::size_t offset) { return data.data() + offset; }
  const T* at(std::size_t offset) const { return data.data() + offset; }
  bool all_finite() const;
};

// Deterministic initialization from a seed.
template <class T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed);

template <class To, class From>
Params<To> cast_params(const Params<From>& p) {
  Params<To> out(p.config);
  for (std::size_t i = 0; i < p.data.size(); ++i) out.data[i] = static_cast<To>(p.data[i]);
  return out;
}

// One training pair: source visual tokens (with <start>/<sep>/<end>) and the
// full program token sequence (<bos> ... <eos>).
struct Example {
  std::vector<int> src;
  std::vector<int> tgt;
};

// Padded batch. tgt_in is the target without its last token, tgt_out the
// target shifted left (ends with <eos>). Masks are 1 on real tokens.
struct Batch {
  int size = 0;
  int src_len = 0;
  int tgt_len = 0;
  std::vector<int> src;
  std::vector<std::uint8_t> src_mask;
  std::vector<int> tgt_in;
  std::vector<int> tgt_out;
  std::vector<std::uint8_t> tgt_mask;

  // Pads to the longest member; src_len / tgt_len may be forced larger.
  static Batch from_examples(const std::vector<Example>& examples, int min_src_len = 0,
                             int min_tgt_len = 0);
};

// Per-head attention matrices captured during a forward pass.
template <class T>
struct AttentionProbe {
  // [layer][head] -> probabilities, rows = queries, cols = keys.
  std::vector<std::vector<kernels::Mat<T>>> encoder;
};

// Encoder output for one sequence, [src_len, d_model]; rows at masked
// positions are zero and never read.
template <class T>
struct Encoded {
  kernels::Mat<T> memory;
  std::vector<std::uint8_t> mask;
};

// Throws ShapeError on out-of-vocabulary ids or over-long inputs.
template <class T>
std::vector<Encoded<T>> encode(const Params<T>& params, const Batch& batch,
                               AttentionProbe<T>* probe = nullptr);

// Logits [prefix.size(), tgt_vocab] for the next token at every prefix
// position. The prefix must start with <bos>.
template <class T>
kernels::Mat<T> decode_step(const Params<T>& params, const Encoded<T>& source,
                            const std::vector<int>& prefix);

struct ForwardOptions {
  bool train = false;  // enables dropout
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

struct LossStats {
  double loss_sum = 0.0;  // -sum log p(target), 64-bit accumulation
  std::uint64_t tokens = 0;
  std::uint64_t correct = 0;  // argmax == target
  double mean() const { return tokens ? loss_sum / static_cast<double>(tokens) : 0.0; }
};

// Mean cross-entropy over non-pad target positions.
template <class T>
LossStats loss(const Params<T>& params, const Batch& batch, const ForwardOptions& opts = {});

// Gradient of the mean loss with respect to every parameter (same layout as
// params.data). Per-example gradients are reduced in example order, so the
// result does not depend on `jobs`.
template <class T>
LossStats loss_and_grad(const Params<T>& params, const Batch& batch, const ForwardOptions& opts,
                        std::vector<T>& grad, int jobs = 1);

struct DecodeOptions {
  int beam_width = 1;  // 1 = greedy
  int max_len = 0;     // 0 = config.max_tgt_len
};

// Autoregressive decoding from <bos> until <eos> or max_len generated tokens. Returns
// the token sequence starting with <bos>. Beam search ranks finished
// hypotheses by length-normalized log-probability.
template <class T>
std::vector<int> synthesize(const Params<T>& params, const std::vector<int>& src,
                            const DecodeOptions& options = {});

}  // namespace demosynth::model
