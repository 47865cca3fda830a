#include "demosynth/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "demosynth/error.hpp"
#include "demosynth/rng.hpp"

namespace demosynth::model {

using kernels::gemm_nn;
using kernels::gemm_nt;
using kernels::gemm_tn;
using kernels::Mat;

namespace {

constexpr double kNormEps = 1e-6;
constexpr int kBos = 1;
constexpr int kEos = 2;

// Dropout sites; layer sites are offset by 8 per layer.
enum : std::uint64_t {
  kSiteSrcEmbed = 1,
  kSiteTgtEmbed = 2,
  kSiteEncBase = 16,
  kSiteDecBase = 1024,
};

template <class T>
struct AttnCache {
  Mat<T> q, k, v, ctx;
  std::vector<Mat<T>> p;
};

template <class T>
struct EncLayerCache {
  Mat<T> x_in, n1;
  std::vector<T> inv1;
  AttnCache<T> attn;
  Mat<T> drop1;
  Mat<T> x_mid, n2;
  std::vector<T> inv2;
  Mat<T> h_pre, h;
  Mat<T> drop2;
};

template <class T>
struct DecLayerCache {
  Mat<T> y_in, n1;
  std::vector<T> inv1;
  AttnCache<T> self;
  Mat<T> drop1;
  Mat<T> y1, n2;
  std::vector<T> inv2;
  AttnCache<T> cross;
  Mat<T> drop2;
  Mat<T> y2, n3;
  std::vector<T> inv3;
  Mat<T> h_pre, h;
  Mat<T> drop3;
};

// Forward state of one sequence pair, kept for the backward pass.
template <class T>
struct Workspace {
  std::vector<int> src_tok, src_pos;
  Mat<T> src_drop;
  std::vector<EncLayerCache<T>> enc;
  Mat<T> enc_pre, memory;
  std::vector<T> enc_inv;

  std::vector<int> tgt_tok;
  Mat<T> tgt_drop;
  std::vector<DecLayerCache<T>> dec;
  Mat<T> dec_pre, z;
  std::vector<T> dec_inv;
  Mat<T> logits;

  std::vector<T> scratch;
};

struct Dropout {
  bool active = false;
  double rate = 0.0;
  std::uint64_t seed = 0, step = 0, example = 0;

  // Fills mask with 0 or 1/(1-rate), keyed by (seed, step, example, site, element).
  template <class T>
  void make(Mat<T>& mask, int rows, int cols, std::uint64_t site) const {
    mask.resize(rows, cols);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
      const double u = to_unit(counter_hash({seed, step, example, site, i}));
      mask.data[i] = u < rate ? T(0) : keep;
    }
  }
};

template <class T>
void rms_forward(const Mat<T>& x, const T* g, Mat<T>& y, std::vector<T>& inv) {
  const int d = x.cols;
  y.resize(x.rows, d);
  inv.resize(static_cast<std::size_t>(x.rows));
  for (int i = 0; i < x.rows; ++i) {
    const T* xr = x.row(i);
    T ss = 0;
    for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T r = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(kNormEps));
    inv[static_cast<std::size_t>(i)] = r;
    T* yr = y.row(i);
    for (int j = 0; j < d; ++j) yr[j] = xr[j] * r * g[j];
  }
}

// dx and dg accumulate.
template <class T>
void rms_backward(const Mat<T>& x, const T* g, const std::vector<T>& inv, const Mat<T>& dy,
                  Mat<T>& dx, T* dg) {
  const int d = x.cols;
  for (int i = 0; i < x.rows; ++i) {
    const T* xr = x.row(i);
    const T* dyr = dy.row(i);
    T* dxr = dx.row(i);
    const T r = inv[static_cast<std::size_t>(i)];
    T dot = 0;
    for (int j = 0; j < d; ++j) dot += dyr[j] * g[j] * xr[j];
    const T coef = r * r * r * dot / static_cast<T>(d);
    for (int j = 0; j < d; ++j) {
      dg[j] += dyr[j] * xr[j] * r;
      dxr[j] += r * g[j] * dyr[j] - xr[j] * coef;
    }
  }
}

template <class T>
void linear(const Mat<T>& x, const T* w, int out, Mat<T>& y) {
  y.resize(x.rows, out);
  gemm_nn(x.rows, out, x.cols, x.data.data(), x.cols, w, out, y.data.data(), out, false);
}

// y = x + branch (optionally masked), written in place into `x`.
template <class T>
void residual_add(Mat<T>& x, const Mat<T>& branch, const Mat<T>* mask) {
  if (mask) {
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += branch.data[i] * mask->data[i];
  } else {
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += branch.data[i];
  }
}

template <class T>
void attention_forward(const Params<T>& P, const ParamLayout::Attention& w, const Mat<T>& xq,
                       const Mat<T>& xkv, bool causal, AttnCache<T>& c, Mat<T>& out,
                       std::vector<T>& scratch) {
  const int d = P.config.d_model;
  const int H = P.config.n_heads;
  const int dh = d / H;
  const int Lq = xq.rows;
  const int Lk = xkv.rows;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  linear(xq, P.at(w.q), d, c.q);
  linear(xkv, P.at(w.k), d, c.k);
  linear(xkv, P.at(w.v), d, c.v);
  c.ctx.resize(Lq, d);
  c.p.resize(static_cast<std::size_t>(H));
  std::vector<int> valid(static_cast<std::size_t>(Lq), Lk);
  if (causal)
    for (int i = 0; i < Lq; ++i) valid[static_cast<std::size_t>(i)] = std::min(i + 1, Lk);
  for (int h = 0; h < H; ++h) {
    Mat<T>& p = c.p[static_cast<std::size_t>(h)];
    p.resize(Lq, Lk);
    gemm_nt(Lq, Lk, dh, c.q.data.data() + h * dh, d, c.k.data.data() + h * dh, d, p.data.data(),
            Lk, false, scratch);
    for (T& s : p.data) s *= scale;
    kernels::softmax_rows(p, valid.data());
    gemm_nn(Lq, dh, Lk, p.data.data(), Lk, c.v.data.data() + h * dh, d,
            c.ctx.data.data() + h * dh, d, false);
  }
  linear(c.ctx, P.at(w.o), d, out);
}

// dxq and dxkv accumulate (they may alias for self-attention).
template <class T>
void attention_backward(const Params<T>& P, std::vector<T>& G, const ParamLayout::Attention& w,
                        const Mat<T>& xq, const Mat<T>& xkv, const AttnCache<T>& c,
                        const Mat<T>& dout, Mat<T>& dxq, Mat<T>& dxkv, std::vector<T>& scratch) {
  const int d = P.config.d_model;
  const int H = P.config.n_heads;
  const int dh = d / H;
  const int Lq = xq.rows;
  const int Lk = xkv.rows;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> dctx(Lq, d);
  gemm_nt(Lq, d, d, dout.data.data(), d, P.at(w.o), d, dctx.data.data(), d, false, scratch);
  gemm_tn(d, d, Lq, c.ctx.data.data(), d, dout.data.data(), d, G.data() + w.o, d, true);

  Mat<T> dq(Lq, d), dk(Lk, d), dv(Lk, d), dp(Lq, Lk);
  for (int h = 0; h < H; ++h) {
    const Mat<T>& p = c.p[static_cast<std::size_t>(h)];
    gemm_nt(Lq, Lk, dh, dctx.data.data() + h * dh, d, c.v.data.data() + h * dh, d,
            dp.data.data(), Lk, false, scratch);
    gemm_tn(Lk, dh, Lq, p.data.data(), Lk, dctx.data.data() + h * dh, d, dv.data.data() + h * dh,
            d, true);
    for (int i = 0; i < Lq; ++i) {
      const T* pr = p.row(i);
      T* dpr = dp.row(i);
      T rowdot = 0;
      for (int j = 0; j < Lk; ++j) rowdot += pr[j] * dpr[j];
      for (int j = 0; j < Lk; ++j) dpr[j] = pr[j] * (dpr[j] - rowdot) * scale;
    }
    gemm_nn(Lq, dh, Lk, dp.data.data(), Lk, c.k.data.data() + h * dh, d, dq.data.data() + h * dh,
            d, false);
    gemm_tn(Lk, dh, Lq, dp.data.data(), Lk, c.q.data.data() + h * dh, d, dk.data.data() + h * dh,
            d, true);
  }
  gemm_nt(Lq, d, d, dq.data.data(), d, P.at(w.q), d, dxq.data.data(), d, true, scratch);
  gemm_tn(d, d, Lq, xq.data.data(), d, dq.data.data(), d, G.data() + w.q, d, true);
  gemm_nt(Lk, d, d, dk.data.data(), d, P.at(w.k), d, dxkv.data.data(), d, true, scratch);
  gemm_tn(d, d, Lk, xkv.data.data(), d, dk.data.data(), d, G.data() + w.k, d, true);
  gemm_nt(Lk, d, d, dv.data.data(), d, P.at(w.v), d, dxkv.data.data(), d, true, scratch);
  gemm_tn(d, d, Lk, xkv.data.data(), d, dv.data.data(), d, G.data() + w.v, d, true);
}

// x_out = x + FF(norm(x)) with caches; `x` is updated in place.
template <class T>
void ff_forward(const Params<T>& P, std::size_t w_in, std::size_t w_out, const Mat<T>& n,
                Mat<T>& h_pre, Mat<T>& h, Mat<T>& f) {
  const int d = P.config.d_model;
  const int F = P.config.d_ff;
  linear(n, P.at(w_in), F, h_pre);
  h = h_pre;
  for (T& v : h.data) v = v > T(0) ? v : T(0);
  linear(h, P.at(w_out), d, f);
}

// dn is overwritten.
template <class T>
void ff_backward(const Params<T>& P, std::vector<T>& G, std::size_t w_in, std::size_t w_out,
                 const Mat<T>& n, const Mat<T>& h_pre, const Mat<T>& h, const Mat<T>& df,
                 Mat<T>& dn, std::vector<T>& scratch) {
  const int d = P.config.d_model;
  const int F = P.config.d_ff;
  const int L = n.rows;
  Mat<T> dh(L, F);
  gemm_nt(L, F, d, df.data.data(), d, P.at(w_out), d, dh.data.data(), F, false, scratch);
  gemm_tn(F, d, L, h.data.data(), F, df.data.data(), d, G.data() + w_out, d, true);
  for (std::size_t i = 0; i < dh.data.size(); ++i)
    if (!(h_pre.data[i] > T(0))) dh.data[i] = T(0);
  gemm_tn(d, F, L, n.data.data(), d, dh.data.data(), F, G.data() + w_in, F, true);
  dn.resize(L, d);
  gemm_nt(L, d, F, dh.data.data(), F, P.at(w_in), F, dn.data.data(), d, false, scratch);
}

template <class T>
void masked_copy(const Mat<T>& src, const Mat<T>* mask, Mat<T>& dst) {
  dst = src;
  if (mask)
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] *= mask->data[i];
}

template <class T>
void encoder_forward(const Params<T>& P, Workspace<T>& ws, const Dropout& drop,
                     AttentionProbe<T>* probe) {
  const ModelConfig& cfg = P.config;
  const ParamLayout& L = P.layout;
  const int d = cfg.d_model;
  const int n = static_cast<int>(ws.src_tok.size());
  Mat<T> x(n, d);
  for (int i = 0; i < n; ++i) {
    const T* e = P.at(L.src_embed) + static_cast<std::size_t>(ws.src_tok[static_cast<std::size_t>(i)]) * d;
    const T* p = P.at(L.src_pos) + static_cast<std::size_t>(ws.src_pos[static_cast<std::size_t>(i)]) * d;
    T* xr = x.row(i);
    for (int j = 0; j < d; ++j) xr[j] = e[j] + p[j];
  }
  if (drop.active) {
    drop.make(ws.src_drop, n, d, kSiteSrcEmbed);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] *= ws.src_drop.data[i];
  }
  ws.enc.resize(static_cast<std::size_t>(cfg.n_enc_blocks));
  Mat<T> branch;
  for (int l = 0; l < cfg.n_enc_blocks; ++l) {
    EncLayerCache<T>& c = ws.enc[static_cast<std::size_t>(l)];
    const ParamLayout::EncBlock& b = L.enc[static_cast<std::size_t>(l)];
    const std::uint64_t site = kSiteEncBase + 8 * static_cast<std::uint64_t>(l);
    c.x_in = x;
    rms_forward(x, P.at(b.attn_norm), c.n1, c.inv1);
    attention_forward(P, b.attn, c.n1, c.n1, false, c.attn, branch, ws.scratch);
    if (probe) probe->encoder.push_back(c.attn.p);
    if (drop.active) drop.make(c.drop1, n, d, site + 0);
    residual_add(x, branch, drop.active ? &c.drop1 : nullptr);
    c.x_mid = x;
    rms_forward(x, P.at(b.ff_norm), c.n2, c.inv2);
    ff_forward(P, b.ff_in, b.ff_out, c.n2, c.h_pre, c.h, branch);
    if (drop.active) drop.make(c.drop2, n, d, site + 1);
    residual_add(x, branch, drop.active ? &c.drop2 : nullptr);
  }
  ws.enc_pre = std::move(x);
  rms_forward(ws.enc_pre, P.at(L.enc_final), ws.memory, ws.enc_inv);
}

// Decoder over ws.tgt_tok against ws.memory; leaves logits in ws.logits.
template <class T>
void decoder_forward(const Params<T>& P, Workspace<T>& ws, const Dropout& drop) {
  const ModelConfig& cfg = P.config;
  const ParamLayout& L = P.layout;
  const int d = cfg.d_model;
  const int n = static_cast<int>(ws.tgt_tok.size());
  Mat<T> y(n, d);
  for (int t = 0; t < n; ++t) {
    const T* e = P.at(L.tgt_embed) + static_cast<std::size_t>(ws.tgt_tok[static_cast<std::size_t>(t)]) * d;
    const T* p = P.at(L.tgt_pos) + static_cast<std::size_t>(t) * d;
    T* yr = y.row(t);
    for (int j = 0; j < d; ++j) yr[j] = e[j] + p[j];
  }
  if (drop.active) {
    drop.make(ws.tgt_drop, n, d, kSiteTgtEmbed);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] *= ws.tgt_drop.data[i];
  }
  ws.dec.resize(static_cast<std::size_t>(cfg.n_dec_blocks));
  Mat<T> branch;
  for (int l = 0; l < cfg.n_dec_blocks; ++l) {
    DecLayerCache<T>& c = ws.dec[static_cast<std::size_t>(l)];
    const ParamLayout::DecBlock& b = L.dec[static_cast<std::size_t>(l)];
    const std::uint64_t site = kSiteDecBase + 8 * static_cast<std::uint64_t>(l);
    c.y_in = y;
    rms_forward(y, P.at(b.self_norm), c.n1, c.inv1);
    attention_forward(P, b.self, c.n1, c.n1, true, c.self, branch, ws.scratch);
    if (drop.active) drop.make(c.drop1, n, d, site + 0);
    residual_add(y, branch, drop.active ? &c.drop1 : nullptr);
    c.y1 = y;
    rms_forward(y, P.at(b.cross_norm), c.n2, c.inv2);
    attention_forward(P, b.cross, c.n2, ws.memory, false, c.cross, branch, ws.scratch);
    if (drop.active) drop.make(c.drop2, n, d, site + 1);
    residual_add(y, branch, drop.active ? &c.drop2 : nullptr);
    c.y2 = y;
    rms_forward(y, P.at(b.ff_norm), c.n3, c.inv3);
    ff_forward(P, b.ff_in, b.ff_out, c.n3, c.h_pre, c.h, branch);
    if (drop.active) drop.make(c.drop3, n, d, site + 2);
    residual_add(y, branch, drop.active ? &c.drop3 : nullptr);
  }
  ws.dec_pre = std::move(y);
  rms_forward(ws.dec_pre, P.at(L.dec_final), ws.z, ws.dec_inv);
  linear(ws.z, P.at(L.out_proj), cfg.tgt_vocab, ws.logits);
}

// Cross-entropy of ws.logits against targets; when dlogits is non-null it
// receives (softmax - onehot) * scale.
template <class T>
LossStats score_logits(const Mat<T>& logits, const std::vector<int>& targets, T scale,
                       Mat<T>* dlogits) {
  LossStats s;
  const int V = logits.cols;
  if (dlogits) dlogits->resize(logits.rows, V);
  for (int t = 0; t < logits.rows; ++t) {
    const T* l = logits.row(t);
    const int target = targets[static_cast<std::size_t>(t)];
    int arg = 0;
    for (int v = 1; v < V; ++v)
      if (l[v] > l[arg]) arg = v;
    double sum = 0.0;
    const double mx = static_cast<double>(l[arg]);
    for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(l[v]) - mx);
    const double lse = mx + std::log(sum);
    s.loss_sum += lse - static_cast<double>(l[target]);
    s.tokens += 1;
    s.correct += arg == target ? 1 : 0;
    if (dlogits) {
      T* g = dlogits->row(t);
      for (int v = 0; v < V; ++v)
        g[v] = static_cast<T>(std::exp(static_cast<double>(l[v]) - lse)) * scale;
      g[target] -= scale;
    }
  }
  return s;
}

template <class T>
void backward(const Params<T>& P, Workspace<T>& ws, const Dropout& drop, const Mat<T>& dlogits,
              std::vector<T>& G) {
  const ModelConfig& cfg = P.config;
  const ParamLayout& L = P.layout;
  const int d = cfg.d_model;
  const int V = cfg.tgt_vocab;
  const int nt = static_cast<int>(ws.tgt_tok.size());
  const int ns = static_cast<int>(ws.src_tok.size());
  std::vector<T>& scratch = ws.scratch;

  Mat<T> dz(nt, d);
  gemm_tn(d, V, nt, ws.z.data.data(), d, dlogits.data.data(), V, G.data() + L.out_proj, V, true);
  gemm_nt(nt, d, V, dlogits.data.data(), V, P.at(L.out_proj), V, dz.data.data(), d, false, scratch);
  Mat<T> dy(nt, d);
  rms_backward(ws.dec_pre, P.at(L.dec_final), ws.dec_inv, dz, dy, G.data() + L.dec_final);

  Mat<T> dmem(ns, d);
  Mat<T> dbranch, dn;
  for (int l = cfg.n_dec_blocks - 1; l >= 0; --l) {
    const DecLayerCache<T>& c = ws.dec[static_cast<std::size_t>(l)];
    const ParamLayout::DecBlock& b = L.dec[static_cast<std::size_t>(l)];
    // feed-forward branch
    masked_copy(dy, drop.active ? &c.drop3 : nullptr, dbranch);
    ff_backward(P, G, b.ff_in, b.ff_out, c.n3, c.h_pre, c.h, dbranch, dn, scratch);
    rms_backward(c.y2, P.at(b.ff_norm), c.inv3, dn, dy, G.data() + b.ff_norm);
    // cross-attention branch
    masked_copy(dy, drop.active ? &c.drop2 : nullptr, dbranch);
    dn.resize(nt, d);
    attention_backward(P, G, b.cross, c.n2, ws.memory, c.cross, dbranch, dn, dmem, scratch);
    rms_backward(c.y1, P.at(b.cross_norm), c.inv2, dn, dy, G.data() + b.cross_norm);
    // self-attention branch
    masked_copy(dy, drop.active ? &c.drop1 : nullptr, dbranch);
    dn.resize(nt, d);
    attention_backward(P, G, b.self, c.n1, c.n1, c.self, dbranch, dn, dn, scratch);
    rms_backward(c.y_in, P.at(b.self_norm), c.inv1, dn, dy, G.data() + b.self_norm);
  }
  if (drop.active)
    for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= ws.tgt_drop.data[i];
  for (int t = 0; t < nt; ++t) {
    T* ge = G.data() + L.tgt_embed + static_cast<std::size_t>(ws.tgt_tok[static_cast<std::size_t>(t)]) * d;
    T* gp = G.data() + L.tgt_pos + static_cast<std::size_t>(t) * d;
    const T* r = dy.row(t);
    for (int j = 0; j < d; ++j) {
      ge[j] += r[j];
      gp[j] += r[j];
    }
  }

  Mat<T> dx(ns, d);
  rms_backward(ws.enc_pre, P.at(L.enc_final), ws.enc_inv, dmem, dx, G.data() + L.enc_final);
  for (int l = cfg.n_enc_blocks - 1; l >= 0; --l) {
    const EncLayerCache<T>& c = ws.enc[static_cast<std::size_t>(l)];
    const ParamLayout::EncBlock& b = L.enc[static_cast<std::size_t>(l)];
    masked_copy(dx, drop.active ? &c.drop2 : nullptr, dbranch);
    ff_backward(P, G, b.ff_in, b.ff_out, c.n2, c.h_pre, c.h, dbranch, dn, scratch);
    rms_backward(c.x_mid, P.at(b.ff_norm), c.inv2, dn, dx, G.data() + b.ff_norm);
    masked_copy(dx, drop.active ? &c.drop1 : nullptr, dbranch);
    dn.resize(ns, d);
    attention_backward(P, G, b.attn, c.n1, c.n1, c.attn, dbranch, dn, dn, scratch);
    rms_backward(c.x_in, P.at(b.attn_norm), c.inv1, dn, dx, G.data() + b.attn_norm);
  }
  if (drop.active)
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= ws.src_drop.data[i];
  for (int i = 0; i < ns; ++i) {
    T* ge = G.data() + L.src_embed + static_cast<std::size_t>(ws.src_tok[static_cast<std::size_t>(i)]) * d;
    T* gp = G.data() + L.src_pos + static_cast<std::size_t>(ws.src_pos[static_cast<std::size_t>(i)]) * d;
    const T* r = dx.row(i);
    for (int j = 0; j < d; ++j) {
      ge[j] += r[j];
      gp[j] += r[j];
    }
  }
}

void check_batch(const ModelConfig& cfg, const Batch& b) {
  const std::size_t bs = static_cast<std::size_t>(b.size);
  if (b.src.size() != bs * static_cast<std::size_t>(b.src_len) || b.src_mask.size() != b.src.size() ||
      b.tgt_in.size() != bs * static_cast<std::size_t>(b.tgt_len) || b.tgt_out.size() != b.tgt_in.size() ||
      b.tgt_mask.size() != b.tgt_in.size())
    throw ShapeError("batch arrays do not match declared shape");
  if (b.src_len > cfg.max_src_len)
    throw ShapeError("source length " + std::to_string(b.src_len) + " exceeds max_src_len " +
                     std::to_string(cfg.max_src_len));
  if (b.tgt_len > cfg.max_tgt_len)
    throw ShapeError("target length " + std::to_string(b.tgt_len) + " exceeds max_tgt_len " +
                     std::to_string(cfg.max_tgt_len));
  for (std::size_t i = 0; i < b.src.size(); ++i)
    if (b.src_mask[i] && (b.src[i] < 0 || b.src[i] >= cfg.src_vocab))
      throw ShapeError("source token id " + std::to_string(b.src[i]) + " out of vocabulary");
  for (std::size_t i = 0; i < b.tgt_in.size(); ++i)
    if (b.tgt_mask[i] && (b.tgt_in[i] < 0 || b.tgt_in[i] >= cfg.tgt_vocab || b.tgt_out[i] < 0 ||
                          b.tgt_out[i] >= cfg.tgt_vocab))
      throw ShapeError("target token id out of vocabulary");
}

// Gathers the unmasked source tokens of example e.
void gather_source(const Batch& b, int e, std::vector<int>& tok, std::vector<int>& pos) {
  tok.clear();
  pos.clear();
  for (int i = 0; i < b.src_len; ++i) {
    const std::size_t at = static_cast<std::size_t>(e) * b.src_len + i;
    if (b.src_mask[at]) {
      tok.push_back(b.src[at]);
      pos.push_back(i);
    }
  }
}

// Target prefix of example e; the mask must be a prefix.
void gather_target(const Batch& b, int e, std::vector<int>& in, std::vector<int>& out) {
  in.clear();
  out.clear();
  bool ended = false;
  for (int t = 0; t < b.tgt_len; ++t) {
    const std::size_t at = static_cast<std::size_t>(e) * b.tgt_len + t;
    if (b.tgt_mask[at]) {
      if (ended) throw ShapeError("target mask must be a prefix");
      in.push_back(b.tgt_in[at]);
      out.push_back(b.tgt_out[at]);
    } else {
      ended = true;
    }
  }
}

template <class T>
LossStats run_batch(const Params<T>& P, const Batch& batch, const ForwardOptions& opts,
                    std::vector<T>* grad, int jobs) {
  check_batch(P.config, batch);
  std::uint64_t total_tokens = 0;
  for (std::uint8_t m : batch.tgt_mask) total_tokens += m;
  if (grad) grad->assign(P.layout.size(), T(0));
  if (total_tokens == 0) return {};
  const T scale = T(1) / static_cast<T>(total_tokens);
  const int B = batch.size;
  jobs = std::max(1, std::min(jobs, B));

  std::vector<LossStats> stats(static_cast<std::size_t>(B));
  // Per-example gradient buffers: one shared buffer when sequential,
  // one per example otherwise. The reduction order is example order either way.
  std::vector<std::vector<T>> buffers(grad ? (jobs == 1 ? 1 : static_cast<std::size_t>(B)) : 0);

  auto process = [&](int e, std::vector<T>* g) {
    Workspace<T> ws;
    gather_source(batch, e, ws.src_tok, ws.src_pos);
    std::vector<int> targets;
    gather_target(batch, e, ws.tgt_tok, targets);
    if (ws.src_tok.empty() || ws.tgt_tok.empty()) return;
    Dropout drop;
    drop.active = opts.train && P.config.dropout > 0.0;
    drop.rate = P.config.dropout;
    drop.seed = opts.seed;
    drop.step = opts.step;
    drop.example = static_cast<std::uint64_t>(e);
    encoder_forward(P, ws, drop, static_cast<AttentionProbe<T>*>(nullptr));
    decoder_forward(P, ws, drop);
    Mat<T> dlogits;
    stats[static_cast<std::size_t>(e)] = score_logits(ws.logits, targets, scale, g ? &dlogits : nullptr);
    if (g) {
      g->assign(P.layout.size(), T(0));
      backward(P, ws, drop, dlogits, *g);
    }
  };

  if (jobs == 1) {
    for (int e = 0; e < B; ++e) {
      process(e, grad ? &buffers[0] : nullptr);
      if (grad && !buffers[0].empty())
        for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] += buffers[0][i];
      if (grad) buffers[0].clear();
    }
  } else {
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        for (int e = w; e < B; e += jobs)
          process(e, grad ? &buffers[static_cast<std::size_t>(e)] : nullptr);
      });
    }
    for (std::thread& t : workers) t.join();
    if (grad) {
      for (int e = 0; e < B; ++e) {
        const std::vector<T>& g = buffers[static_cast<std::size_t>(e)];
        if (g.empty()) continue;
        for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] += g[i];
      }
    }
  }
  LossStats total;
  for (const LossStats& s : stats) {
    total.loss_sum += s.loss_sum;
    total.tokens += s.tokens;
    total.correct += s.correct;
  }
  return total;
}

// Incremental decoder: one new position per call, keys/values cached.
template <class T>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Params<T>& P, const Mat<T>& memory) : P_(&P), memory_(&memory) {
    const ModelConfig& cfg = P.config;
    layers_.resize(static_cast<std::size_t>(cfg.n_dec_blocks));
    for (int l = 0; l < cfg.n_dec_blocks; ++l) {
      Layer& layer = layers_[static_cast<std::size_t>(l)];
      const ParamLayout::DecBlock& b = P.layout.dec[static_cast<std::size_t>(l)];
      layer.k.resize(cfg.max_tgt_len, cfg.d_model);
      layer.v.resize(cfg.max_tgt_len, cfg.d_model);
      linear(memory, P.at(b.cross.k), cfg.d_model, layer.ck);
      linear(memory, P.at(b.cross.v), cfg.d_model, layer.cv);
    }
  }

  int length() const { return len_; }

  // Feeds `token` at the next position; returns next-token logits.
  std::vector<T> feed(int token) {
    const Params<T>& P = *P_;
    const ModelConfig& cfg = P.config;
    const ParamLayout& L = P.layout;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    if (len_ >= cfg.max_tgt_len) throw ShapeError("decoder length exceeds max_tgt_len");
    if (token < 0 || token >= cfg.tgt_vocab) throw ShapeError("target token out of vocabulary");

    Mat<T> y(1, d);
    const T* e = P.at(L.tgt_embed) + static_cast<std::size_t>(token) * d;
    const T* p = P.at(L.tgt_pos) + static_cast<std::size_t>(len_) * d;
    for (int j = 0; j < d; ++j) y.data[static_cast<std::size_t>(j)] = e[j] + p[j];

    Mat<T> n, q, kr, vr, ctx(1, d), out, s, h_pre, h;
    std::vector<T> inv;
    std::vector<int> valid(1);
    for (int l = 0; l < cfg.n_dec_blocks; ++l) {
      Layer& layer = layers_[static_cast<std::size_t>(l)];
      const ParamLayout::DecBlock& b = L.dec[static_cast<std::size_t>(l)];
      // self-attention over cached positions [0, len_]
      rms_forward(y, P.at(b.self_norm), n, inv);
      linear(n, P.at(b.self.q), d, q);
      linear(n, P.at(b.self.k), d, kr);
      linear(n, P.at(b.self.v), d, vr);
      std::copy(kr.data.begin(), kr.data.end(), layer.k.row(len_));
      std::copy(vr.data.begin(), vr.data.end(), layer.v.row(len_));
      const int nk = len_ + 1;
      attend(q, layer.k, layer.v, nk, scale, ctx, s);
      linear(ctx, P.at(b.self.o), d, out);
      residual_add(y, out, static_cast<const Mat<T>*>(nullptr));
      // cross-attention
      rms_forward(y, P.at(b.cross_norm), n, inv);
      linear(n, P.at(b.cross.q), d, q);
      attend(q, layer.ck, layer.cv, layer.ck.rows, scale, ctx, s);
      linear(ctx, P.at(b.cross.o), d, out);
      residual_add(y, out, static_cast<const Mat<T>*>(nullptr));
      // feed-forward
      rms_forward(y, P.at(b.ff_norm), n, inv);
      ff_forward(P, b.ff_in, b.ff_out, n, h_pre, h, out);
      residual_add(y, out, static_cast<const Mat<T>*>(nullptr));
    }
    Mat<T> z, logits;
    rms_forward(y, P.at(L.dec_final), z, inv);
    linear(z, P.at(L.out_proj), cfg.tgt_vocab, logits);
    ++len_;
    return std::move(logits.data);
  }

 private:
  struct Layer {
    Mat<T> k, v, ck, cv;
  };

  void attend(const Mat<T>& q, const Mat<T>& keys, const Mat<T>& values, int nk, T scale,
              Mat<T>& ctx, Mat<T>& s) {
    const int d = P_->config.d_model;
    const int H = P_->config.n_heads;
    const int dh = d / H;
    for (int h = 0; h < H; ++h) {
      s.resize(1, nk);
      gemm_nt(1, nk, dh, q.data.data() + h * dh, d, keys.data.data() + h * dh, d, s.data.data(),
              nk, false, scratch_);
      for (T& v : s.data) v *= scale;
      kernels::softmax_rows(s, static_cast<const int*>(nullptr));
      gemm_nn(1, dh, nk, s.data.data(), nk, values.data.data() + h * dh, d,
              ctx.data.data() + h * dh, d, false);
    }
  }

  const Params<T>* P_;
  const Mat<T>* memory_;
  std::vector<Layer> layers_;
  int len_ = 0;
  std::vector<T> scratch_;
};

template <class T>
Mat<T> encode_compact(const Params<T>& P, const std::vector<int>& src) {
  const ModelConfig& cfg = P.config;
  if (static_cast<int>(src.size()) > cfg.max_src_len)
    throw ShapeError("source length " + std::to_string(src.size()) + " exceeds max_src_len " +
                     std::to_string(cfg.max_src_len));
  Workspace<T> ws;
  ws.src_tok = src;
  ws.src_pos.resize(src.size());
  std::iota(ws.src_pos.begin(), ws.src_pos.end(), 0);
  for (int t : src)
    if (t < 0 || t >= cfg.src_vocab) throw ShapeError("source token id out of vocabulary");
  encoder_forward(P, ws, Dropout{}, static_cast<AttentionProbe<T>*>(nullptr));
  return std::move(ws.memory);
}

template <class T>
std::vector<double> log_softmax(const std::vector<T>& logits) {
  double mx = static_cast<double>(logits[0]);
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

template <class T>
std::vector<int> greedy_decode(const Params<T>& P, const Mat<T>& memory, int max_len) {
  IncrementalDecoder<T> dec(P, memory);
  std::vector<int> out{kBos};
  while (static_cast<int>(out.size()) - 1 < max_len) {
    const std::vector<T> logits = dec.feed(out.back());
    int arg = 0;
    for (int v = 1; v < static_cast<int>(logits.size()); ++v)
      if (logits[static_cast<std::size_t>(v)] > logits[static_cast<std::size_t>(arg)]) arg = v;
    out.push_back(arg);
    if (arg == kEos) break;
  }
  return out;
}

template <class T>
std::vector<int> beam_decode(const Params<T>& P, const Mat<T>& memory, int width, int max_len) {
  struct Hyp {
    std::vector<int> tokens;
    double score;
    IncrementalDecoder<T> dec;
  };
  struct Finished {
    std::vector<int> tokens;
    double normalized;
  };
  std::vector<Hyp> alive;
  alive.push_back({{kBos}, 0.0, IncrementalDecoder<T>(P, memory)});
  std::vector<Finished> finished;
  while (!alive.empty() && static_cast<int>(finished.size()) < width) {
    struct Cand {
      double score;
      std::size_t hyp;
      int token;
    };
    std::vector<Cand> cands;
    std::vector<std::vector<double>> lps;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      lps.push_back(log_softmax(alive[h].dec.feed(alive[h].tokens.back())));
      const std::vector<double>& lp = lps.back();
      for (std::size_t v = 0; v < lp.size(); ++v)
        cands.push_back({alive[h].score + lp[v], h, static_cast<int>(v)});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < cands.size() && static_cast<int>(i) < width; ++i) {
      const Cand& c = cands[i];
      std::vector<int> tokens = alive[c.hyp].tokens;
      tokens.push_back(c.token);
      const int generated = static_cast<int>(tokens.size()) - 1;
      if (c.token == kEos || generated >= max_len) {
        finished.push_back({std::move(tokens), c.score / generated});
      } else {
        next.push_back({std::move(tokens), c.score, alive[c.hyp].dec});
      }
    }
    alive = std::move(next);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].normalized > finished[best].normalized) best = i;
  return finished[best].tokens;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw ConfigError("d_model must be a positive multiple of n_heads");
  if (n_enc_blocks < 1 || n_dec_blocks < 1 || d_ff < 1)
    throw ConfigError("block counts and d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (max_src_len < 3 || max_tgt_len < 2) throw ConfigError("max lengths too small");
  if (src_vocab < 5 || tgt_vocab < 4) throw ConfigError("vocabulary sizes too small");
  if (positional != kPositionalScheme)
    throw ConfigError("unsupported positional scheme '" + positional + "'");
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const int d = c.d_model;
  src_embed = add("src_embed", c.src_vocab, d, false);
  src_pos = add("src_pos", c.max_src_len, d, false);
  tgt_embed = add("tgt_embed", c.tgt_vocab, d, false);
  tgt_pos = add("tgt_pos", c.max_tgt_len, d, false);
  auto attention = [&](const std::string& prefix) {
    Attention a;
    a.q = add(prefix + ".q", d, d, true);
    a.k = add(prefix + ".k", d, d, true);
    a.v = add(prefix + ".v", d, d, true);
    a.o = add(prefix + ".o", d, d, true);
    return a;
  };
  for (int l = 0; l < c.n_enc_blocks; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncBlock b;
    b.attn_norm = add(p + ".attn_norm", 1, d, false);
    b.attn = attention(p + ".attn");
    b.ff_norm = add(p + ".ff_norm", 1, d, false);
    b.ff_in = add(p + ".ff_in", d, c.d_ff, true);
    b.ff_out = add(p + ".ff_out", c.d_ff, d, true);
    enc.push_back(b);
  }
  enc_final = add("enc.final_norm", 1, d, false);
  for (int l = 0; l < c.n_dec_blocks; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecBlock b;
    b.self_norm = add(p + ".self_norm", 1, d, false);
    b.self = attention(p + ".self");
    b.cross_norm = add(p + ".cross_norm", 1, d, false);
    b.cross = attention(p + ".cross");
    b.ff_norm = add(p + ".ff_norm", 1, d, false);
    b.ff_in = add(p + ".ff_in", d, c.d_ff, true);
    b.ff_out = add(p + ".ff_out", c.d_ff, d, true);
    dec.push_back(b);
  }
  dec_final = add("dec.final_norm", 1, d, false);
  out_proj = add("out_proj", d, c.tgt_vocab, true);
}

std::size_t ParamLayout::add(const std::string& name, int rows, int cols, bool decay) {
  TensorInfo t{name, rows, cols, size_, decay};
  size_ += t.size();
  tensors_.push_back(std::move(t));
  return tensors_.back().offset;
}

const TensorInfo& ParamLayout::find(std::string_view name) const {
  for (const TensorInfo& t : tensors_)
    if (t.name == name) return t;
  throw RangeError("no parameter tensor named '" + std::string(name) + "'");
}

template <class T>
bool Params<T>::all_finite() const {
  for (T v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

template <class T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  Params<T> p(config);
  const auto& tensors = p.layout.tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const TensorInfo& info = tensors[t];
    const bool is_norm = info.rows == 1 && info.name.find("norm") != std::string::npos;
    if (is_norm) {
      std::fill(p.data.begin() + static_cast<std::ptrdiff_t>(info.offset),
                p.data.begin() + static_cast<std::ptrdiff_t>(info.offset + info.size()), T(1));
      continue;
    }
    // Embeddings ~ N(0, 1); projections ~ N(0, 1/fan_in).
    const double stddev = info.decay ? 1.0 / std::sqrt(static_cast<double>(info.rows)) : 1.0;
    for (std::size_t i = 0; i < info.size(); ++i) {
      const std::uint64_t h = counter_hash({seed, t, i});
      const double u1 = (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
      const double u2 = to_unit(mix64(h));
      const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
      p.data[info.offset + i] = static_cast<T>(z * stddev);
    }
  }
  return p;
}

Batch Batch::from_examples(const std::vector<Example>& examples, int min_src_len,
                           int min_tgt_len) {
  Batch b;
  b.size = static_cast<int>(examples.size());
  b.src_len = min_src_len;
  b.tgt_len = min_tgt_len;
  for (const Example& e : examples) {
    if (e.tgt.size() < 2) throw ShapeError("target needs at least <bos> and <eos>");
    b.src_len = std::max(b.src_len, static_cast<int>(e.src.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<int>(e.tgt.size()) - 1);
  }
  const std::size_t ns = static_cast<std::size_t>(b.size) * b.src_len;
  const std::size_t nt = static_cast<std::size_t>(b.size) * b.tgt_len;
  b.src.assign(ns, 0);
  b.src_mask.assign(ns, 0);
  b.tgt_in.assign(nt, 0);
  b.tgt_out.assign(nt, 0);
  b.tgt_mask.assign(nt, 0);
  for (int e = 0; e < b.size; ++e) {
    const Example& ex = examples[static_cast<std::size_t>(e)];
    for (std::size_t i = 0; i < ex.src.size(); ++i) {
      b.src[static_cast<std::size_t>(e) * b.src_len + i] = ex.src[i];
      b.src_mask[static_cast<std::size_t>(e) * b.src_len + i] = 1;
    }
    for (std::size_t t = 0; t + 1 < ex.tgt.size(); ++t) {
      const std::size_t at = static_cast<std::size_t>(e) * b.tgt_len + t;
      b.tgt_in[at] = ex.tgt[t];
      b.tgt_out[at] = ex.tgt[t + 1];
      b.tgt_mask[at] = 1;
    }
  }
  return b;
}

template <class T>
std::vector<Encoded<T>> encode(const Params<T>& P, const Batch& batch, AttentionProbe<T>* probe) {
  check_batch(P.config, batch);
  const int d = P.config.d_model;
  std::vector<Encoded<T>> out;
  for (int e = 0; e < batch.size; ++e) {
    Workspace<T> ws;
    gather_source(batch, e, ws.src_tok, ws.src_pos);
    if (ws.src_tok.empty()) throw ShapeError("source sequence is entirely padding");
    AttentionProbe<T> compact;
    encoder_forward(P, ws, Dropout{}, probe ? &compact : nullptr);
    Encoded<T> enc;
    enc.memory.resize(batch.src_len, d);
    enc.mask.assign(batch.src_mask.begin() + static_cast<std::ptrdiff_t>(e) * batch.src_len,
                    batch.src_mask.begin() + static_cast<std::ptrdiff_t>(e + 1) * batch.src_len);
    for (std::size_t i = 0; i < ws.src_pos.size(); ++i)
      std::copy(ws.memory.row(static_cast<int>(i)), ws.memory.row(static_cast<int>(i)) + d,
                enc.memory.row(ws.src_pos[i]));
    if (probe) {
      // Scatter compact attention back onto the padded grid.
      for (auto& layer : compact.encoder) {
        std::vector<Mat<T>> heads;
        for (const Mat<T>& p : layer) {
          Mat<T> full(batch.src_len, batch.src_len);
          for (int i = 0; i < p.rows; ++i)
            for (int j = 0; j < p.cols; ++j)
              full.at(ws.src_pos[static_cast<std::size_t>(i)], ws.src_pos[static_cast<std::size_t>(j)]) = p.at(i, j);
          heads.push_back(std::move(full));
        }
        probe->encoder.push_back(std::move(heads));
      }
    }
    out.push_back(std::move(enc));
  }
  return out;
}

template <class T>
Mat<T> decode_step(const Params<T>& P, const Encoded<T>& source, const std::vector<int>& prefix) {
  const ModelConfig& cfg = P.config;
  const int d = cfg.d_model;
  if (prefix.empty() || prefix.front() != kBos) throw ShapeError("prefix must start with <bos>");
  if (static_cast<int>(prefix.size()) > cfg.max_tgt_len)
    throw ShapeError("prefix longer than max_tgt_len");
  if (source.memory.cols != d || source.mask.size() != static_cast<std::size_t>(source.memory.rows))
    throw ShapeError("encoded source has the wrong shape");
  for (int t : prefix)
    if (t < 0 || t >= cfg.tgt_vocab) throw ShapeError("target token out of vocabulary");
  Workspace<T> ws;
  int valid = 0;
  for (std::uint8_t m : source.mask) valid += m;
  ws.memory.resize(valid, d);
  for (int i = 0, r = 0; i < source.memory.rows; ++i)
    if (source.mask[static_cast<std::size_t>(i)])
      std::copy(source.memory.row(i), source.memory.row(i) + d, ws.memory.row(r++));
  ws.tgt_tok = prefix;
  decoder_forward(P, ws, Dropout{});
  return std::move(ws.logits);
}

template <class T>
LossStats loss(const Params<T>& params, const Batch& batch, const ForwardOptions& opts) {
  return run_batch(params, batch, opts, static_cast<std::vector<T>*>(nullptr), 1);
}

template <class T>
LossStats loss_and_grad(const Params<T>& params, const Batch& batch, const ForwardOptions& opts,
                        std::vector<T>& grad, int jobs) {
  return run_batch(params, batch, opts, &grad, jobs);
}

template <class T>
std::vector<int> synthesize(const Params<T>& params, const std::vector<int>& src,
                            const DecodeOptions& options) {
  const int max_len = options.max_len > 0 ? std::min(options.max_len, params.config.max_tgt_len)
                                          : params.config.max_tgt_len;
  const Mat<T> memory = encode_compact(params, src);
  if (options.beam_width <= 1) return greedy_decode(params, memory, max_len);
  return beam_decode(params, memory, options.beam_width, max_len);
}

#define DEMOSYNTH_INSTANTIATE(T)                                                                  \
  template struct Params<T>;                                                                      \
  template Params<T> init_params<T>(const ModelConfig&, std::uint64_t);                           \
  template std::vector<Encoded<T>> encode<T>(const Params<T>&, const Batch&, AttentionProbe<T>*); \
  template Mat<T> decode_step<T>(const Params<T>&, const Encoded<T>&, const std::vector<int>&);   \
  template LossStats loss<T>(const Params<T>&, const Batch&, const ForwardOptions&);              \
  template LossStats loss_and_grad<T>(const Params<T>&, const Batch&, const ForwardOptions&,      \
                                      std::vector<T>&, int);                                      \
  template std::vector<int> synthesize<T>(const Params<T>&, const std::vector<int>&,              \
                                          const DecodeOptions&);

DEMOSYNTH_INSTANTIATE(float)
DEMOSYNTH_INSTANTIATE(double)

#undef DEMOSYNTH_INSTANTIATE

}  // namespace demosynth::model
