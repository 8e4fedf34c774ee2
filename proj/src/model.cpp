#include "ctxcomp/model.hpp"

#include <algorithm>
#include <cmath>

#include "ctxcomp/errors.hpp"

namespace ctxcomp::nn {

void ModelConfig::validate() const {
  if (hidden_size <= 0 || n_layers <= 0 || n_heads <= 0 || n_kv_heads <= 0)
    throw ConfigError("model config: non-positive dimension");
  if (hidden_size % n_heads != 0)
    throw ConfigError("model config: hidden_size not divisible by n_heads");
  if (n_heads % n_kv_heads != 0)
    throw ConfigError("model config: n_heads not divisible by n_kv_heads");
  if (head_dim() % 2 != 0)
    throw ConfigError("model config: head_dim must be even for rotary positions");
  if (vocab_size <= 0 || max_position <= 0)
    throw ConfigError("model config: bad vocab/max_position");
}

std::uint64_t ModelConfig::param_count() const {
  const std::uint64_t h = hidden_size, v = vocab_size, im = intermediate_size;
  const std::uint64_t kv = kv_dim();
  const std::uint64_t per_layer = h            // attn_norm
                                  + h * h      // wq
                                  + h * kv     // wk
                                  + h * kv     // wv
                                  + h * h      // wo
                                  + h          // mlp_norm
                                  + h * im     // w_gate
                                  + h * im     // w_up
                                  + im * h;    // w_down
  return v * h + static_cast<std::uint64_t>(n_layers) * per_layer + h + h * v;
}

std::uint64_t ModelConfig::nonembedding_param_count() const {
  // the token embedding table is a lookup; everything else (lm head
  // included) multiplies activations
  return param_count() - static_cast<std::uint64_t>(vocab_size) * hidden_size;
}

ModelConfig ModelConfig::tier_config(const std::string& tier) {
  ModelConfig c;
  c.tier = tier;
  if (tier == "T1") {
    c.n_layers = 2; c.hidden_size = 64; c.intermediate_size = 128;
    c.n_heads = 4; c.n_kv_heads = 2;
  } else if (tier == "T2") {
    c.n_layers = 4; c.hidden_size = 128; c.intermediate_size = 256;
    c.n_heads = 8; c.n_kv_heads = 4;
  } else if (tier == "T3") {
    c.n_layers = 6; c.hidden_size = 192; c.intermediate_size = 384;
    c.n_heads = 8; c.n_kv_heads = 4;
  } else if (tier == "T4") {
    c.n_layers = 8; c.hidden_size = 256; c.intermediate_size = 512;
    c.n_heads = 8; c.n_kv_heads = 4;
  } else {
    throw ConfigError("unknown tier: " + tier + " (expected T1..T4)");
  }
  c.validate();
  return c;
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  p.cfg = cfg;
  const int h = cfg.hidden_size, kv = cfg.kv_dim(), im = cfg.intermediate_size;
  p.tok_emb.resize(cfg.vocab_size, h);
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm.resize(1, h);
    l.wq.resize(h, h);
    l.wk.resize(h, kv);
    l.wv.resize(h, kv);
    l.wo.resize(h, h);
    l.mlp_norm.resize(1, h);
    l.w_gate.resize(h, im);
    l.w_up.resize(h, im);
    l.w_down.resize(im, h);
  }
  p.final_norm.resize(1, h);
  p.lm_head.resize(h, cfg.vocab_size);

  Rng rng(seed);
  const double base_std = 0.02;
  const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
  p.tok_emb.fill_gaussian(rng, base_std);
  for (auto& l : p.layers) {
    std::fill(l.attn_norm.data.begin(), l.attn_norm.data.end(), T(1));
    l.wq.fill_gaussian(rng, base_std);
    l.wk.fill_gaussian(rng, base_std);
    l.wv.fill_gaussian(rng, base_std);
    l.wo.fill_gaussian(rng, resid_std);
    std::fill(l.mlp_norm.data.begin(), l.mlp_norm.data.end(), T(1));
    l.w_gate.fill_gaussian(rng, base_std);
    l.w_up.fill_gaussian(rng, base_std);
    l.w_down.fill_gaussian(rng, resid_std);
  }
  std::fill(p.final_norm.data.begin(), p.final_norm.data.end(), T(1));
  p.lm_head.fill_gaussian(rng, base_std);

  if (p.actual_param_count() != cfg.param_count())
    throw ContractError("parameter count formula out of sync with tensors");
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like(const ModelParams<T>& other) {
  ModelParams<T> g;
  g.cfg = other.cfg;
  g.tok_emb.resize(other.tok_emb.rows, other.tok_emb.cols);
  g.layers.resize(other.layers.size());
  for (std::size_t i = 0; i < other.layers.size(); ++i) {
    const auto& s = other.layers[i];
    auto& d = g.layers[i];
    d.attn_norm.resize(s.attn_norm.rows, s.attn_norm.cols);
    d.wq.resize(s.wq.rows, s.wq.cols);
    d.wk.resize(s.wk.rows, s.wk.cols);
    d.wv.resize(s.wv.rows, s.wv.cols);
    d.wo.resize(s.wo.rows, s.wo.cols);
    d.mlp_norm.resize(s.mlp_norm.rows, s.mlp_norm.cols);
    d.w_gate.resize(s.w_gate.rows, s.w_gate.cols);
    d.w_up.resize(s.w_up.rows, s.w_up.cols);
    d.w_down.resize(s.w_down.rows, s.w_down.cols);
  }
  g.final_norm.resize(other.final_norm.rows, other.final_norm.cols);
  g.lm_head.resize(other.lm_head.rows, other.lm_head.cols);
  return g;
}

template <typename T>
std::uint64_t ModelParams<T>::actual_param_count() const {
  std::uint64_t n = 0;
  visit_tensors(*this, [&](const std::string&, const Mat<T>& m) { n += m.size(); });
  return n;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  bool ok = true;
  visit_tensors(*this, [&](const std::string&, const Mat<T>& m) { ok = ok && m.all_finite(); });
  return ok;
}

namespace {

template <typename T>
void rmsnorm_forward(const Mat<T>& x, const Mat<T>& w, Mat<T>& y, std::vector<T>& inv_rms) {
  const int h = x.cols;
  y.ensure(x.rows, h);
  inv_rms.assign(x.rows, T(0));
  for (int r = 0; r < x.rows; ++r) {
    const T* xr = x.row(r);
    double ms = 0.0;
    for (int j = 0; j < h; ++j) ms += static_cast<double>(xr[j]) * xr[j];
    const T s = static_cast<T>(1.0 / std::sqrt(ms / h + kNormEps));
    inv_rms[r] = s;
    T* yr = y.row(r);
    for (int j = 0; j < h; ++j) yr[j] = xr[j] * w.data[j] * s;
  }
}

// Accumulates dx; fills dw.
template <typename T>
void rmsnorm_backward(const Mat<T>& x, const Mat<T>& w, const std::vector<T>& inv_rms,
                      const Mat<T>& dy, Mat<T>& dx, Mat<T>& dw, bool param_grads) {
  const int h = x.cols;
  for (int r = 0; r < x.rows; ++r) {
    const T* xr = x.row(r);
    const T* dyr = dy.row(r);
    T* dxr = dx.row(r);
    const double s = static_cast<double>(inv_rms[r]);
    double dot = 0.0;  // sum_k dy_k w_k x_k
    for (int j = 0; j < h; ++j) dot += static_cast<double>(dyr[j]) * w.data[j] * xr[j];
    const double c = s * s * s * dot / h;
    for (int j = 0; j < h; ++j) {
      dxr[j] += static_cast<T>(s * w.data[j] * dyr[j] - c * xr[j]);
      if (param_grads) dw.data[j] += static_cast<T>(static_cast<double>(dyr[j]) * xr[j] * s);
    }
  }
}

// Rotary tables: cos/sin per (position, pair). Angles evaluated in double.
template <typename T>
void rope_tables(int seq, int head_dim, std::vector<T>& cs, std::vector<T>& sn) {
  const int half = head_dim / 2;
  cs.resize(static_cast<std::size_t>(seq) * half);
  sn.resize(static_cast<std::size_t>(seq) * half);
  for (int pos = 0; pos < seq; ++pos) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(kRopeBase, -2.0 * i / head_dim);
      const double a = pos * freq;
      cs[static_cast<std::size_t>(pos) * half + i] = static_cast<T>(std::cos(a));
      sn[static_cast<std::size_t>(pos) * half + i] = static_cast<T>(std::sin(a));
    }
  }
}

// In-place rotation of adjacent pairs within every head; sign=-1 inverts.
template <typename T>
void rope_apply(Mat<T>& m, int batch, int seq, int head_dim, const std::vector<T>& cs,
                const std::vector<T>& sn, T sign) {
  const int half = head_dim / 2;
  const int heads = m.cols / head_dim;
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < seq; ++t) {
      T* row = m.row(b * seq + t);
      const T* c = cs.data() + static_cast<std::size_t>(t) * half;
      const T* s = sn.data() + static_cast<std::size_t>(t) * half;
      for (int hh = 0; hh < heads; ++hh) {
        T* v = row + hh * head_dim;
        for (int i = 0; i < half; ++i) {
          const T x0 = v[2 * i], x1 = v[2 * i + 1];
          v[2 * i] = x0 * c[i] - sign * x1 * s[i];
          v[2 * i + 1] = sign * x0 * s[i] + x1 * c[i];
        }
      }
    }
  }
}

template <typename T>
void silu_gate_forward(const Mat<T>& gate_pre, const Mat<T>& up, Mat<T>& act) {
  act.ensure(gate_pre.rows, gate_pre.cols);
  for (std::size_t i = 0; i < gate_pre.data.size(); ++i) {
    const double g = static_cast<double>(gate_pre.data[i]);
    const double sig = 1.0 / (1.0 + std::exp(-g));
    act.data[i] = static_cast<T>(g * sig * static_cast<double>(up.data[i]));
  }
}

}  // namespace

template <typename T>
void forward(const ModelParams<T>& p, const Mat<T>& x, int batch, int seq,
             ForwardCache<T>& cache) {
  const ModelConfig& cfg = p.cfg;
  if (x.rows != batch * seq || x.cols != cfg.hidden_size)
    throw ContractError("forward: input shape mismatch");
  if (seq > cfg.max_position)
    throw CapacityError("forward: sequence length " + std::to_string(seq) +
                        " exceeds max_position " + std::to_string(cfg.max_position));

  const int h = cfg.hidden_size, hd = cfg.head_dim(), kv = cfg.kv_dim();
  const int nh = cfg.n_heads, nkv = cfg.n_kv_heads, group = nh / nkv;
  const int rows = batch * seq;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  cache.batch = batch;
  cache.seq = seq;
  cache.consumed = false;
  cache.x0 = x;
  cache.layers.resize(cfg.n_layers);

  std::vector<T> cs, sn;
  rope_tables<T>(seq, hd, cs, sn);

  Mat<T> cur = x;
  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& lp = p.layers[li];
    auto& lc = cache.layers[li];
    lc.x_in = cur;

    rmsnorm_forward(lc.x_in, lp.attn_norm, lc.attn_norm_out, lc.attn_inv_rms);
    matmul(lc.attn_norm_out, lp.wq, lc.q);
    matmul(lc.attn_norm_out, lp.wk, lc.k);
    matmul(lc.attn_norm_out, lp.wv, lc.v);
    rope_apply(lc.q, batch, seq, hd, cs, sn, T(1));
    rope_apply(lc.k, batch, seq, hd, cs, sn, T(1));

    lc.probs.ensure(batch * nh * seq, seq);
    lc.att_mix.ensure(rows, h);
    for (int b = 0; b < batch; ++b) {
      for (int hh = 0; hh < nh; ++hh) {
        const int kvh = hh / group;
        const T* qh = lc.q.row(b * seq) + hh * hd;
        const T* kh = lc.k.row(b * seq) + kvh * hd;
        const T* vh = lc.v.row(b * seq) + kvh * hd;
        T* ph = lc.probs.row((b * nh + hh) * seq);
        gemm(false, true, seq, seq, hd, scale, qh, h, kh, kv, T(0), ph, seq);
        // causal softmax: row t sees columns 0..t
        for (int t = 0; t < seq; ++t) {
          T* row = ph + static_cast<std::size_t>(t) * seq;
          T mx = row[0];
          for (int j = 1; j <= t; ++j) mx = std::max(mx, row[j]);
          double denom = 0.0;
          for (int j = 0; j <= t; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - mx));
            row[j] = static_cast<T>(e);
            denom += e;
          }
          const T inv = static_cast<T>(1.0 / denom);
          for (int j = 0; j <= t; ++j) row[j] *= inv;
          for (int j = t + 1; j < seq; ++j) row[j] = T(0);
        }
        gemm(false, false, seq, hd, seq, T(1), ph, seq, vh, kv, T(0),
             lc.att_mix.row(b * seq) + hh * hd, h);
      }
    }

    lc.x_mid.ensure(rows, h);
    gemm(false, false, rows, h, h, T(1), lc.att_mix.data.data(), h, lp.wo.data.data(), h,
         T(0), lc.x_mid.data.data(), h);
    for (std::size_t i = 0; i < lc.x_mid.data.size(); ++i) lc.x_mid.data[i] += lc.x_in.data[i];

    rmsnorm_forward(lc.x_mid, lp.mlp_norm, lc.mlp_norm_out, lc.mlp_inv_rms);
    matmul(lc.mlp_norm_out, lp.w_gate, lc.gate_pre);
    matmul(lc.mlp_norm_out, lp.w_up, lc.up);
    silu_gate_forward(lc.gate_pre, lc.up, lc.act);

    cur.ensure(rows, h);
    gemm(false, false, rows, h, cfg.intermediate_size, T(1), lc.act.data.data(),
         cfg.intermediate_size, lp.w_down.data.data(), h, T(0), cur.data.data(), h);
    for (std::size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += lc.x_mid.data[i];
  }

  cache.final_in = cur;
  rmsnorm_forward(cur, p.final_norm, cache.final_norm_out, cache.final_inv_rms);
}

template <typename T>
void logits_from_hidden(const ModelParams<T>& p, const Mat<T>& hidden, Mat<T>& logits) {
  matmul(hidden, p.lm_head, logits);
}

template <typename T>
void backward_from_logits(const ModelParams<T>& p, ForwardCache<T>& cache,
                          const Mat<T>& d_logits, Gradients<T>& grads,
                          std::type_identity_t<Mat<T>*> dx_out,
                          bool param_grads) {
  const int rows = cache.batch * cache.seq;
  const int h = p.cfg.hidden_size;
  Mat<T> d_hidden(rows, h);
  gemm(false, true, rows, h, p.cfg.vocab_size, T(1), d_logits.data.data(), p.cfg.vocab_size,
       p.lm_head.data.data(), p.cfg.vocab_size, T(0), d_hidden.data.data(), h);
  if (param_grads) {
    gemm(true, false, h, p.cfg.vocab_size, rows, T(1), cache.final_norm_out.data.data(), h,
         d_logits.data.data(), p.cfg.vocab_size, T(1), grads.lm_head.data.data(),
         p.cfg.vocab_size);
  }
  backward_from_hidden(p, cache, d_hidden, grads, dx_out, param_grads);
}

template <typename T>
void backward_from_hidden(const ModelParams<T>& p, ForwardCache<T>& cache,
                          const Mat<T>& d_hidden, Gradients<T>& grads,
                          std::type_identity_t<Mat<T>*> dx_out,
                          bool param_grads) {
  if (cache.consumed)
    throw ContractError("backward: forward cache already consumed");
  cache.consumed = true;

  const ModelConfig& cfg = p.cfg;
  const int h = cfg.hidden_size, hd = cfg.head_dim(), kv = cfg.kv_dim();
  const int nh = cfg.n_heads, nkv = cfg.n_kv_heads, group = nh / nkv;
  const int batch = cache.batch, seq = cache.seq;
  const int rows = batch * seq;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  std::vector<T> cs, sn;
  rope_tables<T>(seq, hd, cs, sn);

  Mat<T> dcur(rows, h);
  rmsnorm_backward(cache.final_in, p.final_norm, cache.final_inv_rms, d_hidden, dcur,
                   grads.final_norm, param_grads);

  Mat<T> d_mlp_norm_out(rows, h), d_gate(0, 0), d_up(0, 0), d_act(0, 0);
  Mat<T> d_att_mix(rows, h), dq(rows, h), dk(rows, kv), dv(rows, kv);
  Mat<T> d_norm_in(rows, h);
  std::vector<T> dscore_buf;

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& lp = p.layers[li];
    auto& lc = cache.layers[li];

    // ---- MLP block: out = x_mid + w_down(act) ----
    // dcur is the gradient at the block output; residual passes it through.
    d_act.ensure(rows, cfg.intermediate_size);
    gemm(false, true, rows, cfg.intermediate_size, h, T(1), dcur.data.data(), h,
         lp.w_down.data.data(), h, T(0), d_act.data.data(), cfg.intermediate_size);
    if (param_grads) {
      gemm(true, false, cfg.intermediate_size, h, rows, T(1), lc.act.data.data(),
           cfg.intermediate_size, dcur.data.data(), h, T(1), grads.layers[li].w_down.data.data(),
           h);
    }
    d_gate.ensure(rows, cfg.intermediate_size);
    d_up.ensure(rows, cfg.intermediate_size);
    for (std::size_t i = 0; i < d_act.data.size(); ++i) {
      const double g = static_cast<double>(lc.gate_pre.data[i]);
      const double sig = 1.0 / (1.0 + std::exp(-g));
      const double silu = g * sig;
      const double dsilu = sig * (1.0 + g * (1.0 - sig));
      d_up.data[i] = static_cast<T>(static_cast<double>(d_act.data[i]) * silu);
      d_gate.data[i] =
          static_cast<T>(static_cast<double>(d_act.data[i]) * lc.up.data[i] * dsilu);
    }
    d_mlp_norm_out.ensure(rows, h);
    gemm(false, true, rows, h, cfg.intermediate_size, T(1), d_gate.data.data(),
         cfg.intermediate_size, lp.w_gate.data.data(), cfg.intermediate_size, T(0),
         d_mlp_norm_out.data.data(), h);
    gemm(false, true, rows, h, cfg.intermediate_size, T(1), d_up.data.data(),
         cfg.intermediate_size, lp.w_up.data.data(), cfg.intermediate_size, T(1),
         d_mlp_norm_out.data.data(), h);
    if (param_grads) {
      gemm(true, false, h, cfg.intermediate_size, rows, T(1), lc.mlp_norm_out.data.data(), h,
           d_gate.data.data(), cfg.intermediate_size, T(1),
           grads.layers[li].w_gate.data.data(), cfg.intermediate_size);
      gemm(true, false, h, cfg.intermediate_size, rows, T(1), lc.mlp_norm_out.data.data(), h,
           d_up.data.data(), cfg.intermediate_size, T(1), grads.layers[li].w_up.data.data(),
           cfg.intermediate_size);
    }
    // d(x_mid) = dcur (residual) + rmsnorm backward of d_mlp_norm_out
    rmsnorm_backward(lc.x_mid, lp.mlp_norm, lc.mlp_inv_rms, d_mlp_norm_out, dcur,
                     grads.layers[li].mlp_norm, param_grads);

    // ---- attention block: x_mid = x_in + wo(att_mix) ----
    d_att_mix.ensure(rows, h);
    gemm(false, true, rows, h, h, T(1), dcur.data.data(), h, lp.wo.data.data(), h, T(0),
         d_att_mix.data.data(), h);
    if (param_grads) {
      gemm(true, false, h, h, rows, T(1), lc.att_mix.data.data(), h, dcur.data.data(), h,
           T(1), grads.layers[li].wo.data.data(), h);
    }

    dq.ensure(rows, h);
    dk.ensure(rows, kv);
    dv.ensure(rows, kv);
    dq.zero();
    dk.zero();
    dv.zero();
    dscore_buf.assign(static_cast<std::size_t>(seq) * seq, T(0));
    for (int b = 0; b < batch; ++b) {
      for (int hh = 0; hh < nh; ++hh) {
        const int kvh = hh / group;
        const T* qh = lc.q.row(b * seq) + hh * hd;
        const T* kh = lc.k.row(b * seq) + kvh * hd;
        const T* vh = lc.v.row(b * seq) + kvh * hd;
        const T* ph = lc.probs.row((b * nh + hh) * seq);
        const T* dmix = d_att_mix.row(b * seq) + hh * hd;
        T* ds = dscore_buf.data();

        // dprobs = dmix @ v^T, then softmax backward into dscores (in place)
        gemm(false, true, seq, seq, hd, T(1), dmix, h, vh, kv, T(0), ds, seq);
        // dv += probs^T @ dmix (shared kv heads accumulate)
        gemm(true, false, seq, hd, seq, T(1), ph, seq, dmix, h, T(1),
             dv.row(b * seq) + kvh * hd, kv);
        for (int t = 0; t < seq; ++t) {
          const T* prow = ph + static_cast<std::size_t>(t) * seq;
          T* drow = ds + static_cast<std::size_t>(t) * seq;
          double dot = 0.0;
          for (int j = 0; j <= t; ++j) dot += static_cast<double>(prow[j]) * drow[j];
          for (int j = 0; j <= t; ++j)
            drow[j] = static_cast<T>(prow[j] * (static_cast<double>(drow[j]) - dot));
          for (int j = t + 1; j < seq; ++j) drow[j] = T(0);
        }
        // dq = ds @ k * scale ; dk += ds^T @ q * scale
        gemm(false, false, seq, hd, seq, scale, ds, seq, kh, kv, T(1),
             dq.row(b * seq) + hh * hd, h);
        gemm(true, false, seq, hd, seq, scale, ds, seq, qh, h, T(1),
             dk.row(b * seq) + kvh * hd, kv);
      }
    }
    // undo the rotation (its inverse is the transpose)
    rope_apply(dq, batch, seq, hd, cs, sn, T(-1));
    rope_apply(dk, batch, seq, hd, cs, sn, T(-1));

    d_norm_in.ensure(rows, h);
    gemm(false, true, rows, h, h, T(1), dq.data.data(), h, lp.wq.data.data(), h, T(0),
         d_norm_in.data.data(), h);
    gemm(false, true, rows, h, kv, T(1), dk.data.data(), kv, lp.wk.data.data(), kv, T(1),
         d_norm_in.data.data(), h);
    gemm(false, true, rows, h, kv, T(1), dv.data.data(), kv, lp.wv.data.data(), kv, T(1),
         d_norm_in.data.data(), h);
    if (param_grads) {
      gemm(true, false, h, h, rows, T(1), lc.attn_norm_out.data.data(), h, dq.data.data(),
           h, T(1), grads.layers[li].wq.data.data(), h);
      gemm(true, false, h, kv, rows, T(1), lc.attn_norm_out.data.data(), h, dk.data.data(),
           kv, T(1), grads.layers[li].wk.data.data(), kv);
      gemm(true, false, h, kv, rows, T(1), lc.attn_norm_out.data.data(), h, dv.data.data(),
           kv, T(1), grads.layers[li].wv.data.data(), kv);
    }
    rmsnorm_backward(lc.x_in, lp.attn_norm, lc.attn_inv_rms, d_norm_in, dcur,
                     grads.layers[li].attn_norm, param_grads);
  }

  if (dx_out) *dx_out = dcur;
}

template <typename T>
void embed_tokens(const ModelParams<T>& p, std::span<const Token> tokens, Mat<T>& x,
                  int row_offset) {
  const int h = p.cfg.hidden_size;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token t = tokens[i];
    if (t >= static_cast<Token>(p.cfg.vocab_size))
      throw ContractError("embed_tokens: token id out of range");
    const T* src = p.tok_emb.row(static_cast<int>(t));
    T* dst = x.row(row_offset + static_cast<int>(i));
    std::copy(src, src + h, dst);
  }
}

template <typename T>
void scatter_embedding_grad(Gradients<T>& grads, std::span<const Token> tokens,
                            const Mat<T>& dx, int row_offset) {
  const int h = grads.tok_emb.cols;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    T* dst = grads.tok_emb.row(static_cast<int>(tokens[i]));
    const T* src = dx.row(row_offset + static_cast<int>(i));
    for (int j = 0; j < h; ++j) dst[j] += src[j];
  }
}

template <typename T>
Mat<T> forward_lm(const ModelParams<T>& p, std::span<const Token> tokens,
                  std::type_identity_t<const Mat<T>*> extra_embeddings) {
  const int n_tok = static_cast<int>(tokens.size());
  const int n_extra = extra_embeddings ? extra_embeddings->rows : 0;
  const int seq = n_tok + n_extra;
  if (seq == 0) throw ContractError("forward_lm: empty input");
  if (seq > p.cfg.max_position)
    throw CapacityError("forward_lm: " + std::to_string(seq) + " positions exceed max_position " +
                        std::to_string(p.cfg.max_position));
  Mat<T> x(seq, p.cfg.hidden_size);
  embed_tokens(p, tokens, x, 0);
  if (extra_embeddings) {
    if (extra_embeddings->cols != p.cfg.hidden_size)
      throw ContractError("forward_lm: extra embedding width mismatch");
    for (int i = 0; i < n_extra; ++i) {
      const T* src = extra_embeddings->row(i);
      std::copy(src, src + p.cfg.hidden_size, x.row(n_tok + i));
    }
  }
  ForwardCache<T> cache;
  forward(p, x, 1, seq, cache);
  Mat<T> logits;
  logits_from_hidden(p, cache.hidden(), logits);
  return logits;
}

template <typename T>
double nll_loss(const Mat<T>& logits, std::span<const Token> targets,
                std::span<const std::uint8_t> mask, std::type_identity_t<Mat<T>*> d_logits) {
  if (targets.size() != static_cast<std::size_t>(logits.rows) ||
      mask.size() != static_cast<std::size_t>(logits.rows))
    throw ContractError("nll_loss: rows, targets and mask must align");
  std::size_t count = 0;
  for (std::uint8_t m : mask) count += (m != 0);
  if (count == 0) throw NumericError("nll_loss: empty mask (degenerate batch)");

  if (d_logits) {
    d_logits->ensure(logits.rows, logits.cols);
    d_logits->zero();
  }
  const int v = logits.cols;
  double total = 0.0;
  for (int r = 0; r < logits.rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const Token target = targets[static_cast<std::size_t>(r)];
    if (target >= static_cast<Token>(v)) throw ContractError("nll_loss: target out of range");
    const T* row = logits.row(r);
    double mx = static_cast<double>(row[0]);
    for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(denom);
    total += lse - static_cast<double>(row[target]);
    if (d_logits) {
      T* drow = d_logits->row(r);
      const double inv_count = 1.0 / static_cast<double>(count);
      for (int j = 0; j < v; ++j) {
        const double pj = std::exp(static_cast<double>(row[j]) - lse);
        drow[j] = static_cast<T>(pj * inv_count);
      }
      drow[target] -= static_cast<T>(inv_count);
    }
  }
  return total / static_cast<double>(count);
}

template <typename T>
DecodeState<T>::DecodeState(const ModelConfig& cfg, int batch_, int capacity_)
    : batch(batch_), capacity(capacity_) {
  k_hist.resize(cfg.n_layers);
  v_hist.resize(cfg.n_layers);
  for (int li = 0; li < cfg.n_layers; ++li) {
    k_hist[li].resize(batch * capacity, cfg.kv_dim());
    v_hist[li].resize(batch * capacity, cfg.kv_dim());
  }
}

template <typename T>
void decode_step(const ModelParams<T>& p, const Mat<T>& x_in, DecodeState<T>& state,
                 Mat<T>& logits) {
  const ModelConfig& cfg = p.cfg;
  const int h = cfg.hidden_size, hd = cfg.head_dim(), kv = cfg.kv_dim();
  const int nh = cfg.n_heads, group = nh / cfg.n_kv_heads;
  const int B = state.batch;
  const int pos = state.pos;
  if (pos >= state.capacity) throw CapacityError("decode_step: history capacity exhausted");
  if (pos >= cfg.max_position) throw CapacityError("decode_step: max_position exceeded");
  if (x_in.rows != B || x_in.cols != h) throw ContractError("decode_step: bad input shape");

  std::vector<T> cs(hd / 2), sn(hd / 2);
  for (int i = 0; i < hd / 2; ++i) {
    const double freq = std::pow(kRopeBase, -2.0 * i / hd);
    cs[i] = static_cast<T>(std::cos(pos * freq));
    sn[i] = static_cast<T>(std::sin(pos * freq));
  }

  Mat<T> cur = x_in;
  Mat<T> normed(B, h), q(B, h), k_new(B, kv), v_new(B, kv), att(B, h), proj(B, h);
  Mat<T> gate(B, cfg.intermediate_size), up(B, cfg.intermediate_size),
      act(B, cfg.intermediate_size), down(B, h);
  std::vector<T> inv_rms;
  std::vector<T> scores(static_cast<std::size_t>(pos) + 1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& lp = p.layers[li];
    rmsnorm_forward(cur, lp.attn_norm, normed, inv_rms);
    matmul(normed, lp.wq, q);
    matmul(normed, lp.wk, k_new);
    matmul(normed, lp.wv, v_new);
    // rotate at the current position
    for (int b = 0; b < B; ++b) {
      for (int hh = 0; hh < nh; ++hh) {
        T* vq = q.row(b) + hh * hd;
        for (int i = 0; i < hd / 2; ++i) {
          const T x0 = vq[2 * i], x1 = vq[2 * i + 1];
          vq[2 * i] = x0 * cs[i] - x1 * sn[i];
          vq[2 * i + 1] = x0 * sn[i] + x1 * cs[i];
        }
      }
      for (int hh = 0; hh < cfg.n_kv_heads; ++hh) {
        T* vk = k_new.row(b) + hh * hd;
        for (int i = 0; i < hd / 2; ++i) {
          const T x0 = vk[2 * i], x1 = vk[2 * i + 1];
          vk[2 * i] = x0 * cs[i] - x1 * sn[i];
          vk[2 * i + 1] = x0 * sn[i] + x1 * cs[i];
        }
      }
      std::copy(k_new.row(b), k_new.row(b) + kv, state.k_hist[li].row(b * state.capacity + pos));
      std::copy(v_new.row(b), v_new.row(b) + kv, state.v_hist[li].row(b * state.capacity + pos));
    }
    // attention over the history
    for (int b = 0; b < B; ++b) {
      for (int hh = 0; hh < nh; ++hh) {
        const int kvh = hh / group;
        const T* qh = q.row(b) + hh * hd;
        double mx = -1e30;
        for (int t = 0; t <= pos; ++t) {
          const T* kh = state.k_hist[li].row(b * state.capacity + t) + kvh * hd;
          double dot = 0.0;
          for (int j = 0; j < hd; ++j) dot += static_cast<double>(qh[j]) * kh[j];
          const double s = dot * scale;
          scores[static_cast<std::size_t>(t)] = static_cast<T>(s);
          mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int t = 0; t <= pos; ++t) {
          const double e = std::exp(static_cast<double>(scores[static_cast<std::size_t>(t)]) - mx);
          scores[static_cast<std::size_t>(t)] = static_cast<T>(e);
          denom += e;
        }
        T* out = att.row(b) + hh * hd;
        std::fill(out, out + hd, T(0));
        for (int t = 0; t <= pos; ++t) {
          const T w = static_cast<T>(static_cast<double>(scores[static_cast<std::size_t>(t)]) / denom);
          const T* vh = state.v_hist[li].row(b * state.capacity + t) + kvh * hd;
          for (int j = 0; j < hd; ++j) out[j] += w * vh[j];
        }
      }
    }
    matmul(att, lp.wo, proj);
    for (std::size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += proj.data[i];

    rmsnorm_forward(cur, lp.mlp_norm, normed, inv_rms);
    matmul(normed, lp.w_gate, gate);
    matmul(normed, lp.w_up, up);
    silu_gate_forward(gate, up, act);
    matmul(act, lp.w_down, down);
    for (std::size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += down.data[i];
  }

  rmsnorm_forward(cur, p.final_norm, normed, inv_rms);
  logits_from_hidden(p, normed, logits);
  state.pos += 1;
}

// explicit instantiations: 32-bit training path, 64-bit oracle path
template struct ModelParams<float>;
template struct ModelParams<double>;
template struct DecodeState<float>;
template struct DecodeState<double>;

template void forward<float>(const ModelParams<float>&, const Mat<float>&, int, int,
                             ForwardCache<float>&);
template void forward<double>(const ModelParams<double>&, const Mat<double>&, int, int,
                              ForwardCache<double>&);
template void logits_from_hidden<float>(const ModelParams<float>&, const Mat<float>&,
                                        Mat<float>&);
template void logits_from_hidden<double>(const ModelParams<double>&, const Mat<double>&,
                                         Mat<double>&);
template void backward_from_logits<float>(const ModelParams<float>&, ForwardCache<float>&,
                                          const Mat<float>&, Gradients<float>&, Mat<float>*,
                                          bool);
template void backward_from_logits<double>(const ModelParams<double>&,
                                           ForwardCache<double>&, const Mat<double>&,
                                           Gradients<double>&, Mat<double>*, bool);
template void backward_from_hidden<float>(const ModelParams<float>&, ForwardCache<float>&,
                                          const Mat<float>&, Gradients<float>&, Mat<float>*,
                                          bool);
template void backward_from_hidden<double>(const ModelParams<double>&,
                                           ForwardCache<double>&, const Mat<double>&,
                                           Gradients<double>&, Mat<double>*, bool);
template void embed_tokens<float>(const ModelParams<float>&, std::span<const Token>,
                                  Mat<float>&, int);
template void embed_tokens<double>(const ModelParams<double>&, std::span<const Token>,
                                   Mat<double>&, int);
template void scatter_embedding_grad<float>(Gradients<float>&, std::span<const Token>,
                                            const Mat<float>&, int);
template void scatter_embedding_grad<double>(Gradients<double>&, std::span<const Token>,
                                             const Mat<double>&, int);
template Mat<float> forward_lm<float>(const ModelParams<float>&, std::span<const Token>,
                                      const Mat<float>*);
template Mat<double> forward_lm<double>(const ModelParams<double>&, std::span<const Token>,
                                        const Mat<double>*);
template double nll_loss<float>(const Mat<float>&, std::span<const Token>,
                                std::span<const std::uint8_t>, Mat<float>*);
template double nll_loss<double>(const Mat<double>&, std::span<const Token>,
                                 std::span<const std::uint8_t>, Mat<double>*);
template void decode_step<float>(const ModelParams<float>&, const Mat<float>&,
                                 DecodeState<float>&, Mat<float>&);
template void decode_step<double>(const ModelParams<double>&, const Mat<double>&,
                                  DecodeState<double>&, Mat<double>&);

}  // namespace ctxcomp::nn
