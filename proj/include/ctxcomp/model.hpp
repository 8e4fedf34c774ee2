#pragma once

#include <cstdint>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "ctxcomp/tensor.hpp"
#include "ctxcomp/vocab.hpp"

namespace ctxcomp::nn {

// Decoder-only transformer: pre-norm RMS, rotary positions, grouped
// key/value heads, gated SiLU MLP, no biases, untied output head.
struct ModelConfig {
  int hidden_size = 128;
  int intermediate_size = 256;
  int n_layers = 4;
  int n_heads = 8;
  int n_kv_heads = 4;
  int vocab_size = Vocab::kSize;
  int max_position = 512;
  std::string tier = "custom";

  int head_dim() const { return hidden_size / n_heads; }
  int kv_dim() const { return head_dim() * n_kv_heads; }

  void validate() const;

  // Closed-form parameter count; asserted against the actual tensor sum
  // whenever a model is built.
  std::uint64_t param_count() const;
  std::uint64_t nonembedding_param_count() const;

  // Desk-scale tiers T1..T4 with monotone depth/width growth.
  static ModelConfig tier_config(const std::string& tier);

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
  Mat<T> attn_norm;  // 1 x h
  Mat<T> wq;         // h x h
  Mat<T> wk;         // h x kv_dim
  Mat<T> wv;         // h x kv_dim
  Mat<T> wo;         // h x h
  Mat<T> mlp_norm;   // 1 x h
  Mat<T> w_gate;     // h x inter
  Mat<T> w_up;       // h x inter
  Mat<T> w_down;     // inter x h
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  std::string provenance;  // dataset id after pretraining, else empty
  Mat<T> tok_emb;  // vocab x h
  std::vector<LayerParams<T>> layers;
  Mat<T> final_norm;  // 1 x h
  Mat<T> lm_head;     // h x vocab

  static ModelParams<T> init(const ModelConfig& cfg, std::uint64_t seed);
  static ModelParams<T> zeros_like(const ModelParams<T>& other);

  std::uint64_t actual_param_count() const;
  bool all_finite() const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.cfg = cfg;
    out.provenance = provenance;
    out.tok_emb = tok_emb.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.layers[i].attn_norm = layers[i].attn_norm.template cast<U>();
      out.layers[i].wq = layers[i].wq.template cast<U>();
      out.layers[i].wk = layers[i].wk.template cast<U>();
      out.layers[i].wv = layers[i].wv.template cast<U>();
      out.layers[i].wo = layers[i].wo.template cast<U>();
      out.layers[i].mlp_norm = layers[i].mlp_norm.template cast<U>();
      out.layers[i].w_gate = layers[i].w_gate.template cast<U>();
      out.layers[i].w_up = layers[i].w_up.template cast<U>();
      out.layers[i].w_down = layers[i].w_down.template cast<U>();
    }
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    return out;
  }
};

// Gradients share the parameter layout exactly.
template <typename T>
using Gradients = ModelParams<T>;

// Visits every tensor in declared order. The order defines the checkpoint
// layout and the integrity digest, so it must never change.
template <typename T, typename Fn>
void visit_tensors(ModelParams<T>& p, Fn&& fn) {
  fn("tok_emb", p.tok_emb);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    fn(prefix + "attn_norm", p.layers[i].attn_norm);
    fn(prefix + "wq", p.layers[i].wq);
    fn(prefix + "wk", p.layers[i].wk);
    fn(prefix + "wv", p.layers[i].wv);
    fn(prefix + "wo", p.layers[i].wo);
    fn(prefix + "mlp_norm", p.layers[i].mlp_norm);
    fn(prefix + "w_gate", p.layers[i].w_gate);
    fn(prefix + "w_up", p.layers[i].w_up);
    fn(prefix + "w_down", p.layers[i].w_down);
  }
  fn("final_norm", p.final_norm);
  fn("lm_head", p.lm_head);
}

template <typename T, typename Fn>
void visit_tensors(const ModelParams<T>& p, Fn&& fn) {
  visit_tensors(const_cast<ModelParams<T>&>(p),
                [&](const std::string& name, Mat<T>& m) { fn(name, static_cast<const Mat<T>&>(m)); });
}

constexpr double kNormEps = 1e-5;
constexpr double kRopeBase = 10000.0;

template <typename T>
struct LayerCache {
  Mat<T> x_in;           // rows x h, input to the layer
  Mat<T> attn_norm_out;  // rows x h
  std::vector<T> attn_inv_rms;
  Mat<T> q;      // rows x h, post-RoPE
  Mat<T> k;      // rows x kv_dim, post-RoPE
  Mat<T> v;      // rows x kv_dim
  Mat<T> probs;  // (batch*n_heads*seq) x seq, causal softmax rows
  Mat<T> att_mix;  // rows x h, concatenated head outputs before wo
  Mat<T> x_mid;    // rows x h, after attention residual
  Mat<T> mlp_norm_out;  // rows x h
  std::vector<T> mlp_inv_rms;
  Mat<T> gate_pre;  // rows x inter
  Mat<T> up;        // rows x inter
  Mat<T> act;       // rows x inter, silu(gate_pre) * up
};

// Activations recorded by forward() for one batch; consumed by backward().
template <typename T>
struct ForwardCache {
  int batch = 0;
  int seq = 0;
  Mat<T> x0;  // embedding-level input, (batch*seq) x h
  std::vector<LayerCache<T>> layers;
  Mat<T> final_in;  // residual stream entering the final norm
  Mat<T> final_norm_out;
  std::vector<T> final_inv_rms;
  bool consumed = false;

  const Mat<T>& hidden() const { return final_norm_out; }
};

// Embedding-level forward over `batch` sequences of length `seq` packed
// row-wise into x. RoPE positions restart at 0 per sequence. Causal.
template <typename T>
void forward(const ModelParams<T>& p, const Mat<T>& x, int batch, int seq,
             ForwardCache<T>& cache);

template <typename T>
void logits_from_hidden(const ModelParams<T>& p, const Mat<T>& hidden, Mat<T>& logits);

// Reverse-mode gradients. d_logits is the gradient at the lm head output.
// dx, when given, receives the gradient at the embedding-level input (the
// compressor routes slot/memory gradients through it). A cache can back
// exactly one backward pass.
template <typename T>
void backward_from_logits(const ModelParams<T>& p, ForwardCache<T>& cache,
                          const Mat<T>& d_logits, Gradients<T>& grads,
                          std::type_identity_t<Mat<T>*> dx,
                          bool param_grads = true);

// Same, but starting from a gradient at the final-norm output; the encoder
// side of the compressor reads hidden states directly, bypassing the head.
template <typename T>
void backward_from_hidden(const ModelParams<T>& p, ForwardCache<T>& cache,
                          const Mat<T>& d_hidden, Gradients<T>& grads,
                          std::type_identity_t<Mat<T>*> dx,
                          bool param_grads = true);

// Token lookup into rows [row_offset, row_offset+tokens.size()) of x.
template <typename T>
void embed_tokens(const ModelParams<T>& p, std::span<const Token> tokens, Mat<T>& x,
                  int row_offset = 0);

template <typename T>
void scatter_embedding_grad(Gradients<T>& grads, std::span<const Token> tokens,
                            const Mat<T>& dx, int row_offset = 0);

// Single-sequence causal LM forward: logits for `tokens` with optional
// extra embedding-level vectors appended after the token positions.
template <typename T>
Mat<T> forward_lm(const ModelParams<T>& p, std::span<const Token> tokens,
                  std::type_identity_t<const Mat<T>*> extra_embeddings = nullptr);

// Mean negative log-likelihood in nats over masked positions, with the
// analytic gradient (softmax - onehot)/count written to d_logits when
// requested. Rows align with logits rows.
template <typename T>
double nll_loss(const Mat<T>& logits, std::span<const Token> targets,
                std::span<const std::uint8_t> mask, std::type_identity_t<Mat<T>*> d_logits);

// Incremental decoding state: per-layer K/V history for `batch` parallel
// sequences. Used for greedy reconstruction; training never touches it.
template <typename T>
struct DecodeState {
  int batch = 0;
  int capacity = 0;
  int pos = 0;  // tokens consumed so far
  std::vector<Mat<T>> k_hist;  // per layer, (batch*capacity) x kv_dim
  std::vector<Mat<T>> v_hist;

  DecodeState(const ModelConfig& cfg, int batch, int capacity);
};

// Appends one embedding-level input per sequence (x: batch x h) and returns
// logits (batch x vocab) at the new position.
template <typename T>
void decode_step(const ModelParams<T>& p, const Mat<T>& x, DecodeState<T>& state,
                 Mat<T>& logits);

}  // namespace ctxcomp::nn
