#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "ctxcomp/model.hpp"
#include "ctxcomp/rng.hpp"

using namespace ctxcomp;
using namespace ctxcomp::nn;

namespace {

// Straight-line scalar re-implementation of the forward pass, kept free of
// BLAS and of any code shared with the production path. Used as the
// independent oracle.
struct NaiveForward {
  const ModelParams<double>& p;

  std::vector<double> rmsnorm(const std::vector<double>& x, const Mat<double>& w) const {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    const double s = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + kNormEps);
    std::vector<double> y(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) y[j] = x[j] * w.data[j] * s;
    return y;
  }

  std::vector<double> linear(const std::vector<double>& x, const Mat<double>& w) const {
    std::vector<double> y(static_cast<std::size_t>(w.cols), 0.0);
    for (int i = 0; i < w.rows; ++i)
      for (int j = 0; j < w.cols; ++j) y[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(i)] * w.at(i, j);
    return y;
  }

  void rope(std::vector<double>& v, int pos, int head_dim) const {
    const int heads = static_cast<int>(v.size()) / head_dim;
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < head_dim / 2; ++i) {
        const double freq = std::pow(kRopeBase, -2.0 * i / head_dim);
        const double c = std::cos(pos * freq), s = std::sin(pos * freq);
        double& a = v[static_cast<std::size_t>(h * head_dim + 2 * i)];
        double& b = v[static_cast<std::size_t>(h * head_dim + 2 * i + 1)];
        const double a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }

  // logits for every position of a single sequence of embeddings
  std::vector<std::vector<double>> run(const std::vector<std::vector<double>>& x_in) const {
    const auto& cfg = p.cfg;
    const int T = static_cast<int>(x_in.size());
    const int hd = cfg.head_dim(), nh = cfg.n_heads, group = nh / cfg.n_kv_heads;
    std::vector<std::vector<double>> x = x_in;

    for (int li = 0; li < cfg.n_layers; ++li) {
      const auto& lp = p.layers[li];
      std::vector<std::vector<double>> q(T), k(T), v(T);
      for (int t = 0; t < T; ++t) {
        const auto normed = rmsnorm(x[t], lp.attn_norm);
        q[t] = linear(normed, lp.wq);
        k[t] = linear(normed, lp.wk);
        v[t] = linear(normed, lp.wv);
        rope(q[t], t, hd);
        rope(k[t], t, hd);
      }
      for (int t = 0; t < T; ++t) {
        std::vector<double> mix(static_cast<std::size_t>(cfg.hidden_size), 0.0);
        for (int h = 0; h < nh; ++h) {
          const int kvh = h / group;
          std::vector<double> scores(static_cast<std::size_t>(t) + 1);
          for (int u = 0; u <= t; ++u) {
            double dot = 0.0;
            for (int j = 0; j < hd; ++j)
              dot += q[t][static_cast<std::size_t>(h * hd + j)] * k[u][static_cast<std::size_t>(kvh * hd + j)];
            scores[static_cast<std::size_t>(u)] = dot / std::sqrt(static_cast<double>(hd));
          }
          double mx = scores[0];
          for (double s : scores) mx = std::max(mx, s);
          double denom = 0.0;
          for (double& s : scores) {
            s = std::exp(s - mx);
            denom += s;
          }
          for (int u = 0; u <= t; ++u)
            for (int j = 0; j < hd; ++j)
              mix[static_cast<std::size_t>(h * hd + j)] +=
                  scores[static_cast<std::size_t>(u)] / denom * v[u][static_cast<std::size_t>(kvh * hd + j)];
        }
        const auto proj = linear(mix, lp.wo);
        for (int j = 0; j < cfg.hidden_size; ++j) x[t][static_cast<std::size_t>(j)] += proj[static_cast<std::size_t>(j)];
      }
      for (int t = 0; t < T; ++t) {
        const auto normed = rmsnorm(x[t], lp.mlp_norm);
        const auto gate = linear(normed, lp.w_gate);
        const auto up = linear(normed, lp.w_up);
        std::vector<double> act(gate.size());
        for (std::size_t i = 0; i < gate.size(); ++i)
          act[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
        const auto down = linear(act, lp.w_down);
        for (int j = 0; j < cfg.hidden_size; ++j) x[t][static_cast<std::size_t>(j)] += down[static_cast<std::size_t>(j)];
      }
    }
    std::vector<std::vector<double>> logits(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) logits[static_cast<std::size_t>(t)] = linear(rmsnorm(x[t], p.final_norm), p.lm_head);
    return logits;
  }
};

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.hidden_size = 16;
  cfg.intermediate_size = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.max_position = 64;
  cfg.tier = "tiny";
  return cfg;
}

TokenSequence random_tokens(Rng& rng, int n, int vocab = Vocab::kSize) {
  TokenSequence t(static_cast<std::size_t>(n));
  for (auto& v : t) v = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

}  // namespace

TEST_CASE("parameter count formula matches the tensor sum for every tier") {
  for (const char* tier : {"T1", "T2", "T3", "T4"}) {
    const ModelConfig cfg = ModelConfig::tier_config(tier);
    const auto params = ModelParams<float>::init(cfg, 1);
    CHECK(params.actual_param_count() == cfg.param_count());
  }
  // and the tiers grow monotonically
  CHECK(ModelConfig::tier_config("T1").param_count() < ModelConfig::tier_config("T2").param_count());
  CHECK(ModelConfig::tier_config("T2").param_count() < ModelConfig::tier_config("T3").param_count());
  CHECK(ModelConfig::tier_config("T3").param_count() < ModelConfig::tier_config("T4").param_count());
  CHECK_THROWS_AS(ModelConfig::tier_config("T9"), ConfigError);
}

TEST_CASE("zero-initialized params give all-equal logits per position") {
  const ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 3);
  visit_tensors(params, [](const std::string&, Mat<float>& m) { m.zero(); });
  Rng rng(4);
  const TokenSequence toks = random_tokens(rng, 8);
  const Mat<float> logits = forward_lm(params, toks);
  for (int r = 0; r < logits.rows; ++r)
    for (int j = 1; j < logits.cols; ++j) CHECK(logits.at(r, j) == logits.at(r, 0));
}

TEST_CASE("causality: perturbing a future token leaves earlier logits unchanged") {
  const ModelConfig cfg = tiny_config();
  const auto params = ModelParams<float>::init(cfg, 5);
  Rng rng(6);
  TokenSequence toks = random_tokens(rng, 12);
  const Mat<float> base = forward_lm(params, toks);
  for (int j : {4, 7, 11}) {
    TokenSequence mod = toks;
    mod[static_cast<std::size_t>(j)] = (mod[static_cast<std::size_t>(j)] + 17) % Vocab::kSize;
    const Mat<float> out = forward_lm(params, mod);
    for (int r = 0; r < j; ++r)
      for (int c = 0; c < out.cols; ++c) CHECK(out.at(r, c) == base.at(r, c));
  }
}

TEST_CASE("forward matches the straight-line oracle in 64-bit") {
  const ModelConfig cfg = tiny_config();
  const auto params64 = ModelParams<double>::init(cfg, 11);
  Rng rng(12);
  const TokenSequence toks = random_tokens(rng, 9);

  const Mat<double> logits = forward_lm(params64, toks);

  NaiveForward oracle{params64};
  std::vector<std::vector<double>> x;
  for (Token t : toks) {
    std::vector<double> row(static_cast<std::size_t>(cfg.hidden_size));
    for (int j = 0; j < cfg.hidden_size; ++j) row[static_cast<std::size_t>(j)] = params64.tok_emb.at(static_cast<int>(t), j);
    x.push_back(row);
  }
  const auto expected = oracle.run(x);

  for (int r = 0; r < logits.rows; ++r) {
    for (int c = 0; c < logits.cols; ++c) {
      const double a = logits.at(r, c), b = expected[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      const double rel = std::abs(a - b) / std::max(1e-12, std::abs(a) + std::abs(b));
      CHECK(rel < 1e-5);
    }
  }
}

TEST_CASE("32-bit forward tracks the 64-bit oracle") {
  const ModelConfig cfg = tiny_config();
  const auto params64 = ModelParams<double>::init(cfg, 21);
  const auto params32 = params64.cast<float>();
  Rng rng(22);
  const TokenSequence toks = random_tokens(rng, 9);
  const Mat<double> l64 = forward_lm(params64, toks);
  const Mat<float> l32 = forward_lm(params32, toks);
  for (int r = 0; r < l64.rows; ++r)
    for (int c = 0; c < l64.cols; ++c)
      CHECK(std::abs(static_cast<double>(l32.at(r, c)) - l64.at(r, c)) < 2e-4);
}

TEST_CASE("uniform logits give ln(vocab) nats") {
  Mat<float> logits(3, Vocab::kSize);  // all zeros: uniform
  std::vector<Token> targets = {1, 100, 259};
  std::vector<std::uint8_t> mask = {1, 1, 1};
  const double loss = nll_loss(logits, targets, mask, nullptr);
  CHECK(loss == doctest::Approx(std::log(260.0)).epsilon(1e-9));
}

TEST_CASE("one-hot logits drive the loss to zero") {
  Mat<float> logits(2, Vocab::kSize);
  std::vector<Token> targets = {7, 9};
  for (int r = 0; r < 2; ++r) logits.at(r, static_cast<int>(targets[static_cast<std::size_t>(r)])) = 60.0f;
  std::vector<std::uint8_t> mask = {1, 1};
  CHECK(nll_loss(logits, targets, mask, nullptr) < 1e-9);
}

TEST_CASE("nll matches a hand-computed softmax chain on a random 3-token case") {
  Rng rng(31);
  Mat<double> logits(3, 5);
  for (auto& v : logits.data) v = rng.gaussian();
  std::vector<Token> targets = {2, 0, 4};
  std::vector<std::uint8_t> mask = {1, 1, 1};

  double expected = 0.0;
  for (int r = 0; r < 3; ++r) {
    double denom = 0.0;
    for (int j = 0; j < 5; ++j) denom += std::exp(logits.at(r, j));
    expected += -std::log(std::exp(logits.at(r, static_cast<int>(targets[static_cast<std::size_t>(r)]))) / denom);
  }
  expected /= 3.0;
  CHECK(nll_loss(logits, targets, mask, nullptr) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("empty mask is a degenerate batch") {
  Mat<float> logits(2, Vocab::kSize);
  std::vector<Token> targets = {1, 2};
  std::vector<std::uint8_t> mask = {0, 0};
  CHECK_THROWS_AS(nll_loss(logits, targets, mask, nullptr), NumericError);
}

TEST_CASE("gradient of nll w.r.t. logits equals softmax minus onehot") {
  Rng rng(41);
  Mat<double> logits(4, 7);
  for (auto& v : logits.data) v = rng.gaussian();
  std::vector<Token> targets = {1, 3, 0, 6};
  std::vector<std::uint8_t> mask = {1, 0, 1, 1};  // one masked row
  Mat<double> d;
  nll_loss(logits, targets, mask, &d);

  for (int r = 0; r < 4; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) {
      for (int j = 0; j < 7; ++j) CHECK(d.at(r, j) == 0.0);
      continue;
    }
    double denom = 0.0;
    for (int j = 0; j < 7; ++j) denom += std::exp(logits.at(r, j));
    for (int j = 0; j < 7; ++j) {
      const double soft = std::exp(logits.at(r, j)) / denom;
      const double onehot = (static_cast<Token>(j) == targets[static_cast<std::size_t>(r)]) ? 1.0 : 0.0;
      CHECK(d.at(r, j) == doctest::Approx((soft - onehot) / 3.0).epsilon(1e-9));
    }
  }
}

namespace {

// scalar loss of a full forward+nll for finite differencing
double loss_of(const ModelParams<double>& params, const std::vector<Token>& inputs,
               const std::vector<Token>& targets, int batch, int seq) {
  Mat<double> x(batch * seq, params.cfg.hidden_size);
  embed_tokens(params, std::span<const Token>(inputs), x, 0);
  ForwardCache<double> cache;
  forward(params, x, batch, seq, cache);
  Mat<double> logits;
  logits_from_hidden(params, cache.hidden(), logits);
  std::vector<std::uint8_t> mask(inputs.size(), 1);
  return nll_loss(logits, std::span<const Token>(targets), mask, nullptr);
}

}  // namespace

TEST_CASE("finite-difference agreement on random coordinates of a T1 model") {
  const ModelConfig cfg = ModelConfig::tier_config("T1");
  auto params = ModelParams<double>::init(cfg, 77);
  Rng rng(78);
  const int batch = 2, seq = 8;
  std::vector<Token> inputs, targets;
  for (int i = 0; i < batch * seq; ++i) {
    inputs.push_back(static_cast<Token>(rng.below(Vocab::kSize)));
    targets.push_back(static_cast<Token>(rng.below(Vocab::kSize)));
  }

  // analytic gradients
  Mat<double> x(batch * seq, cfg.hidden_size);
  embed_tokens(params, std::span<const Token>(inputs), x, 0);
  ForwardCache<double> cache;
  forward(params, x, batch, seq, cache);
  Mat<double> logits, d_logits;
  logits_from_hidden(params, cache.hidden(), logits);
  std::vector<std::uint8_t> mask(inputs.size(), 1);
  nll_loss(logits, std::span<const Token>(targets), mask, &d_logits);
  Gradients<double> grads = ModelParams<double>::zeros_like(params);
  Mat<double> dx;
  backward_from_logits(params, cache, d_logits, grads, &dx);
  scatter_embedding_grad(grads, std::span<const Token>(inputs), dx, 0);

  // collect (tensor, flat index) pairs
  std::vector<Mat<double>*> ptensors, gtensors;
  visit_tensors(params, [&](const std::string&, Mat<double>& m) { ptensors.push_back(&m); });
  visit_tensors(grads, [&](const std::string&, Mat<double>& m) { gtensors.push_back(&m); });

  const double h = 1e-3;
  int checked = 0;
  while (checked < 60) {
    const std::size_t ti = rng.below(ptensors.size());
    if (ptensors[ti]->size() == 0) continue;
    const std::size_t ei = rng.below(ptensors[ti]->size());
    const double orig = ptensors[ti]->data[ei];
    ptensors[ti]->data[ei] = orig + h;
    const double lp = loss_of(params, inputs, targets, batch, seq);
    ptensors[ti]->data[ei] = orig - h;
    const double lm = loss_of(params, inputs, targets, batch, seq);
    ptensors[ti]->data[ei] = orig;
    const double numeric = (lp - lm) / (2.0 * h);
    const double analytic = gtensors[ti]->data[ei];
    if (std::abs(numeric) < 1e-10 && std::abs(analytic) < 1e-10) continue;
    const double rel = std::abs(numeric - analytic) / std::max(1e-8, std::abs(numeric) + std::abs(analytic));
    CHECK(rel < 1e-4);
    ++checked;
  }
}

TEST_CASE("loss independent of a parameter gives exactly zero gradient") {
  const ModelConfig cfg = tiny_config();
  auto params = ModelParams<double>::init(cfg, 91);
  // token 123 never appears in the input
  std::vector<Token> inputs = {1, 2, 3, 4};
  std::vector<Token> targets = {2, 3, 4, 5};
  Mat<double> x(4, cfg.hidden_size);
  embed_tokens(params, std::span<const Token>(inputs), x, 0);
  ForwardCache<double> cache;
  forward(params, x, 1, 4, cache);
  Mat<double> logits, d_logits;
  logits_from_hidden(params, cache.hidden(), logits);
  std::vector<std::uint8_t> mask = {1, 1, 1, 1};
  nll_loss(logits, std::span<const Token>(targets), mask, &d_logits);
  Gradients<double> grads = ModelParams<double>::zeros_like(params);
  Mat<double> dx;
  backward_from_logits(params, cache, d_logits, grads, &dx);
  scatter_embedding_grad(grads, std::span<const Token>(inputs), dx, 0);
  for (int j = 0; j < cfg.hidden_size; ++j) CHECK(grads.tok_emb.at(123, j) == 0.0);
}

TEST_CASE("graph reuse after consumption is a lifecycle error") {
  const ModelConfig cfg = tiny_config();
  const auto params = ModelParams<float>::init(cfg, 13);
  Mat<float> x(4, cfg.hidden_size);
  std::vector<Token> toks = {9, 8, 7, 6};
  embed_tokens(params, std::span<const Token>(toks), x, 0);
  ForwardCache<float> cache;
  forward(params, x, 1, 4, cache);
  Mat<float> d_logits(4, cfg.vocab_size);
  Gradients<float> grads = ModelParams<float>::zeros_like(params);
  backward_from_logits(params, cache, d_logits, grads, nullptr);
  CHECK_THROWS_AS(backward_from_logits(params, cache, d_logits, grads, nullptr),
                  ContractError);
}

TEST_CASE("position overflow raises a capacity error") {
  ModelConfig cfg = tiny_config();
  cfg.max_position = 8;
  const auto params = ModelParams<float>::init(cfg, 1);
  Rng rng(2);
  const TokenSequence toks = random_tokens(rng, 9);
  CHECK_THROWS_AS(forward_lm(params, toks), CapacityError);
}

TEST_CASE("extra embeddings append after the token positions") {
  const ModelConfig cfg = tiny_config();
  const auto params = ModelParams<float>::init(cfg, 55);
  Rng rng(56);
  const TokenSequence toks = random_tokens(rng, 5);
  Mat<float> extra(3, cfg.hidden_size);
  extra.fill_gaussian(rng, 0.1);
  const Mat<float> logits = forward_lm(params, toks, &extra);
  CHECK(logits.rows == 8);
  CHECK(logits.cols == cfg.vocab_size);

  // appended positions see the tokens: zeroing a token changes their logits
  TokenSequence toks2 = toks;
  toks2[0] = (toks2[0] + 1) % 256;
  const Mat<float> logits2 = forward_lm(params, toks2, &extra);
  bool any_diff = false;
  for (int c = 0; c < logits.cols; ++c)
    any_diff = any_diff || logits.at(7, c) != logits2.at(7, c);
  CHECK(any_diff);
}

TEST_CASE("incremental decode matches the batch forward") {
  const ModelConfig cfg = tiny_config();
  const auto params = ModelParams<double>::init(cfg, 61);
  Rng rng(62);
  const int T = 10;
  const TokenSequence toks = random_tokens(rng, T);

  const Mat<double> full = forward_lm(params, toks);

  DecodeState<double> state(cfg, 1, T);
  Mat<double> x(1, cfg.hidden_size), logits;
  for (int t = 0; t < T; ++t) {
    embed_tokens(params, std::span<const Token>(toks.data() + t, 1), x, 0);
    decode_step(params, x, state, logits);
    for (int c = 0; c < logits.cols; ++c)
      CHECK(std::abs(logits.at(0, c) - full.at(t, c)) < 1e-9);
  }
}
