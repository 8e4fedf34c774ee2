#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ctxcomp/model.hpp"
#include "ctxcomp/vocab.hpp"

namespace ctxcomp::eval {

// All reconstruction metrics are percentages in [0, 100] over token id
// sequences. ref must be non-empty; an empty pred scores 0.

// SQuAD-style token F1: multiset overlap, P = o/|pred|, R = o/|ref|.
double token_f1(std::span<const Token> pred, std::span<const Token> ref);

// BLEU with modified 1..4-gram precisions, uniform weights and brevity
// penalty. Zero counts (no matches, or |pred| < n) floor at eps so scores
// are reproducible bit for bit.
double bleu4(std::span<const Token> pred, std::span<const Token> ref, double eps = 1e-9);

// ROUGE-L F-measure (beta = 1) from the LCS length.
double rouge_l(std::span<const Token> pred, std::span<const Token> ref);

struct ReconstructionReport {
  double f1 = 0.0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  std::size_t samples = 0;
};

ReconstructionReport score_reconstructions(std::span<const TokenSequence> preds,
                                           std::span<const TokenSequence> refs);

struct CorrelationResult {
  double pearson_r = 0.0;
  double spearman_rho = 0.0;
  std::size_t n = 0;
};

// Pearson on values, Spearman on average ranks. Requires n >= 3 and
// non-degenerate variance on both axes.
CorrelationResult correlate(std::span<const double> xs, std::span<const double> ys);

// ---- model-measured input entropy ----

enum class EntropyMeasurer { encoder, decoder };

struct EntropyReport {
  double bits_per_token = 0.0;
  EntropyMeasurer measured_by = EntropyMeasurer::encoder;
  int bucket = -1;
};

// Mean -log2 P(w_i | w_<i) over positions i >= 2 given a next-token
// distribution provider: logits_fn(prefix) returns unnormalized logits for
// the next token. The transformer front-end and the analytic test oracles
// share this loop.
double sequence_bits_per_token(
    const std::function<std::vector<double>(std::span<const Token>)>& logits_fn,
    std::span<const Token> seq);

// Scores seq with the model run as a plain causal LM (no slots, no AE).
double per_token_entropy(const nn::ModelParams<float>& model, std::span<const Token> seq);

// Equal-count entropy buckets: samples sorted by entropy, split into
// n_buckets groups; returns bucket index per sample (input order).
std::vector<int> entropy_buckets(std::span<const double> entropies, int n_buckets);

// ---- compute cost ----

struct ComputeReport {
  std::uint64_t flops_compress = 0;
  std::uint64_t flops_generate = 0;
  double latency_compress_s = 0.0;
  double latency_generate_s = 0.0;
};

enum class Phase { compress, generate };

// Closed form, exact in integer arithmetic:
//   flops(n) = 2 * N_nonembed * n + 2 * n_layers * hidden * n^2
// where N_nonembed excludes the token embedding table (a lookup) and the
// quadratic term covers attention score/mix work over n positions. The
// same form serves both phases; the caller passes the phase-appropriate
// token count (prefill length vs. generated length).
std::uint64_t flops_estimate(const nn::ModelConfig& cfg, std::uint64_t n_tokens, Phase phase);

}  // namespace ctxcomp::eval
