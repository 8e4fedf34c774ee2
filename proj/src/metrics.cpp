#include "ctxcomp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "ctxcomp/errors.hpp"

namespace ctxcomp::eval {

double token_f1(std::span<const Token> pred, std::span<const Token> ref) {
  if (ref.empty()) throw ContractError("token_f1: empty reference");
  if (pred.empty()) return 0.0;
  std::unordered_map<Token, int> counts;
  for (Token t : ref) counts[t] += 1;
  std::size_t overlap = 0;
  for (Token t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      it->second -= 1;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 100.0 * 2.0 * p * r / (p + r);
}

double bleu4(std::span<const Token> pred, std::span<const Token> ref, double eps) {
  if (ref.empty()) throw ContractError("bleu4: empty reference");
  if (pred.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    std::map<std::vector<Token>, int> ref_grams;
    if (static_cast<int>(ref.size()) >= n) {
      for (std::size_t i = 0; i + n <= ref.size(); ++i)
        ref_grams[std::vector<Token>(ref.begin() + i, ref.begin() + i + n)] += 1;
    }
    double matched = 0.0;
    std::size_t total = 0;
    if (static_cast<int>(pred.size()) >= n) {
      std::map<std::vector<Token>, int> pred_grams;
      for (std::size_t i = 0; i + n <= pred.size(); ++i)
        pred_grams[std::vector<Token>(pred.begin() + i, pred.begin() + i + n)] += 1;
      for (const auto& [gram, c] : pred_grams) {
        total += static_cast<std::size_t>(c);
        auto it = ref_grams.find(gram);
        if (it != ref_grams.end()) matched += std::min(c, it->second);
      }
    }
    const double precision = (total > 0 && matched > 0)
                                 ? matched / static_cast<double>(total)
                                 : eps;  // smoothing floor for zero counts
    log_sum += 0.25 * std::log(precision);
  }
  const double bp = pred.size() >= ref.size()
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref.size()) /
                                             static_cast<double>(pred.size()));
  return 100.0 * bp * std::exp(log_sum);
}

double rouge_l(std::span<const Token> pred, std::span<const Token> ref) {
  if (ref.empty()) throw ContractError("rouge_l: empty reference");
  if (pred.empty()) return 0.0;
  const std::size_t n = pred.size(), m = ref.size();
  // two-row LCS table
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      if (pred[i - 1] == ref[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const std::size_t lcs = prev[m];
  if (lcs == 0) return 0.0;
  const double p = static_cast<double>(lcs) / static_cast<double>(n);
  const double r = static_cast<double>(lcs) / static_cast<double>(m);
  return 100.0 * 2.0 * p * r / (p + r);
}

ReconstructionReport score_reconstructions(std::span<const TokenSequence> preds,
                                           std::span<const TokenSequence> refs) {
  if (preds.size() != refs.size())
    throw ContractError("score_reconstructions: size mismatch");
  ReconstructionReport rep;
  rep.samples = preds.size();
  if (rep.samples == 0) return rep;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    rep.f1 += token_f1(preds[i], refs[i]);
    rep.bleu4 += bleu4(preds[i], refs[i]);
    rep.rouge_l += rouge_l(preds[i], refs[i]);
  }
  rep.f1 /= static_cast<double>(rep.samples);
  rep.bleu4 /= static_cast<double>(rep.samples);
  rep.rouge_l /= static_cast<double>(rep.samples);
  return rep;
}

namespace {

std::vector<double> average_ranks(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  const std::size_t n = xs.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw NumericError("correlate: degenerate variance, statistic undefined");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

CorrelationResult correlate(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ContractError("correlate: length mismatch");
  if (xs.size() < 3) throw ContractError("correlate: need at least 3 pairs");
  CorrelationResult res;
  res.n = xs.size();
  res.pearson_r = pearson(xs, ys);
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  res.spearman_rho = pearson(rx, ry);
  return res;
}

double sequence_bits_per_token(
    const std::function<std::vector<double>(std::span<const Token>)>& logits_fn,
    std::span<const Token> seq) {
  if (seq.size() < 2) throw ContractError("sequence entropy: need at least 2 tokens");
  double total_nats = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const std::vector<double> logits = logits_fn(seq.subspan(0, i));
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    const double lse = mx + std::log(denom);
    total_nats += lse - logits[static_cast<std::size_t>(seq[i])];
  }
  return total_nats / (static_cast<double>(seq.size() - 1) * std::log(2.0));
}

double per_token_entropy(const nn::ModelParams<float>& model, std::span<const Token> seq) {
  if (seq.size() < 2) throw ContractError("per_token_entropy: need at least 2 tokens");
  if (static_cast<int>(seq.size()) > model.cfg.max_position)
    throw CapacityError("per_token_entropy: sequence exceeds max_position");
  // one forward pass; logits at position i-1 predict token i
  Mat<float> logits = nn::forward_lm(model, seq.first(seq.size() - 1));
  double total_nats = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const float* row = logits.row(static_cast<int>(i - 1));
    double mx = row[0];
    for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < logits.cols; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(denom);
    total_nats += lse - static_cast<double>(row[seq[i]]);
  }
  return total_nats / (static_cast<double>(seq.size() - 1) * std::log(2.0));
}

std::vector<int> entropy_buckets(std::span<const double> entropies, int n_buckets) {
  if (n_buckets <= 0) throw ContractError("entropy_buckets: n_buckets must be > 0");
  const std::size_t n = entropies.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return entropies[a] < entropies[b];
  });
  std::vector<int> bucket(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    bucket[idx[r]] = static_cast<int>((r * static_cast<std::size_t>(n_buckets)) / n);
  }
  return bucket;
}

std::uint64_t flops_estimate(const nn::ModelConfig& cfg, std::uint64_t n_tokens, Phase) {
  const std::uint64_t linear = 2ULL * cfg.nonembedding_param_count() * n_tokens;
  const std::uint64_t attn = 2ULL * static_cast<std::uint64_t>(cfg.n_layers) *
                             static_cast<std::uint64_t>(cfg.hidden_size) * n_tokens * n_tokens;
  return linear + attn;
}

}  // namespace ctxcomp::eval
