// Acceptance suite: runs every gate criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Heavy criteria share one
// artifact home, so reruns reuse pretrained checkpoints and records.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "ctxcomp/compressor.hpp"
#include "ctxcomp/corpus.hpp"
#include "ctxcomp/labctl.hpp"
#include "ctxcomp/metrics.hpp"
#include "ctxcomp/tensor.hpp"
#include "ctxcomp/theory.hpp"
#include "ctxcomp/train.hpp"

#include "../oracles.hpp"

namespace fs = std::filesystem;
using namespace ctxcomp;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<Outcome> g_outcomes;

void run_criterion(const std::string& name, const std::function<std::pair<bool, std::string>()>& fn) {
  Outcome out;
  out.name = name;
  const auto t0 = Clock::now();
  try {
    auto [pass, detail] = fn();
    out.pass = pass;
    out.detail = detail;
  } catch (const std::exception& e) {
    out.pass = false;
    out.detail = std::string("exception: ") + e.what();
  }
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  std::printf("%s  %-28s %s  [%.1fs]\n", out.pass ? "PASS" : "FAIL", out.name.c_str(),
              out.detail.c_str(), out.seconds);
  std::fflush(stdout);
  g_outcomes.push_back(out);
}

std::string fmt(double v, int prec = 2) {
  char b[64];
  std::snprintf(b, sizeof(b), "%.*f", prec, v);
  return b;
}

// ---- budgets ----

lab::LabBudget acceptance_budget() {
  lab::LabBudget b;
  b.pretrain_tokens = 1500000;
  b.pretrain_seq_len = 64;
  b.pretrain_batch = 16;
  b.pretrain_warmup = 100;
  b.pretrain_max_lr = 3e-3;
  b.pretrain_min_lr = 3e-4;
  b.finetune_samples = 2000;
  b.finetune_epochs = 3;
  b.finetune_batch = 16;
  b.finetune_warmup = 50;
  b.finetune_max_lr = 3e-3;
  b.finetune_min_lr = 3e-4;
  b.finetune_weight_decay = 0.1;
  b.test_samples = 300;
  b.context_length = 64;
  b.ratio = 4;
  b.max_position = 160;
  b.base_seed = 1234;
  return b;
}

lab::LabBudget micro_budget() {
  lab::LabBudget b;
  b.pretrain_tokens = 65536;
  b.pretrain_seq_len = 32;
  b.pretrain_batch = 8;
  b.pretrain_warmup = 5;
  b.finetune_samples = 64;
  b.finetune_epochs = 1;
  b.finetune_batch = 8;
  b.finetune_warmup = 2;
  b.test_samples = 20;
  b.context_length = 32;
  b.ratio = 4;
  b.max_position = 64;
  b.base_seed = 77;
  return b;
}

std::string accept_home() {
  if (const char* env = std::getenv("CTXCOMP_ACCEPT_HOME")) return env;
  return "acceptance_home";
}

// ---- criterion bodies ----

std::pair<bool, std::string> gradient_correctness() {
  const nn::ModelConfig cfg = nn::ModelConfig::tier_config("T1");
  auto params = nn::ModelParams<double>::init(cfg, 2024);
  Rng rng(2025);
  const int batch = 2, seq = 8;
  std::vector<Token> inputs, targets;
  for (int i = 0; i < batch * seq; ++i) {
    inputs.push_back(static_cast<Token>(rng.below(Vocab::kSize)));
    targets.push_back(static_cast<Token>(rng.below(Vocab::kSize)));
  }
  const std::vector<std::uint8_t> mask(inputs.size(), 1);

  auto loss_of = [&]() {
    Mat<double> x(batch * seq, cfg.hidden_size);
    nn::embed_tokens(params, std::span<const Token>(inputs), x, 0);
    nn::ForwardCache<double> cache;
    nn::forward(params, x, batch, seq, cache);
    Mat<double> logits;
    nn::logits_from_hidden(params, cache.hidden(), logits);
    return nn::nll_loss(logits, std::span<const Token>(targets),
                        std::span<const std::uint8_t>(mask),
                        static_cast<Mat<double>*>(nullptr));
  };

  Mat<double> x(batch * seq, cfg.hidden_size);
  nn::embed_tokens(params, std::span<const Token>(inputs), x, 0);
  nn::ForwardCache<double> cache;
  nn::forward(params, x, batch, seq, cache);
  Mat<double> logits, d_logits;
  nn::logits_from_hidden(params, cache.hidden(), logits);
  nn::nll_loss(logits, std::span<const Token>(targets), std::span<const std::uint8_t>(mask),
               &d_logits);
  nn::Gradients<double> grads = nn::ModelParams<double>::zeros_like(params);
  Mat<double> dx;
  nn::backward_from_logits(params, cache, d_logits, grads, &dx);
  nn::scatter_embedding_grad(grads, std::span<const Token>(inputs), dx, 0);

  std::vector<Mat<double>*> pt, gt;
  nn::visit_tensors(params, [&](const std::string&, Mat<double>& m) { pt.push_back(&m); });
  nn::visit_tensors(grads, [&](const std::string&, Mat<double>& m) { gt.push_back(&m); });

  const double h = 1e-3;
  int checked = 0;
  double worst = 0.0;
  while (checked < 50) {
    const std::size_t ti = rng.below(pt.size());
    const std::size_t ei = rng.below(pt[ti]->size());
    const double orig = pt[ti]->data[ei];
    pt[ti]->data[ei] = orig + h;
    const double lp = loss_of();
    pt[ti]->data[ei] = orig - h;
    const double lm = loss_of();
    pt[ti]->data[ei] = orig;
    const double numeric = (lp - lm) / (2.0 * h);
    const double analytic = gt[ti]->data[ei];
    if (std::abs(numeric) < 1e-10 && std::abs(analytic) < 1e-10) continue;
    const double rel =
        std::abs(numeric - analytic) / std::max(1e-8, std::abs(numeric) + std::abs(analytic));
    worst = std::max(worst, rel);
    ++checked;
  }
  return {worst < 1e-4, "50 coordinates, worst rel err " + fmt(worst, 8)};
}

std::pair<bool, std::string> metric_oracles() {
  Rng rng(31337);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Token alphabet = static_cast<Token>(2 + rng.below(12));
    auto make = [&](std::size_t lo, std::size_t hi) {
      TokenSequence s(lo + rng.below(hi - lo + 1));
      for (auto& t : s) t = static_cast<Token>(rng.below(alphabet));
      return s;
    };
    const TokenSequence pred = make(1, 64), ref = make(1, 64);
    worst = std::max(worst, std::abs(eval::token_f1(pred, ref) - oracles::oracle_f1(pred, ref)));
    worst = std::max(worst, std::abs(eval::bleu4(pred, ref) - oracles::oracle_bleu4(pred, ref)));
    worst = std::max(worst,
                     std::abs(eval::rouge_l(pred, ref) - oracles::oracle_rouge_l(pred, ref)));
  }
  return {worst < 1e-9, "1000 pairs, worst |delta| " + fmt(worst, 12)};
}

std::pair<bool, std::string> theory_suite() {
  auto h2 = [](double p) {
    if (p <= 0.0 || p >= 1.0) return 0.0;
    return -p * std::log2(p) - (1 - p) * std::log2(1 - p);
  };
  double worst_grid = 0.0;
  for (double p : {0.1, 0.2, 0.3, 0.4, 0.5}) {
    for (double frac : {0.05, 0.2, 0.4, 0.6, 0.8}) {
      const double d = frac * p;
      const auto res = theory::blahut_arimoto(theory::DiscreteSource({1 - p, p}),
                                              theory::DistortionSpec::hamming(2), d);
      worst_grid = std::max(worst_grid, std::abs(res.rate_bits - (h2(p) - h2(d))));
    }
  }

  Rng rng(404);
  auto random_source = [&](std::size_t n) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (auto& v : p) {
      v = rng.uniform() + 1e-3;
      sum += v;
    }
    for (auto& v : p) v /= sum;
    double s2 = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) s2 += p[i];
    p[n - 1] = 1.0 - s2;
    return theory::DiscreteSource(p);
  };

  double worst_res = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng.below(30);
    const auto rep = theory::ce_decomposition(random_source(n), random_source(n));
    worst_res = std::max(worst_res, rep.residual);
  }

  double worst_r0 = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto src = random_source(2 + rng.below(7));
    const double h = theory::lossless_rate(src);  // asserts BA(0) internally
    const auto ba = theory::blahut_arimoto(src, theory::DistortionSpec::hamming(src.size()), 0.0);
    worst_r0 = std::max(worst_r0, std::abs(h - ba.rate_bits));
  }

  const bool pass = worst_grid < 1e-4 && worst_res < 1e-10 && worst_r0 < 1e-3;
  return {pass, "grid err " + fmt(worst_grid, 7) + ", CE residual " + fmt(worst_res, 13) +
                    ", R(0) err " + fmt(worst_r0, 7)};
}

std::pair<bool, std::string> flops_accounting(const std::string& home) {
  for (const char* tier : {"T1", "T2", "T3", "T4"}) {
    const auto cfg = nn::ModelConfig::tier_config(tier);
    for (std::uint64_t n : {1ULL, 64ULL, 160ULL, 4096ULL}) {
      const std::uint64_t expect =
          2ULL * cfg.nonembedding_param_count() * n +
          2ULL * static_cast<std::uint64_t>(cfg.n_layers) *
              static_cast<std::uint64_t>(cfg.hidden_size) * n * n;
      if (eval::flops_estimate(cfg, n, eval::Phase::compress) != expect)
        return {false, std::string("closed-form mismatch at ") + tier};
      if (eval::flops_estimate(cfg, n, eval::Phase::generate) != expect)
        return {false, std::string("closed-form mismatch at ") + tier};
    }
  }

  // scatter regeneration: synthetic rq4 records carrying real estimates
  lab::LabBudget budget = acceptance_budget();
  auto plan = lab::plan_from_preset("rq4_flops", budget);
  std::vector<lab::RunRecord> recs;
  double f1 = 80.0;
  for (const auto& row : plan.rows) {
    const auto enc_cfg = nn::ModelConfig::tier_config(row.enc_tier);
    const auto dec_cfg = nn::ModelConfig::tier_config(row.dec_tier);
    const int L = budget.context_length, k = L / budget.ratio;
    lab::RunRecord r;
    r["schema"] = 1;
    r["fingerprint"] = lab::row_fingerprint(row, budget);
    r["status"] = "ok";
    r["row"] = {{"enc_ds", row.enc_ds},   {"enc_tier", row.enc_tier},
                {"dec_ds", row.dec_ds},   {"dec_tier", row.dec_tier},
                {"ft_ds", row.ft_ds},     {"eval_ds", row.eval_ds},
                {"seed", row.seed}};
    r["recon"] = {{"f1", f1}, {"bleu4", f1 / 2}, {"rouge_l", f1 - 3}, {"samples", 100}};
    r["compute"] = {{"flops_compress", eval::flops_estimate(enc_cfg, L + k, eval::Phase::compress)},
                    {"flops_generate",
                     eval::flops_estimate(dec_cfg, k + 1 + L, eval::Phase::generate)}};
    recs.push_back(r);
    f1 -= 2.0;
  }
  const auto report = lab::analyze(recs, plan);
  const std::string out_dir = home + "/reports";
  const auto files1 = lab::emit(report, "svg", out_dir);
  std::ifstream f1s(files1[0], std::ios::binary);
  std::string first((std::istreambuf_iterator<char>(f1s)), std::istreambuf_iterator<char>());
  const auto files2 = lab::emit(report, "svg", out_dir);
  std::ifstream f2s(files2[0], std::ios::binary);
  std::string second((std::istreambuf_iterator<char>(f2s)), std::istreambuf_iterator<char>());
  if (first != second || first.empty()) return {false, "svg scatter not byte-identical"};
  return {true, "integer closed form exact for T1..T4; scatter regeneration byte-identical"};
}

std::pair<bool, std::string> rq1_entropy_trend(const std::string& home) {
  const lab::LabBudget budget = acceptance_budget();
  const auto plan = lab::plan_from_preset("rq1_entropy", budget);
  lab::RunResources res;
  res.home = home;
  const auto records = lab::run_plan(plan, res);
  const auto report = lab::analyze(records, plan);
  if (!report.warnings.empty()) return {false, "incomplete: " + report.warnings.front()};
  const double rho_enc = report.payload["encoder_curve"]["spearman_rho"].get<double>();
  const double rho_dec = report.payload["decoder_curve"]["spearman_rho"].get<double>();
  lab::emit(report, "svg", home + "/reports");
  lab::emit(report, "csv", home + "/reports");
  return {rho_enc <= -0.5, "rho_enc " + fmt(rho_enc, 3) + " (<= -0.5 required); rho_dec " +
                               fmt(rho_dec, 3) + " reported, unconstrained"};
}

std::pair<bool, std::string> rq1_gap_trend(const std::string& home) {
  const lab::LabBudget budget = acceptance_budget();
  const auto plan = lab::plan_from_preset("rq1_gap", budget);
  lab::RunResources res;
  res.home = home;
  const auto records = lab::run_plan(plan, res);
  const auto report = lab::analyze(records, plan);
  if (!report.warnings.empty()) return {false, "incomplete: " + report.warnings.front()};
  lab::emit(report, "svg", home + "/reports");
  lab::emit(report, "md", home + "/reports");
  std::string f1s = "F1 over D1..D6:";
  for (const auto& r : report.payload["gap_curve"])
    f1s += " " + fmt(r["f1"].get<double>(), 1);
  return {report.verdict("downward_trend"), f1s};
}

std::pair<bool, std::string> rq2_ordering(const std::string& home) {
  const lab::LabBudget budget = acceptance_budget();
  const auto plan = lab::plan_from_preset("rq2_alignment", budget);
  lab::RunResources res;
  res.home = home;
  const auto records = lab::run_plan(plan, res);
  const auto report = lab::analyze(records, plan);
  if (!report.warnings.empty()) return {false, "incomplete: " + report.warnings.front()};
  lab::emit(report, "md", home + "/reports");
  const auto& f1 = report.payload["f1"];
  return {report.verdict("decoder_dominance"),
          "aligned " + fmt(f1["aligned"].get<double>(), 1) + " > dec-aligned " +
              fmt(f1["decoder_aligned"].get<double>(), 1) + " > enc-aligned " +
              fmt(f1["encoder_aligned"].get<double>(), 1) + " (margins >= 1 F1)"};
}

std::pair<bool, std::string> rq5_collapse(const std::string& home) {
  const lab::LabBudget budget = acceptance_budget();
  const auto plan = lab::plan_from_preset("rq5_random", budget);
  lab::RunResources res;
  res.home = home;
  const auto records = lab::run_plan(plan, res);
  const auto report = lab::analyze(records, plan);
  if (!report.warnings.empty()) return {false, "incomplete: " + report.warnings.front()};
  lab::emit(report, "md", home + "/reports");
  const double aligned = report.payload["f1"]["aligned"].get<double>();
  const double rnd = report.payload["f1"]["random_decoder"].get<double>();
  return {report.verdict("collapse"), "random-decoder F1 " + fmt(rnd, 2) + " < 10, aligned " +
                                          fmt(aligned, 1) + " leads by " + fmt(aligned - rnd, 1)};
}

std::pair<bool, std::string> frozen_decoder_contract(const std::string& home) {
  // every autoencoder produced by the suite must still match its decoder
  // checkpoint digest exactly
  int checked = 0;
  for (const char* preset : {"rq1_entropy", "rq1_gap", "rq2_alignment", "rq5_random"}) {
    lab::RunResources res;
    res.home = home;
    for (const auto& rec : lab::load_records(lab::records_path(res, preset))) {
      if (rec.value("status", "") != "ok") continue;
      const std::string ae_path = home + "/" + rec["checkpoints"]["autoencoder"].get<std::string>();
      const std::string dec_path = home + "/" + rec["checkpoints"]["decoder"].get<std::string>();
      const auto ae = icae::load_autoencoder(ae_path);
      const auto dec = nn::load_checkpoint(dec_path);
      if (nn::tensor_digest(dec) != ae.decoder_digest)
        return {false, "digest drift for " + ae_path};
      ++checked;
    }
  }
  if (checked == 0) return {false, "no completed fine-tuning runs found"};
  return {true, std::to_string(checked) + " fine-tuned checkpoints, all decoder digests exact"};
}

std::pair<bool, std::string> harness_idempotence() {
  const std::string home_a = accept_home() + "_idem_a";
  const std::string home_b = accept_home() + "_idem_b";
  fs::remove_all(home_a);
  fs::remove_all(home_b);

  const lab::LabBudget budget = micro_budget();
  const auto plan = lab::plan_from_preset("rq1_gap", budget);  // 6 rows

  lab::RunResources res_a;
  res_a.home = home_a;
  const auto full = lab::run_plan(plan, res_a);

  lab::RunResources res_b;
  res_b.home = home_b;
  res_b.stop_after_rows = 3;  // killed after row 3
  lab::run_plan(plan, res_b);
  res_b.stop_after_rows = -1;
  const auto resumed = lab::run_plan(plan, res_b);

  if (full.size() != 6 || resumed.size() != 6) return {false, "row counts differ"};
  for (std::size_t i = 0; i < 6; ++i) {
    if (lab::canonical_record(full[i]) != lab::canonical_record(resumed[i]))
      return {false, "record " + std::to_string(i) + " differs after resume"};
  }
  // the store itself holds exactly one record per fingerprint
  const auto stored = lab::load_records(lab::records_path(res_b, "rq1_gap"));
  std::set<std::string> fps;
  for (const auto& r : stored)
    if (!fps.insert(r["fingerprint"].get<std::string>()).second)
      return {false, "duplicate fingerprint in the record store"};
  fs::remove_all(home_a);
  fs::remove_all(home_b);
  return {true, "6-row plan killed after 3 rows resumes to an identical record set"};
}

std::pair<bool, std::string> capacity_oracle(const std::string& home) {
  // singleton overfit against the real aligned checkpoints
  const lab::LabBudget budget = acceptance_budget();
  const std::string enc_path = lab::ensure_pretrain(home, "D1", "T2", budget);
  const std::string dec_path = lab::ensure_pretrain(home, "D1", "T2", budget);
  auto enc = nn::load_checkpoint(enc_path);
  auto dec = nn::load_checkpoint(dec_path);
  icae::FrozenDecoder frozen(dec);

  const auto ccfg = icae::CompressorConfig::with_ratio(16, 4);
  const auto samples =
      corpus::fixed_length_samples(corpus::build_dataset("D1", 4000, 4321).docs, 16, 1);
  icae::FinetuneOptions opts;
  opts.epochs = 700;
  opts.batch_size = 1;
  opts.max_lr = 1e-2;
  opts.min_lr = 1e-3;
  opts.warmup_steps = 30;
  opts.weight_decay = 0.0;
  std::vector<nn::TraceRow> trace;
  const auto ae = icae::finetune(enc, frozen, samples, ccfg, opts, 99, &trace);
  const double loss = icae::ae_loss(frozen, icae::encode(ae, samples[0]), samples[0], ccfg);
  const auto recon = icae::reconstruct(ae, frozen, samples[0]);
  const bool pass = loss < 0.05 && recon == samples[0];
  return {pass, "singleton ae loss " + fmt(loss, 4) + " nats (< 0.05), exact reconstruction " +
                    (recon == samples[0] ? "yes" : "no")};
}

std::pair<bool, std::string> distribution_fingerprint(const std::string& home) {
  const lab::LabBudget budget = acceptance_budget();
  const auto d1 = nn::load_checkpoint(lab::ensure_pretrain(home, "D1", "T2", budget));
  const auto d6 = nn::load_checkpoint(lab::ensure_pretrain(home, "D6", "T2", budget));
  const auto held = corpus::concat_tokens(corpus::build_dataset("D1", 60000, 9876).docs);
  const double nll_1 = nn::evaluate_nll(d1, held, 64, 64);
  const double nll_6 = nn::evaluate_nll(d6, held, 64, 64);
  return {nll_6 - nll_1 > 0.05, "held-out D1 nll: D1-model " + fmt(nll_1, 3) + ", D6-model " +
                                    fmt(nll_6, 3) + " (margin " + fmt(nll_6 - nll_1, 3) + " > 0.05)"};
}

}  // namespace

int main() {
  set_compute_threads(1);
  const std::string home = accept_home();
  fs::create_directories(home);
  std::printf("acceptance home: %s\n", home.c_str());

  // fast, pure criteria first
  run_criterion("gradient-correctness", gradient_correctness);
  run_criterion("metric-oracle-equivalence", metric_oracles);
  run_criterion("theory-suite", theory_suite);
  run_criterion("flops-accounting", [&] { return flops_accounting(home); });
  run_criterion("harness-idempotence", harness_idempotence);

  // heavy trend criteria share the home's checkpoints and records
  run_criterion("rq1-entropy-trend", [&] { return rq1_entropy_trend(home); });
  run_criterion("rq1-gap-trend", [&] { return rq1_gap_trend(home); });
  run_criterion("rq2-ordering", [&] { return rq2_ordering(home); });
  run_criterion("rq5-collapse", [&] { return rq5_collapse(home); });
  run_criterion("frozen-decoder-contract", [&] { return frozen_decoder_contract(home); });

  // supporting capacity/fingerprint oracles at the same operating point
  run_criterion("capacity-oracle", [&] { return capacity_oracle(home); });
  run_criterion("distribution-fingerprint", [&] { return distribution_fingerprint(home); });

  int failed = 0;
  for (const auto& o : g_outcomes) failed += o.pass ? 0 : 1;
  std::printf("%d/%zu criteria passed\n", static_cast<int>(g_outcomes.size()) - failed,
              g_outcomes.size());
  return failed == 0 ? 0 : 1;
}
