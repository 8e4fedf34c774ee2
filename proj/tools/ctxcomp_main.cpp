// ctxcomp: synthetic corpora, from-scratch LM pretraining, frozen-decoder
// context compression, evaluation and the experiment sweep harness.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "ctxcomp/compressor.hpp"
#include "ctxcomp/corpus.hpp"
#include "ctxcomp/labctl.hpp"
#include "ctxcomp/metrics.hpp"
#include "ctxcomp/tensor.hpp"
#include "ctxcomp/theory.hpp"
#include "ctxcomp/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctxcomp;

namespace {

std::string default_home() {
  if (const char* env = std::getenv("CTXCOMP_HOME")) return env;
  return "ctxcomp_home";
}

lab::LabBudget budget_from(const std::string& config_path) {
  lab::LabBudget budget;
  if (!config_path.empty()) budget.apply(ConfigFile::parse_file(config_path));
  return budget;
}

theory::DiscreteSource load_pmf(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open pmf file: " + path);
  std::vector<double> p;
  double v;
  while (is >> v) p.push_back(v);
  return theory::DiscreteSource(p);
}

double median5(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

int run_gen_data(const std::string& family, const std::string& dataset, double alpha,
                 std::uint64_t tokens, std::uint64_t seed, const std::string& out,
                 int finetune_docs, int test_docs) {
  if (!family.empty()) {
    corpus::GeneratorSpec spec;
    spec.family = corpus::family_from_string(family);
    spec.seed = seed;
    corpus::DocGen gen(spec);
    std::vector<corpus::Document> docs;
    std::uint64_t got = 0;
    while (got < tokens) {
      corpus::Document d;
      d.tokens = tokenize(gen.next_doc());
      d.tokens.push_back(Vocab::kEos);
      d.digest = fnv1a(std::span<const Token>(d.tokens.data(), d.tokens.size()));
      got += d.tokens.size();
      docs.push_back(std::move(d));
    }
    corpus::write_corpus_file(out, docs);
    std::printf("wrote %zu documents (%llu tokens) to %s\n", docs.size(),
                static_cast<unsigned long long>(got), out.c_str());
    return 0;
  }

  std::string ds_id = dataset;
  if (ds_id.empty()) {
    // map alpha in {0, 1/6 .. 5/6} onto D1..D6
    const int sixths = static_cast<int>(std::lround(alpha * 6.0));
    if (std::abs(alpha * 6.0 - sixths) > 1e-9 || sixths < 0 || sixths > 5)
      throw ConfigError("gen-data: alpha must be k/6 with k in 0..5");
    ds_id = "D" + std::to_string(sixths + 1);
  }
  corpus::Dataset ds = corpus::build_dataset(ds_id, tokens, seed);
  const std::size_t ft = static_cast<std::size_t>(finetune_docs);
  const std::size_t te = static_cast<std::size_t>(test_docs);
  if (ds.docs.size() < ft + te + 1)
    throw DataError("gen-data: not enough documents for the requested splits");
  corpus::CorpusSplit split = corpus::split_corpus(ds, ds.docs.size() - ft - te, ft, te, seed ^ 0x5eed);
  fs::create_directories(out);
  corpus::write_corpus_file(out + "/pretrain.ccl", split.pretrain);
  corpus::write_corpus_file(out + "/finetune.ccl", split.finetune);
  corpus::write_corpus_file(out + "/test.ccl", split.test);
  corpus::write_manifest(out + "/manifest.json", split);
  std::printf("dataset %s: %zu/%zu/%zu documents under %s\n", ds_id.c_str(),
              split.pretrain.size(), split.finetune.size(), split.test.size(), out.c_str());
  return 0;
}

std::vector<corpus::Document> load_docs(const std::string& path) {
  if (fs::is_directory(path)) return corpus::read_corpus_file(path + "/pretrain.ccl");
  return corpus::read_corpus_file(path);
}

}  // namespace

int main(int argc, char** argv) {
  set_compute_threads(1);

  CLI::App app{"desk-scale context-compression laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "TOML config file")->envname("CTXCOMP_CONFIG");

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate synthetic corpora");
  std::string gd_family, gd_dataset, gd_out = "dataset";
  double gd_alpha = -1.0;
  std::uint64_t gd_tokens = 1000000, gd_seed = 1;
  int gd_ft_docs = 10000, gd_test_docs = 1000;
  gen->add_option("--family", gd_family, "single family stream (general|article|code|math|random)");
  gen->add_option("--dataset", gd_dataset, "dataset id D1..D6 or rnd");
  gen->add_option("--alpha", gd_alpha, "specialized-mixture proportion, k/6");
  gen->add_option("--tokens", gd_tokens, "token volume");
  gen->add_option("--seed", gd_seed, "generation seed");
  gen->add_option("--out", gd_out, "output file (family mode) or directory");
  gen->add_option("--finetune-docs", gd_ft_docs, "fine-tune split size (dataset mode)");
  gen->add_option("--test-docs", gd_test_docs, "test split size (dataset mode)");

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "train a causal LM from scratch");
  std::string pt_data, pt_tier = "T2", pt_out = "model.ckpt";
  std::uint64_t pt_tokens = 20000000, pt_seed = 1;
  int pt_seq = 128, pt_batch = 16, pt_warmup = 100, pt_maxpos = 512;
  double pt_max_lr = 3e-3, pt_min_lr = 3e-4;
  pre->add_option("--data", pt_data, "corpus file or dataset directory")->required();
  pre->add_option("--tier", pt_tier, "model tier T1..T4");
  pre->add_option("--tokens", pt_tokens, "training token budget");
  pre->add_option("--seq-len", pt_seq, "window length");
  pre->add_option("--batch", pt_batch, "batch size");
  pre->add_option("--warmup", pt_warmup, "warmup steps");
  pre->add_option("--max-lr", pt_max_lr, "peak learning rate");
  pre->add_option("--min-lr", pt_min_lr, "final learning rate");
  pre->add_option("--max-position", pt_maxpos, "positional capacity");
  pre->add_option("--seed", pt_seed, "training seed");
  pre->add_option("--out", pt_out, "checkpoint path");

  // ---- finetune ----
  auto* ft = app.add_subcommand("finetune", "couple encoder and frozen decoder");
  std::string ft_enc, ft_dec, ft_data, ft_out = "ae.ckpt";
  int ft_L = 128, ft_ratio = 4, ft_epochs = 3, ft_batch = 16, ft_samples = 10000, ft_warmup = 100;
  double ft_max_lr = 1e-3, ft_min_lr = 1e-4, ft_wd = 0.1;
  std::uint64_t ft_seed = 1;
  ft->add_option("--encoder", ft_enc, "encoder checkpoint")->required();
  ft->add_option("--decoder", ft_dec, "decoder checkpoint (stays frozen)")->required();
  ft->add_option("--data", ft_data, "dataset directory or finetune corpus file")->required();
  ft->add_option("--L", ft_L, "context length");
  ft->add_option("--ratio", ft_ratio, "compression ratio r = L/k");
  ft->add_option("--epochs", ft_epochs, "epochs");
  ft->add_option("--batch", ft_batch, "batch size");
  ft->add_option("--samples", ft_samples, "fine-tune sample cap");
  ft->add_option("--warmup", ft_warmup, "warmup steps");
  ft->add_option("--max-lr", ft_max_lr, "peak learning rate");
  ft->add_option("--min-lr", ft_min_lr, "final learning rate");
  ft->add_option("--weight-decay", ft_wd, "decoupled weight decay");
  ft->add_option("--seed", ft_seed, "fine-tuning seed");
  ft->add_option("--out", ft_out, "autoencoder checkpoint path");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "score reconstruction quality");
  std::string ev_ckpt, ev_dec, ev_test, ev_out = "report.json";
  int ev_samples = 1000;
  bool ev_latency = false;
  ev->add_option("--ckpt", ev_ckpt, "autoencoder checkpoint")->required();
  ev->add_option("--decoder", ev_dec, "frozen decoder checkpoint")->required();
  ev->add_option("--test", ev_test, "dataset directory or test corpus file")->required();
  ev->add_option("--samples", ev_samples, "evaluation sample cap");
  ev->add_option("--out", ev_out, "report path");
  ev->add_flag("--latency", ev_latency, "measure wall-clock compress/generate latency");

  // ---- entropy ----
  auto* en = app.add_subcommand("entropy", "model-measured input entropy");
  std::string en_ckpt, en_data;
  int en_samples = 200, en_L = 128;
  en->add_option("--ckpt", en_ckpt, "LM checkpoint")->required();
  en->add_option("--data", en_data, "corpus file or dataset directory")->required();
  en->add_option("--samples", en_samples, "sample cap");
  en->add_option("--L", en_L, "sample length");

  // ---- theory ----
  auto* th = app.add_subcommand("theory", "information-theoretic utilities");
  th->require_subcommand(1);
  auto* th_rd = th->add_subcommand("rd", "rate-distortion via Blahut-Arimoto");
  std::string rd_pmf, rd_distortion = "hamming";
  double rd_d = 0.1, rd_tol = 1e-9;
  th_rd->add_option("--pmf", rd_pmf, "pmf file, one probability per line")->required();
  th_rd->add_option("--distortion", rd_distortion, "distortion kind (hamming)");
  th_rd->add_option("--D", rd_d, "target distortion");
  th_rd->add_option("--tol", rd_tol, "per-sweep rate tolerance");
  auto* th_ent = th->add_subcommand("entropy", "Shannon entropy of a pmf");
  std::string te_pmf;
  th_ent->add_option("--pmf", te_pmf)->required();
  auto* th_ce = th->add_subcommand("ce", "cross-entropy decomposition CE = H + KL");
  std::string ce_p, ce_q;
  th_ce->add_option("--p", ce_p, "data pmf file")->required();
  th_ce->add_option("--q", ce_q, "model pmf file")->required();
  auto* th_fe = th->add_subcommand("feasible", "lossless feasibility under a rate budget");
  double fe_h = 0.0, fe_budget = 0.0;
  th_fe->add_option("--entropy-bits", fe_h)->required();
  th_fe->add_option("--budget-bits", fe_budget)->required();

  // ---- sweep / analyze / plot ----
  auto* sw = app.add_subcommand("sweep", "run an experiment preset");
  std::string sw_preset, sw_home = default_home();
  int sw_seeds = 1;
  bool sw_force = false;
  sw->add_option("--preset", sw_preset, "rq1_entropy|rq1_gap|rq2_alignment|rq3_scaling|rq4_flops|rq5_random")
      ->required();
  sw->add_option("--home", sw_home, "artifact root (env CTXCOMP_HOME)");
  sw->add_option("--seeds", sw_seeds, "replicated rows per config");
  sw->add_flag("--force", sw_force, "re-run completed rows");

  auto* an = app.add_subcommand("analyze", "aggregate records into a trend report");
  std::string an_preset, an_home = default_home(), an_out;
  int an_seeds = 1;
  an->add_option("--preset", an_preset)->required();
  an->add_option("--home", an_home, "artifact root");
  an->add_option("--seeds", an_seeds, "seeds used at sweep time");
  an->add_option("--out", an_out, "write the report JSON here (default: print)");

  auto* pl = app.add_subcommand("plot", "render a trend report");
  std::string pl_preset, pl_home = default_home(), pl_format = "svg", pl_out;
  int pl_seeds = 1;
  pl->add_option("--preset", pl_preset)->required();
  pl->add_option("--home", pl_home, "artifact root");
  pl->add_option("--format", pl_format, "svg|csv|md");
  pl->add_option("--seeds", pl_seeds, "seeds used at sweep time");
  pl->add_option("--out", pl_out, "output directory (default <home>/reports)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      return run_gen_data(gd_family, gd_dataset, gd_alpha, gd_tokens, gd_seed, gd_out,
                          gd_ft_docs, gd_test_docs);
    }

    if (*pre) {
      nn::ModelConfig cfg = nn::ModelConfig::tier_config(pt_tier);
      cfg.max_position = pt_maxpos;
      TokenSequence stream = corpus::concat_tokens(load_docs(pt_data));
      const std::uint64_t per_step = static_cast<std::uint64_t>(pt_batch) * pt_seq;
      nn::TrainSchedule schedule;
      schedule.total_steps = static_cast<int>(std::max<std::uint64_t>(1, pt_tokens / per_step));
      schedule.warmup_steps = std::min(pt_warmup, schedule.total_steps / 10);
      schedule.max_lr = pt_max_lr;
      schedule.min_lr = pt_min_lr;
      schedule.shape = nn::ScheduleShape::cosine;
      schedule.batch_size = pt_batch;
      std::vector<nn::TraceRow> trace;
      const std::string provenance = fs::is_directory(pt_data)
                                         ? fs::path(pt_data).filename().string()
                                         : fs::path(pt_data).stem().string();
      auto params = nn::pretrain(cfg, schedule, stream, pt_seed, pt_seq, provenance, &trace);
      nn::CheckpointMeta meta;
      meta.provenance = provenance;
      meta.step = schedule.total_steps;
      meta.seed = pt_seed;
      nn::save_checkpoint(pt_out, params, meta);
      nn::write_trace_csv(pt_out + ".trace.csv", trace);
      std::printf("pretrained %s (%llu params) for %d steps; final nll %.4f nats -> %s\n",
                  pt_tier.c_str(), static_cast<unsigned long long>(cfg.param_count()),
                  schedule.total_steps, trace.back().nll, pt_out.c_str());
      return 0;
    }

    if (*ft) {
      auto enc = nn::load_checkpoint(ft_enc);
      auto dec = nn::load_checkpoint(ft_dec);
      icae::FrozenDecoder frozen(dec);
      const auto ccfg = icae::CompressorConfig::with_ratio(ft_L, ft_ratio);
      const std::string file = fs::is_directory(ft_data) ? ft_data + "/finetune.ccl" : ft_data;
      const auto samples = corpus::fixed_length_samples(corpus::read_corpus_file(file), ft_L,
                                                        static_cast<std::size_t>(ft_samples));
      icae::FinetuneOptions opts;
      opts.epochs = ft_epochs;
      opts.batch_size = ft_batch;
      opts.max_lr = ft_max_lr;
      opts.min_lr = ft_min_lr;
      opts.warmup_steps = ft_warmup;
      opts.weight_decay = ft_wd;
      std::vector<nn::TraceRow> trace;
      auto ae = icae::finetune(enc, frozen, samples, ccfg, opts, ft_seed, &trace);
      icae::save_autoencoder(ft_out, ae);
      nn::write_trace_csv(ft_out + ".trace.csv", trace);
      std::printf("fine-tuned on %zu samples (L=%d, k=%d); final ae loss %.4f nats -> %s\n",
                  samples.size(), ccfg.context_length, ccfg.slot_count, trace.back().nll,
                  ft_out.c_str());
      return 0;
    }

    if (*ev) {
      auto ae = icae::load_autoencoder(ev_ckpt);
      auto dec = nn::load_checkpoint(ev_dec);
      icae::FrozenDecoder frozen(dec);
      const std::string file = fs::is_directory(ev_test) ? ev_test + "/test.ccl" : ev_test;
      const auto samples = corpus::fixed_length_samples(
          corpus::read_corpus_file(file), ae.ccfg.context_length,
          static_cast<std::size_t>(ev_samples));
      if (samples.empty()) throw DataError("eval: no usable samples in " + file);

      std::vector<TokenSequence> recons;
      for (std::size_t i = 0; i < samples.size(); i += 64) {
        const std::size_t n = std::min<std::size_t>(64, samples.size() - i);
        auto part = icae::reconstruct_batch(
            ae, frozen, std::span<const TokenSequence>(samples.data() + i, n));
        for (auto& p : part) recons.push_back(std::move(p));
      }
      const auto rep = eval::score_reconstructions(recons, samples);

      json out;
      out["aggregate"] = {{"f1", rep.f1},
                          {"bleu4", rep.bleu4},
                          {"rouge_l", rep.rouge_l},
                          {"samples", rep.samples}};
      json per = json::array();
      for (std::size_t i = 0; i < samples.size(); ++i) {
        per.push_back({{"f1", eval::token_f1(recons[i], samples[i])},
                       {"bleu4", eval::bleu4(recons[i], samples[i])},
                       {"rouge_l", eval::rouge_l(recons[i], samples[i])},
                       {"entropy_encoder_bits", eval::per_token_entropy(ae.encoder, samples[i])},
                       {"entropy_decoder_bits", eval::per_token_entropy(dec, samples[i])}});
      }
      out["per_sample"] = per;
      const int L = ae.ccfg.context_length, k = ae.ccfg.slot_count;
      out["compute"] = {{"flops_compress",
                         eval::flops_estimate(ae.encoder.cfg, static_cast<std::uint64_t>(L + k),
                                              eval::Phase::compress)},
                        {"flops_generate",
                         eval::flops_estimate(dec.cfg, static_cast<std::uint64_t>(k + 1 + L),
                                              eval::Phase::generate)}};

      if (ev_latency) {
        // fixed context, 5 repeats, median wall-clock per phase
        const TokenSequence& ctx = samples.front();
        std::vector<double> t_comp, t_gen;
        for (int rep5 = 0; rep5 < 5; ++rep5) {
          auto a = std::chrono::steady_clock::now();
          Mat<float> slots = icae::encode(ae, ctx);
          auto b = std::chrono::steady_clock::now();
          (void)icae::reconstruct(ae, frozen, ctx);
          auto c = std::chrono::steady_clock::now();
          t_comp.push_back(std::chrono::duration<double>(b - a).count());
          t_gen.push_back(std::chrono::duration<double>(c - b).count() -
                          std::chrono::duration<double>(b - a).count());
        }
        out["latency"] = {{"compress_s", median5(t_comp)},
                          {"generate_s", std::max(0.0, median5(t_gen))}};
      }

      std::ofstream os(ev_out, std::ios::trunc);
      os << out.dump(2) << "\n";
      std::printf("F1 %.2f  BLEU-4 %.2f  ROUGE-L %.2f over %zu samples -> %s\n", rep.f1,
                  rep.bleu4, rep.rouge_l, rep.samples, ev_out.c_str());
      return 0;
    }

    if (*en) {
      auto params = nn::load_checkpoint(en_ckpt);
      const std::string file = fs::is_directory(en_data) ? en_data + "/test.ccl" : en_data;
      const auto samples = corpus::fixed_length_samples(corpus::read_corpus_file(file), en_L,
                                                        static_cast<std::size_t>(en_samples));
      if (samples.empty()) throw DataError("entropy: no usable samples in " + file);
      double mean = 0.0;
      for (const auto& s : samples) mean += eval::per_token_entropy(params, s);
      mean /= static_cast<double>(samples.size());
      json out = {{"bits_per_token", mean}, {"samples", samples.size()}, {"L", en_L}};
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (*th) {
      json out;
      if (*th_rd) {
        if (rd_distortion != "hamming")
          throw ConfigError("theory rd: only hamming distortion is built in");
        const auto src = load_pmf(rd_pmf);
        const auto res = theory::blahut_arimoto(src, theory::DistortionSpec::hamming(src.size()),
                                                rd_d, rd_tol);
        out = {{"target_distortion", res.target_distortion},
               {"rate_bits", res.rate_bits},
               {"iterations", res.iterations},
               {"converged", res.converged}};
      } else if (*th_ent) {
        out = {{"entropy_bits", theory::entropy(load_pmf(te_pmf))}};
      } else if (*th_ce) {
        const auto rep = theory::ce_decomposition(load_pmf(ce_p), load_pmf(ce_q));
        out = {{"entropy_bits", rep.entropy_bits},
               {"kl_bits", rep.kl_bits},
               {"cross_entropy_bits", rep.cross_entropy_bits},
               {"residual", rep.residual}};
      } else if (*th_fe) {
        const auto verdict = theory::feasibility_check(fe_h, fe_budget);
        out = {{"entropy_bits", fe_h},
               {"budget_bits", fe_budget},
               {"feasible", verdict == theory::Feasibility::feasible}};
      }
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (*sw) {
      const auto budget = budget_from(config_path);
      const auto plan = lab::plan_from_preset(sw_preset, budget, sw_seeds);
      lab::RunResources res;
      res.home = sw_home;
      res.force = sw_force;
      const auto records = lab::run_plan(plan, res);
      int ok = 0, failed = 0;
      for (const auto& r : records) (r.value("status", "") == "ok" ? ok : failed) += 1;
      std::printf("preset %s: %d ok, %d failed, records in %s\n", sw_preset.c_str(), ok,
                  failed, lab::records_path(res, sw_preset).c_str());
      return failed == 0 ? 0 : 1;
    }

    if (*an || *pl) {
      const std::string preset = *an ? an_preset : pl_preset;
      const std::string home = *an ? an_home : pl_home;
      const int seeds = *an ? an_seeds : pl_seeds;
      const auto budget = budget_from(config_path);
      const auto plan = lab::plan_from_preset(preset, budget, seeds);
      lab::RunResources res;
      res.home = home;
      const auto records = lab::load_records(lab::records_path(res, preset));
      const auto report = lab::analyze(records, plan);
      for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      if (*an) {
        if (an_out.empty()) {
          std::cout << report.payload.dump(2) << "\n";
        } else {
          std::ofstream os(an_out, std::ios::trunc);
          os << report.payload.dump(2) << "\n";
          std::printf("report -> %s\n", an_out.c_str());
        }
      } else {
        const std::string out_dir = pl_out.empty() ? home + "/reports" : pl_out;
        for (const auto& f : lab::emit(report, pl_format, out_dir))
          std::printf("wrote %s\n", f.c_str());
      }
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
