#include "ctxcomp/labctl.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "ctxcomp/compressor.hpp"
#include "ctxcomp/digest.hpp"
#include "ctxcomp/train.hpp"

namespace ctxcomp::lab {

namespace fs = std::filesystem;
using nlohmann::json;

void LabBudget::apply(const ConfigFile& cfg) {
  pretrain_tokens = static_cast<std::uint64_t>(
      cfg.get_int("budget.pretrain_tokens", static_cast<std::int64_t>(pretrain_tokens)));
  pretrain_seq_len = static_cast<int>(cfg.get_int("budget.pretrain_seq_len", pretrain_seq_len));
  pretrain_batch = static_cast<int>(cfg.get_int("budget.pretrain_batch", pretrain_batch));
  pretrain_warmup = static_cast<int>(cfg.get_int("budget.pretrain_warmup", pretrain_warmup));
  pretrain_max_lr = cfg.get_double("budget.pretrain_max_lr", pretrain_max_lr);
  pretrain_min_lr = cfg.get_double("budget.pretrain_min_lr", pretrain_min_lr);
  finetune_samples = static_cast<int>(cfg.get_int("budget.finetune_samples", finetune_samples));
  finetune_epochs = static_cast<int>(cfg.get_int("budget.finetune_epochs", finetune_epochs));
  finetune_batch = static_cast<int>(cfg.get_int("budget.finetune_batch", finetune_batch));
  finetune_warmup = static_cast<int>(cfg.get_int("budget.finetune_warmup", finetune_warmup));
  finetune_max_lr = cfg.get_double("budget.finetune_max_lr", finetune_max_lr);
  finetune_min_lr = cfg.get_double("budget.finetune_min_lr", finetune_min_lr);
  finetune_weight_decay = cfg.get_double("budget.finetune_weight_decay", finetune_weight_decay);
  test_samples = static_cast<int>(cfg.get_int("budget.test_samples", test_samples));
  context_length = static_cast<int>(cfg.get_int("budget.context_length", context_length));
  ratio = static_cast<int>(cfg.get_int("budget.ratio", ratio));
  max_position = static_cast<int>(cfg.get_int("budget.max_position", max_position));
  base_seed = static_cast<std::uint64_t>(
      cfg.get_int("budget.base_seed", static_cast<std::int64_t>(base_seed)));
}

json LabBudget::to_json() const {
  return {{"pretrain_tokens", pretrain_tokens},
          {"pretrain_seq_len", pretrain_seq_len},
          {"pretrain_batch", pretrain_batch},
          {"pretrain_warmup", pretrain_warmup},
          {"pretrain_max_lr", pretrain_max_lr},
          {"pretrain_min_lr", pretrain_min_lr},
          {"finetune_samples", finetune_samples},
          {"finetune_epochs", finetune_epochs},
          {"finetune_batch", finetune_batch},
          {"finetune_warmup", finetune_warmup},
          {"finetune_max_lr", finetune_max_lr},
          {"finetune_min_lr", finetune_min_lr},
          {"finetune_weight_decay", finetune_weight_decay},
          {"test_samples", test_samples},
          {"context_length", context_length},
          {"ratio", ratio},
          {"max_position", max_position},
          {"base_seed", base_seed}};
}

namespace {

json row_to_json(const PlanRow& r) {
  return {{"enc_ds", r.enc_ds},   {"enc_tier", r.enc_tier}, {"dec_ds", r.dec_ds},
          {"dec_tier", r.dec_tier}, {"ft_ds", r.ft_ds},     {"eval_ds", r.eval_ds},
          {"seed", r.seed}};
}

void check_dataset_id(const std::string& id) {
  if (!corpus::is_dataset_id(id))
    throw ConfigError("unknown dataset id: " + id + " (expected D1..D6 or rnd)");
}

}  // namespace

std::string ExperimentPlan::digest() const {
  json j;
  j["preset"] = preset;
  j["budget"] = budget.to_json();
  j["rows"] = json::array();
  for (const auto& r : rows) j["rows"].push_back(row_to_json(r));
  return digest_hex(fnv1a(j.dump()));
}

std::string row_fingerprint(const PlanRow& row, const LabBudget& budget) {
  json j;
  j["row"] = row_to_json(row);
  j["budget"] = budget.to_json();
  return digest_hex(fnv1a(j.dump()));
}

ExperimentPlan plan_from_preset(const std::string& preset, const LabBudget& budget,
                                int n_seeds) {
  if (n_seeds < 1) throw ConfigError("plan: n_seeds must be >= 1");
  ExperimentPlan plan;
  plan.preset = preset;
  plan.budget = budget;

  std::vector<PlanRow> base;
  auto row = [](std::string enc_ds, std::string enc_tier, std::string dec_ds,
                std::string dec_tier, std::string ft, std::string ev) {
    PlanRow r;
    r.enc_ds = std::move(enc_ds);
    r.enc_tier = std::move(enc_tier);
    r.dec_ds = std::move(dec_ds);
    r.dec_tier = std::move(dec_tier);
    r.ft_ds = std::move(ft);
    r.eval_ds = std::move(ev);
    return r;
  };

  if (preset == "rq1_entropy") {
    // aligned pair scored on the all-family probe set
    base.push_back(row("D1", "T2", "D1", "T2", "D1", "mix5"));
  } else if (preset == "rq1_gap") {
    // encoder fixed to D1, decoder swept across the alpha schedule
    for (int i = 1; i <= 6; ++i)
      base.push_back(row("D1", "T2", "D" + std::to_string(i), "T2", "D1", "D1"));
  } else if (preset == "rq2_alignment") {
    base.push_back(row("D1", "T2", "D1", "T2", "D1", "D1"));  // aligned
    base.push_back(row("D6", "T2", "D1", "T2", "D1", "D1"));  // decoder-aligned
    base.push_back(row("D1", "T2", "D6", "T2", "D1", "D1"));  // encoder-aligned
  } else if (preset == "rq3_scaling" || preset == "rq4_flops") {
    // block A: decoder fixed, encoder swept; block B: encoder fixed,
    // decoder swept; plus the aligned reference pair
    for (const char* t : {"T1", "T2", "T3", "T4"})
      base.push_back(row("D1", t, "D6", "T2", "D1", "D1"));
    for (const char* t : {"T1", "T2", "T3", "T4"})
      base.push_back(row("D6", "T2", "D1", t, "D1", "D1"));
    base.push_back(row("D1", "T2", "D1", "T2", "D1", "D1"));
  } else if (preset == "rq5_random") {
    base.push_back(row("D1", "T2", "D1", "T2", "D1", "D1"));   // aligned baseline
    base.push_back(row("D1", "T2", "rnd", "T2", "D1", "D1"));  // random-text decoder
  } else if (preset == "custom") {
    // empty plan, a valid no-op
  } else {
    throw ConfigError("unknown preset: " + preset);
  }

  for (int s = 0; s < n_seeds; ++s) {
    for (PlanRow r : base) {
      r.seed = budget.base_seed + static_cast<std::uint64_t>(s);
      plan.rows.push_back(r);
    }
  }
  for (const auto& r : plan.rows) {
    check_dataset_id(r.enc_ds);
    check_dataset_id(r.dec_ds);
    check_dataset_id(r.ft_ds);
    if (r.eval_ds != "mix5") check_dataset_id(r.eval_ds);
  }
  return plan;
}

// ---- datasets and checkpoints ----

namespace {

std::uint64_t dataset_seed(const std::string& dataset_id, const LabBudget& budget) {
  return fnv1a("dataset:" + dataset_id) ^ budget.base_seed;
}

std::string budget_data_tag(const LabBudget& budget) {
  json j = {{"tokens", budget.pretrain_tokens},
            {"finetune_samples", budget.finetune_samples},
            {"test_samples", budget.test_samples},
            {"L", budget.context_length},
            {"seed", budget.base_seed}};
  return digest_hex(fnv1a(j.dump())).substr(0, 10);
}

}  // namespace

DatasetPaths ensure_dataset(const std::string& home, const std::string& dataset_id,
                            const LabBudget& budget) {
  check_dataset_id(dataset_id);
  DatasetPaths paths;
  paths.dir = home + "/data/" + dataset_id + "_" + budget_data_tag(budget);
  paths.pretrain_file = paths.dir + "/pretrain.ccl";
  paths.finetune_file = paths.dir + "/finetune.ccl";
  paths.test_file = paths.dir + "/test.ccl";
  paths.manifest_file = paths.dir + "/manifest.json";
  if (fs::exists(paths.manifest_file)) return paths;
  fs::create_directories(paths.dir);

  // generate enough to cover the pretrain stream plus fine-tune/test docs;
  // documents average ~512 tokens, so pad the doc-count quotas generously
  const std::uint64_t extra_docs =
      static_cast<std::uint64_t>(budget.finetune_samples + budget.test_samples);
  const std::uint64_t total_tokens = budget.pretrain_tokens + extra_docs * 900 + 200000;
  corpus::Dataset ds =
      corpus::build_dataset(dataset_id, total_tokens, dataset_seed(dataset_id, budget));
  const std::size_t ft_docs = static_cast<std::size_t>(budget.finetune_samples);
  const std::size_t test_docs = static_cast<std::size_t>(budget.test_samples);
  if (ds.docs.size() < ft_docs + test_docs + 1)
    throw DataError("ensure_dataset: not enough documents generated for " + dataset_id);
  const std::size_t pre_docs = ds.docs.size() - ft_docs - test_docs;
  corpus::CorpusSplit split =
      corpus::split_corpus(ds, pre_docs, ft_docs, test_docs, dataset_seed(dataset_id, budget) ^ 0x5eed);

  corpus::write_corpus_file(paths.pretrain_file, split.pretrain);
  corpus::write_corpus_file(paths.finetune_file, split.finetune);
  corpus::write_corpus_file(paths.test_file, split.test);
  corpus::write_manifest(paths.manifest_file, split);
  return paths;
}

std::string ensure_pretrain(const std::string& home, const std::string& dataset_id,
                            const std::string& tier, const LabBudget& budget) {
  nn::ModelConfig cfg = nn::ModelConfig::tier_config(tier);
  cfg.max_position = budget.max_position;

  json key = {{"ds", dataset_id},
              {"tier", tier},
              {"tokens", budget.pretrain_tokens},
              {"seq", budget.pretrain_seq_len},
              {"batch", budget.pretrain_batch},
              {"max_lr", budget.pretrain_max_lr},
              {"min_lr", budget.pretrain_min_lr},
              {"warmup", budget.pretrain_warmup},
              {"seed", budget.base_seed},
              {"seed_scope", "tier"}};
  const std::string tag = digest_hex(fnv1a(key.dump())).substr(0, 10);
  const std::string path = home + "/ckpt/pre_" + dataset_id + "_" + tier + "_" + tag + ".ckpt";
  if (fs::exists(path)) return path;
  fs::create_directories(home + "/ckpt");

  const DatasetPaths data = ensure_dataset(home, dataset_id, budget);
  TokenSequence stream = corpus::concat_tokens(corpus::read_corpus_file(data.pretrain_file));
  const std::uint64_t tokens_per_step =
      static_cast<std::uint64_t>(budget.pretrain_batch) * budget.pretrain_seq_len;
  const int total_steps =
      static_cast<int>(std::max<std::uint64_t>(1, budget.pretrain_tokens / tokens_per_step));

  nn::TrainSchedule schedule;
  schedule.warmup_steps = std::min(budget.pretrain_warmup, total_steps / 10);
  schedule.total_steps = total_steps;
  schedule.max_lr = budget.pretrain_max_lr;
  schedule.min_lr = budget.pretrain_min_lr;
  schedule.shape = nn::ScheduleShape::cosine;
  schedule.batch_size = budget.pretrain_batch;

  // one init and batch-order seed per tier: models pretrained on different
  // datasets differ only in the data itself, which is the axis under study
  const std::uint64_t seed = fnv1a("pretrain:" + tier) ^ budget.base_seed;
  std::vector<nn::TraceRow> trace;
  nn::ModelParams<float> params = nn::pretrain(cfg, schedule, stream, seed,
                                               budget.pretrain_seq_len, dataset_id, &trace);
  nn::CheckpointMeta meta;
  meta.provenance = dataset_id;
  meta.step = total_steps;
  meta.seed = seed;
  nn::save_checkpoint(path, params, meta);
  nn::write_trace_csv(path + ".trace.csv", trace);
  return path;
}

ProbeSet build_probe_set(const LabBudget& budget) {
  ProbeSet probe;
  const corpus::Family fams[] = {corpus::Family::general, corpus::Family::article,
                                 corpus::Family::code, corpus::Family::math,
                                 corpus::Family::random};
  const int per_family = std::max(1, budget.test_samples / 5);
  for (const auto f : fams) {
    corpus::GeneratorSpec spec;
    spec.family = f;
    spec.seed = fnv1a("probe:" + corpus::to_string(f)) ^ budget.base_seed;
    corpus::DocGen gen(spec);
    int got = 0;
    while (got < per_family) {
      const std::string doc = gen.next_doc();
      if (static_cast<int>(doc.size()) < budget.context_length) continue;
      TokenSequence toks = tokenize(doc);
      toks.resize(static_cast<std::size_t>(budget.context_length));
      probe.samples.push_back(std::move(toks));
      probe.family.push_back(corpus::to_string(f));
      ++got;
    }
  }
  return probe;
}

// ---- runner ----

RunRecord canonical_record(const RunRecord& r) {
  RunRecord c = r;
  c.erase("wall_clock_s");
  return c;
}

std::string records_path(const RunResources& res, const std::string& preset) {
  return res.home + "/records/" + preset + ".jsonl";
}

std::vector<RunRecord> load_records(const std::string& path) {
  std::vector<RunRecord> out;
  std::ifstream is(path);
  if (!is) return out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line));
  }
  return out;
}

namespace {

struct CkptCache {
  std::map<std::string, nn::ModelParams<float>> models;

  const nn::ModelParams<float>& get(const std::string& path) {
    auto it = models.find(path);
    if (it != models.end()) return it->second;
    auto [pos, _] = models.emplace(path, nn::load_checkpoint(path));
    return pos->second;
  }
};

std::string home_relative(const std::string& path, const std::string& home) {
  if (path.rfind(home + "/", 0) == 0) return path.substr(home.size() + 1);
  return path;
}

RunRecord execute_row(const PlanRow& row, const ExperimentPlan& plan,
                      const RunResources& res, CkptCache& cache) {
  const LabBudget& budget = plan.budget;
  const auto t0 = std::chrono::steady_clock::now();

  const std::string enc_path = ensure_pretrain(res.home, row.enc_ds, row.enc_tier, budget);
  const std::string dec_path = ensure_pretrain(res.home, row.dec_ds, row.dec_tier, budget);
  const nn::ModelParams<float>& enc = cache.get(enc_path);
  const nn::ModelParams<float>& dec = cache.get(dec_path);
  icae::FrozenDecoder frozen(dec);

  const icae::CompressorConfig ccfg =
      icae::CompressorConfig::with_ratio(budget.context_length, budget.ratio);

  // fine-tune (memoized independently of the eval distribution: rows that
  // differ only in eval_ds share one autoencoder)
  const std::string fp = row_fingerprint(row, budget);
  PlanRow ft_key = row;
  ft_key.eval_ds = "";
  const std::string ae_path =
      res.home + "/ckpt/ae_" + row_fingerprint(ft_key, budget) + ".ckpt";
  icae::Autoencoder ae;
  if (fs::exists(ae_path)) {
    ae = icae::load_autoencoder(ae_path);
    if (ae.decoder_digest != frozen.digest())
      throw ContractError("cached autoencoder was trained against a different decoder");
  } else {
    const DatasetPaths ft_data = ensure_dataset(res.home, row.ft_ds, budget);
    const auto ft_docs = corpus::read_corpus_file(ft_data.finetune_file);
    const auto ft_samples = corpus::fixed_length_samples(
        ft_docs, budget.context_length, static_cast<std::size_t>(budget.finetune_samples));
    icae::FinetuneOptions opts;
    opts.epochs = budget.finetune_epochs;
    opts.batch_size = budget.finetune_batch;
    opts.max_lr = budget.finetune_max_lr;
    opts.min_lr = budget.finetune_min_lr;
    opts.warmup_steps = budget.finetune_warmup;
    opts.weight_decay = budget.finetune_weight_decay;
    std::vector<nn::TraceRow> trace;
    ae = icae::finetune(enc, frozen, ft_samples, ccfg, opts, row.seed, &trace);
    icae::save_autoencoder(ae_path, ae);
    nn::write_trace_csv(ae_path + ".trace.csv", trace);
  }

  // evaluation set
  std::vector<TokenSequence> eval_samples;
  std::vector<std::string> eval_family;
  if (row.eval_ds == "mix5") {
    ProbeSet probe = build_probe_set(budget);
    eval_samples = std::move(probe.samples);
    eval_family = std::move(probe.family);
  } else {
    const DatasetPaths eval_data = ensure_dataset(res.home, row.eval_ds, budget);
    const auto test_docs = corpus::read_corpus_file(eval_data.test_file);
    eval_samples = corpus::fixed_length_samples(test_docs, budget.context_length,
                                                static_cast<std::size_t>(budget.test_samples));
    eval_family.assign(eval_samples.size(), row.eval_ds);
  }
  if (eval_samples.empty()) throw DataError("run: empty evaluation set");

  // frozen-decoder contract holds for the whole row
  frozen.verify();

  // reconstruction in batches
  std::vector<TokenSequence> recons;
  recons.reserve(eval_samples.size());
  const std::size_t bsz = 64;
  for (std::size_t i = 0; i < eval_samples.size(); i += bsz) {
    const std::size_t n = std::min(bsz, eval_samples.size() - i);
    auto part = icae::reconstruct_batch(
        ae, frozen, std::span<const TokenSequence>(eval_samples.data() + i, n));
    for (auto& p : part) recons.push_back(std::move(p));
  }

  // per-sample metrics and model-measured entropies
  json per_sample = json::object();
  std::vector<double> f1s(eval_samples.size());
  std::vector<double> ent_enc(eval_samples.size());
  std::vector<double> ent_dec(eval_samples.size());
  for (std::size_t i = 0; i < eval_samples.size(); ++i) {
    f1s[i] = eval::token_f1(recons[i], eval_samples[i]);
    ent_enc[i] = eval::per_token_entropy(ae.encoder, eval_samples[i]);
    ent_dec[i] = eval::per_token_entropy(dec, eval_samples[i]);
  }
  per_sample["f1"] = f1s;
  per_sample["entropy_encoder_bits"] = ent_enc;
  per_sample["entropy_decoder_bits"] = ent_dec;
  per_sample["family"] = eval_family;

  const auto recon_rep = eval::score_reconstructions(recons, eval_samples);

  double mean_enc = 0.0, mean_dec = 0.0;
  for (std::size_t i = 0; i < eval_samples.size(); ++i) {
    mean_enc += ent_enc[i];
    mean_dec += ent_dec[i];
  }
  mean_enc /= static_cast<double>(eval_samples.size());
  mean_dec /= static_cast<double>(eval_samples.size());

  const int L = ccfg.context_length, k = ccfg.slot_count;
  const std::uint64_t flops_comp = eval::flops_estimate(
      enc.cfg, static_cast<std::uint64_t>(L + k), eval::Phase::compress);
  const std::uint64_t flops_gen = eval::flops_estimate(
      dec.cfg, static_cast<std::uint64_t>(k + 1 + L), eval::Phase::generate);

  const auto t1 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec["schema"] = 1;
  rec["fingerprint"] = fp;
  rec["preset"] = plan.preset;
  rec["row"] = row_to_json(row);
  rec["status"] = "ok";
  rec["recon"] = {{"f1", recon_rep.f1},
                  {"bleu4", recon_rep.bleu4},
                  {"rouge_l", recon_rep.rouge_l},
                  {"samples", recon_rep.samples}};
  rec["entropy"] = {{"encoder_bits", mean_enc}, {"decoder_bits", mean_dec}};
  rec["compute"] = {{"flops_compress", flops_comp}, {"flops_generate", flops_gen}};
  rec["per_sample"] = per_sample;
  rec["checkpoints"] = {{"encoder", home_relative(enc_path, res.home)},
                        {"decoder", home_relative(dec_path, res.home)},
                        {"autoencoder", home_relative(ae_path, res.home)}};
  rec["wall_clock_s"] = std::chrono::duration<double>(t1 - t0).count();
  return rec;
}

}  // namespace

std::vector<RunRecord> run_plan(const ExperimentPlan& plan, const RunResources& res) {
  if (res.home.empty()) throw ConfigError("run_plan: empty home directory");
  fs::create_directories(res.home + "/records");
  const std::string path = records_path(res, plan.preset);

  std::map<std::string, RunRecord> done;
  if (!res.force) {
    for (auto& rec : load_records(path)) {
      if (rec.value("status", "") == "ok") done[rec.at("fingerprint").get<std::string>()] = rec;
    }
  } else {
    fs::remove(path);
  }

  std::ofstream os(path, std::ios::app);
  if (!os) throw DataError("cannot open record store: " + path);

  CkptCache cache;
  std::vector<RunRecord> out;
  int executed = 0;
  for (const auto& row : plan.rows) {
    const std::string fp = row_fingerprint(row, plan.budget);
    auto it = done.find(fp);
    if (it != done.end()) {
      out.push_back(it->second);
      continue;
    }
    if (res.stop_after_rows >= 0 && executed >= res.stop_after_rows) break;
    RunRecord rec;
    try {
      rec = execute_row(row, plan, res, cache);
    } catch (const Error& e) {
      rec = RunRecord{{"schema", 1},
                      {"fingerprint", fp},
                      {"preset", plan.preset},
                      {"row", row_to_json(row)},
                      {"status", "failed"},
                      {"error", e.what()}};
    }
    os << rec.dump() << "\n";
    os.flush();
    out.push_back(rec);
    ++executed;
  }
  return out;
}

// ---- analysis ----

namespace {

const RunRecord* find_row(const std::vector<RunRecord>& records, const std::string& fp) {
  for (const auto& r : records) {
    if (r.value("fingerprint", "") == fp && r.value("status", "") == "ok") return &r;
  }
  return nullptr;
}

// bucket means over per-sample (entropy, f1) pairs
json bucket_curve(const std::vector<double>& entropy, const std::vector<double>& f1,
                  int n_buckets) {
  const auto buckets = eval::entropy_buckets(entropy, n_buckets);
  std::vector<double> ent_sum(static_cast<std::size_t>(n_buckets), 0.0);
  std::vector<double> f1_sum(static_cast<std::size_t>(n_buckets), 0.0);
  std::vector<int> count(static_cast<std::size_t>(n_buckets), 0);
  for (std::size_t i = 0; i < entropy.size(); ++i) {
    const auto b = static_cast<std::size_t>(buckets[i]);
    ent_sum[b] += entropy[i];
    f1_sum[b] += f1[i];
    count[b] += 1;
  }
  json curve = json::array();
  std::vector<double> xs, ys;
  for (int b = 0; b < n_buckets; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    if (count[bi] == 0) continue;
    const double me = ent_sum[bi] / count[bi];
    const double mf = f1_sum[bi] / count[bi];
    curve.push_back({{"bucket", b}, {"entropy_bits", me}, {"f1", mf}, {"n", count[bi]}});
    xs.push_back(me);
    ys.push_back(mf);
  }
  const auto corr = eval::correlate(xs, ys);
  return {{"buckets", curve},
          {"spearman_rho", corr.spearman_rho},
          {"pearson_r", corr.pearson_r}};
}

// non-increasing with at most one adjacent inversion of <= tol points
bool downward_trend(const std::vector<double>& v, double tol, int* inversions_out) {
  int inversions = 0;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    if (v[i + 1] > v[i]) {
      if (v[i + 1] - v[i] > tol) {
        if (inversions_out) *inversions_out = 99;
        return false;
      }
      ++inversions;
    }
  }
  if (inversions_out) *inversions_out = inversions;
  return inversions <= 1;
}

}  // namespace

bool TrendReport::verdict(const std::string& name) const {
  if (!payload.contains("verdicts") || !payload["verdicts"].contains(name))
    throw ContractError("trend report: no verdict named " + name);
  return payload["verdicts"][name].get<bool>();
}

TrendReport analyze(const std::vector<RunRecord>& records, const ExperimentPlan& plan) {
  TrendReport report;
  report.preset = plan.preset;
  json& p = report.payload;
  p["preset"] = plan.preset;
  p["plan_digest"] = plan.digest();
  p["verdicts"] = json::object();

  // collect completed rows in plan order; warn about the rest
  std::vector<const RunRecord*> rows;
  for (const auto& r : plan.rows) {
    const std::string fp = row_fingerprint(r, plan.budget);
    const RunRecord* rec = find_row(records, fp);
    if (!rec) {
      report.warnings.push_back("missing or failed fingerprint " + fp);
      rows.push_back(nullptr);
    } else {
      rows.push_back(rec);
    }
  }
  p["warnings"] = report.warnings;

  auto require_all = [&]() {
    for (const auto* r : rows)
      if (!r) return false;
    return true;
  };

  if (plan.preset == "rq1_entropy") {
    if (!rows.empty() && rows[0]) {
      p["source_fingerprint"] = (*rows[0])["fingerprint"];
      const auto& ps = rows[0]->at("per_sample");
      const auto ent_enc = ps.at("entropy_encoder_bits").get<std::vector<double>>();
      const auto ent_dec = ps.at("entropy_decoder_bits").get<std::vector<double>>();
      const auto f1 = ps.at("f1").get<std::vector<double>>();
      p["encoder_curve"] = bucket_curve(ent_enc, f1, 10);
      p["decoder_curve"] = bucket_curve(ent_dec, f1, 10);
      const double rho = p["encoder_curve"]["spearman_rho"].get<double>();
      p["verdicts"]["encoder_entropy_negative"] = rho <= -0.5;
    }
  } else if (plan.preset == "rq1_gap") {
    if (require_all()) {
      json curve = json::array();
      std::vector<double> f1, bleu, rouge;
      for (const auto* r : rows) {
        const auto& rec = (*r)["recon"];
        curve.push_back({{"decoder_ds", (*r)["row"]["dec_ds"]},
                         {"fingerprint", (*r)["fingerprint"]},
                         {"f1", rec["f1"]},
                         {"bleu4", rec["bleu4"]},
                         {"rouge_l", rec["rouge_l"]}});
        f1.push_back(rec["f1"].get<double>());
        bleu.push_back(rec["bleu4"].get<double>());
        rouge.push_back(rec["rouge_l"].get<double>());
      }
      p["gap_curve"] = curve;
      int inv_f1 = 0, inv_b = 0, inv_r = 0;
      const bool down_f1 = downward_trend(f1, 1.0, &inv_f1);
      const bool down_b = downward_trend(bleu, 1.0, &inv_b);
      const bool down_r = downward_trend(rouge, 1.0, &inv_r);
      p["inversions"] = {{"f1", inv_f1}, {"bleu4", inv_b}, {"rouge_l", inv_r}};
      p["verdicts"]["downward_trend"] = down_f1 && down_b && down_r;
    }
  } else if (plan.preset == "rq2_alignment") {
    if (require_all()) {
      const double aligned = (*rows[0])["recon"]["f1"].get<double>();
      const double dec_aligned = (*rows[1])["recon"]["f1"].get<double>();
      const double enc_aligned = (*rows[2])["recon"]["f1"].get<double>();
      p["f1"] = {{"aligned", aligned},
                 {"decoder_aligned", dec_aligned},
                 {"encoder_aligned", enc_aligned}};
      json table = json::array();
      for (const auto* r : rows) {
        table.push_back({{"encoder", (*r)["row"]["enc_ds"]},
                         {"decoder", (*r)["row"]["dec_ds"]},
                         {"fingerprint", (*r)["fingerprint"]},
                         {"data", (*r)["row"]["ft_ds"]},
                         {"f1", (*r)["recon"]["f1"]},
                         {"bleu4", (*r)["recon"]["bleu4"]},
                         {"rouge_l", (*r)["recon"]["rouge_l"]}});
      }
      p["table"] = table;
      p["verdicts"]["decoder_dominance"] =
          aligned > dec_aligned + 1.0 && dec_aligned > enc_aligned + 1.0;
    }
  } else if (plan.preset == "rq3_scaling" || plan.preset == "rq4_flops") {
    json points = json::array();
    for (const auto* r : rows) {
      if (!r) continue;
      const std::uint64_t flops = (*r)["compute"]["flops_compress"].get<std::uint64_t>() +
                                  (*r)["compute"]["flops_generate"].get<std::uint64_t>();
      points.push_back({{"enc_tier", (*r)["row"]["enc_tier"]},
                        {"dec_tier", (*r)["row"]["dec_tier"]},
                        {"fingerprint", (*r)["fingerprint"]},
                        {"enc_ds", (*r)["row"]["enc_ds"]},
                        {"dec_ds", (*r)["row"]["dec_ds"]},
                        {"flops", flops},
                        {"f1", (*r)["recon"]["f1"]},
                        {"bleu4", (*r)["recon"]["bleu4"]},
                        {"rouge_l", (*r)["recon"]["rouge_l"]}});
    }
    p["points"] = points;
    p["verdicts"]["complete"] = require_all();
  } else if (plan.preset == "rq5_random") {
    if (require_all()) {
      const double aligned = (*rows[0])["recon"]["f1"].get<double>();
      const double random_dec = (*rows[1])["recon"]["f1"].get<double>();
      p["f1"] = {{"aligned", aligned}, {"random_decoder", random_dec}};
      p["source_fingerprints"] = {(*rows[0])["fingerprint"], (*rows[1])["fingerprint"]};
      p["verdicts"]["collapse"] = random_dec < 10.0 && aligned - random_dec >= 30.0;
    }
  }

  return report;
}

// ---- emitters ----

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// minimal deterministic SVG line/scatter chart
class SvgChart {
 public:
  SvgChart(double xmin, double xmax, double ymin, double ymax, std::string x_label,
           std::string y_label)
      : xmin_(xmin), xmax_(xmax), ymin_(ymin), ymax_(ymax),
        x_label_(std::move(x_label)), y_label_(std::move(y_label)) {
    if (xmax_ <= xmin_) xmax_ = xmin_ + 1.0;
    if (ymax_ <= ymin_) ymax_ = ymin_ + 1.0;
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color) {
    std::string d;
    for (const auto& [x, y] : pts) d += fmt_g(px(x)) + "," + fmt_g(py(y)) + " ";
    body_ += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"" +
             d + "\"/>\n";
    scatter(pts, color);
  }

  void scatter(const std::vector<std::pair<double, double>>& pts, const std::string& color) {
    for (const auto& [x, y] : pts)
      body_ += "<circle cx=\"" + fmt_g(px(x)) + "\" cy=\"" + fmt_g(py(y)) +
               "\" r=\"3\" fill=\"" + color + "\"/>\n";
  }

  void legend(const std::vector<std::pair<std::string, std::string>>& entries) {
    double y = 24.0;
    for (const auto& [label, color] : entries) {
      body_ += "<rect x=\"" + fmt_g(width_ - 170.0) + "\" y=\"" + fmt_g(y - 9) +
               "\" width=\"10\" height=\"10\" fill=\"" + color + "\"/>\n";
      body_ += "<text x=\"" + fmt_g(width_ - 155.0) + "\" y=\"" + fmt_g(y) +
               "\" font-size=\"11\">" + label + "</text>\n";
      y += 16.0;
    }
  }

  std::string render() const {
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt_g(width_) +
                      "\" height=\"" + fmt_g(height_) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    // axes
    out += "<line x1=\"" + fmt_g(ml_) + "\" y1=\"" + fmt_g(height_ - mb_) + "\" x2=\"" +
           fmt_g(width_ - mr_) + "\" y2=\"" + fmt_g(height_ - mb_) +
           "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + fmt_g(ml_) + "\" y1=\"" + fmt_g(mt_) + "\" x2=\"" + fmt_g(ml_) +
           "\" y2=\"" + fmt_g(height_ - mb_) + "\" stroke=\"black\"/>\n";
    // ticks
    std::string ticks;
    for (int i = 0; i <= 4; ++i) {
      const double fx = xmin_ + (xmax_ - xmin_) * i / 4.0;
      const double fy = ymin_ + (ymax_ - ymin_) * i / 4.0;
      ticks += "<text x=\"" + fmt_g(px(fx)) + "\" y=\"" + fmt_g(height_ - mb_ + 16) +
               "\" font-size=\"10\" text-anchor=\"middle\">" + fmt_g(fx) + "</text>\n";
      ticks += "<text x=\"" + fmt_g(ml_ - 6) + "\" y=\"" + fmt_g(py(fy) + 3) +
               "\" font-size=\"10\" text-anchor=\"end\">" + fmt_g(fy) + "</text>\n";
    }
    out += ticks;
    out += "<text x=\"" + fmt_g((ml_ + width_ - mr_) / 2) + "\" y=\"" + fmt_g(height_ - 8) +
           "\" font-size=\"12\" text-anchor=\"middle\">" + x_label_ + "</text>\n";
    out += "<text x=\"14\" y=\"" + fmt_g((mt_ + height_ - mb_) / 2) +
           "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
           fmt_g((mt_ + height_ - mb_) / 2) + ")\">" + y_label_ + "</text>\n";
    out += body_;
    out += "</svg>\n";
    return out;
  }

 private:
  double px(double x) const { return ml_ + (x - xmin_) / (xmax_ - xmin_) * (width_ - ml_ - mr_); }
  double py(double y) const {
    return height_ - mb_ - (y - ymin_) / (ymax_ - ymin_) * (height_ - mt_ - mb_);
  }

  double width_ = 640, height_ = 420;
  double ml_ = 64, mr_ = 20, mt_ = 16, mb_ = 44;
  double xmin_, xmax_, ymin_, ymax_;
  std::string x_label_, y_label_;
  std::string body_;
};

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path);
  os << content;
}

std::string csv_of(const TrendReport& report) {
  std::string csv;
  const json& p = report.payload;
  if (p.contains("gap_curve")) {
    csv = "decoder_ds,f1,bleu4,rouge_l\n";
    for (const auto& row : p["gap_curve"])
      csv += row["decoder_ds"].get<std::string>() + "," + fmt_g(row["f1"].get<double>()) + "," +
             fmt_g(row["bleu4"].get<double>()) + "," + fmt_g(row["rouge_l"].get<double>()) + "\n";
  } else if (p.contains("encoder_curve")) {
    csv = "measured_by,bucket,entropy_bits,f1,n\n";
    for (const char* side : {"encoder_curve", "decoder_curve"}) {
      const std::string name = side == std::string("encoder_curve") ? "encoder" : "decoder";
      for (const auto& b : p[side]["buckets"])
        csv += name + "," + std::to_string(b["bucket"].get<int>()) + "," +
               fmt_g(b["entropy_bits"].get<double>()) + "," + fmt_g(b["f1"].get<double>()) +
               "," + std::to_string(b["n"].get<int>()) + "\n";
    }
  } else if (p.contains("points")) {
    csv = "enc_ds,enc_tier,dec_ds,dec_tier,flops,f1,bleu4,rouge_l\n";
    for (const auto& pt : p["points"])
      csv += pt["enc_ds"].get<std::string>() + "," + pt["enc_tier"].get<std::string>() + "," +
             pt["dec_ds"].get<std::string>() + "," + pt["dec_tier"].get<std::string>() + "," +
             std::to_string(pt["flops"].get<std::uint64_t>()) + "," +
             fmt_g(pt["f1"].get<double>()) + "," + fmt_g(pt["bleu4"].get<double>()) + "," +
             fmt_g(pt["rouge_l"].get<double>()) + "\n";
  } else if (p.contains("table")) {
    csv = "encoder,decoder,data,f1,bleu4,rouge_l\n";
    for (const auto& row : p["table"])
      csv += row["encoder"].get<std::string>() + "," + row["decoder"].get<std::string>() + "," +
             row["data"].get<std::string>() + "," + fmt_g(row["f1"].get<double>()) + "," +
             fmt_g(row["bleu4"].get<double>()) + "," + fmt_g(row["rouge_l"].get<double>()) + "\n";
  } else if (p.contains("f1")) {
    csv = "key,f1\n";
    for (const auto& [k, v] : p["f1"].items()) csv += k + "," + fmt_g(v.get<double>()) + "\n";
  } else {
    csv = "empty\n";
  }
  return csv;
}

std::string md_of(const TrendReport& report) {
  const json& p = report.payload;
  std::string md = "# " + report.preset + "\n\n";
  if (p.contains("table")) {
    md += "| Encoder | Decoder | Data | F1 | BLEU | ROUGE-L |\n";
    md += "|---|---|---|---|---|---|\n";
    for (const auto& row : p["table"])
      md += "| " + row["encoder"].get<std::string>() + " | " + row["decoder"].get<std::string>() +
            " | " + row["data"].get<std::string>() + " | " + fmt_g(row["f1"].get<double>()) +
            " | " + fmt_g(row["bleu4"].get<double>()) + " | " +
            fmt_g(row["rouge_l"].get<double>()) + " |\n";
  } else if (p.contains("gap_curve")) {
    md += "| Decoder | F1 | BLEU | ROUGE-L |\n|---|---|---|---|\n";
    for (const auto& row : p["gap_curve"])
      md += "| " + row["decoder_ds"].get<std::string>() + " | " + fmt_g(row["f1"].get<double>()) +
            " | " + fmt_g(row["bleu4"].get<double>()) + " | " +
            fmt_g(row["rouge_l"].get<double>()) + " |\n";
  } else if (p.contains("encoder_curve")) {
    md += "Spearman rho (encoder-measured): " +
          fmt_g(p["encoder_curve"]["spearman_rho"].get<double>()) + "\n\n";
    md += "Spearman rho (decoder-measured): " +
          fmt_g(p["decoder_curve"]["spearman_rho"].get<double>()) + "\n\n";
    md += "| Bucket | Encoder entropy (bits) | F1 (%) |\n|---|---|---|\n";
    for (const auto& b : p["encoder_curve"]["buckets"])
      md += "| " + std::to_string(b["bucket"].get<int>()) + " | " +
            fmt_g(b["entropy_bits"].get<double>()) + " | " + fmt_g(b["f1"].get<double>()) + " |\n";
  } else if (p.contains("f1")) {
    md += "| Setting | F1 |\n|---|---|\n";
    for (const auto& [k, v] : p["f1"].items()) md += "| " + k + " | " + fmt_g(v.get<double>()) + " |\n";
  } else if (p.contains("points")) {
    md += "| Encoder | Decoder | FLOPs | F1 |\n|---|---|---|---|\n";
    for (const auto& pt : p["points"])
      md += "| " + pt["enc_ds"].get<std::string>() + "(" + pt["enc_tier"].get<std::string>() +
            ") | " + pt["dec_ds"].get<std::string>() + "(" + pt["dec_tier"].get<std::string>() +
            ") | " + std::to_string(pt["flops"].get<std::uint64_t>()) + " | " +
            fmt_g(pt["f1"].get<double>()) + " |\n";
  }
  if (p.contains("verdicts")) {
    md += "\n";
    for (const auto& [k, v] : p["verdicts"].items())
      md += "- verdict " + k + ": " + (v.get<bool>() ? "true" : "false") + "\n";
  }
  return md;
}

std::string svg_of(const TrendReport& report) {
  const json& p = report.payload;
  if (p.contains("encoder_curve")) {
    // entropy bucket vs F1, both measurers
    std::vector<std::pair<double, double>> enc_pts, dec_pts;
    double xmin = 1e300, xmax = -1e300;
    for (const char* side : {"encoder_curve", "decoder_curve"}) {
      for (const auto& b : p[side]["buckets"]) {
        const double x = b["entropy_bits"].get<double>();
        const double y = b["f1"].get<double>();
        if (side == std::string("encoder_curve"))
          enc_pts.push_back({x, y});
        else
          dec_pts.push_back({x, y});
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
      }
    }
    SvgChart chart(xmin, xmax, 0.0, 100.0, "model-measured entropy (bits/token)", "F1 (%)");
    chart.polyline(enc_pts, "#c0392b");
    chart.polyline(dec_pts, "#2980b9");
    chart.legend({{"encoder-measured", "#c0392b"}, {"decoder-measured", "#2980b9"}});
    return chart.render();
  }
  if (p.contains("gap_curve")) {
    std::vector<std::pair<double, double>> f1, bleu, rouge;
    double i = 1.0;
    for (const auto& row : p["gap_curve"]) {
      f1.push_back({i, row["f1"].get<double>()});
      bleu.push_back({i, row["bleu4"].get<double>()});
      rouge.push_back({i, row["rouge_l"].get<double>()});
      i += 1.0;
    }
    SvgChart chart(1.0, i - 1.0, 0.0, 100.0, "decoder pretraining dataset (D1..D6)",
                   "metric (%)");
    chart.polyline(f1, "#c0392b");
    chart.polyline(bleu, "#27ae60");
    chart.polyline(rouge, "#2980b9");
    chart.legend({{"F1", "#c0392b"}, {"BLEU-4", "#27ae60"}, {"ROUGE-L", "#2980b9"}});
    return chart.render();
  }
  if (p.contains("points")) {
    std::vector<std::pair<double, double>> pts;
    double xmin = 1e300, xmax = -1e300;
    for (const auto& pt : p["points"]) {
      const double x = std::log10(static_cast<double>(pt["flops"].get<std::uint64_t>()));
      pts.push_back({x, pt["f1"].get<double>()});
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
    }
    SvgChart chart(xmin - 0.1, xmax + 0.1, 0.0, 100.0,
                   "compute per generation (log10 FLOPs)", "F1 (%)");
    chart.scatter(pts, "#8e44ad");
    return chart.render();
  }
  if (p.contains("f1")) {
    std::vector<std::pair<double, double>> pts;
    double i = 1.0;
    for (const auto& [k, v] : p["f1"].items()) pts.push_back({i++, v.get<double>()});
    SvgChart chart(0.5, std::max(1.5, i - 0.5), 0.0, 100.0, "setting", "F1 (%)");
    chart.scatter(pts, "#c0392b");
    return chart.render();
  }
  SvgChart chart(0, 1, 0, 1, "x", "y");
  return chart.render();
}

}  // namespace

std::vector<std::string> emit(const TrendReport& report, const std::string& format,
                              const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  const std::string stem = out_dir + "/" + report.preset;
  if (format == "csv") {
    write_file(stem + ".csv", csv_of(report));
    written.push_back(stem + ".csv");
  } else if (format == "md") {
    write_file(stem + ".md", md_of(report));
    written.push_back(stem + ".md");
  } else if (format == "svg") {
    write_file(stem + ".svg", svg_of(report));
    written.push_back(stem + ".svg");
  } else {
    throw ConfigError("emit: unknown format " + format + " (expected svg|csv|md)");
  }
  // the full payload always rides along for provenance
  write_file(stem + ".report.json", report.payload.dump(2) + "\n");
  written.push_back(stem + ".report.json");
  return written;
}

}  // namespace ctxcomp::lab
