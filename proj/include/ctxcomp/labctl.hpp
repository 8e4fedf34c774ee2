#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxcomp/config.hpp"
#include "ctxcomp/corpus.hpp"
#include "ctxcomp/metrics.hpp"
#include "ctxcomp/model.hpp"

namespace ctxcomp::lab {

// Desk-scale budgets. The defaults are the full desk experiment; presets
// and tests shrink them through the TOML config or flags.
struct LabBudget {
  std::uint64_t pretrain_tokens = 20000000;
  int pretrain_seq_len = 128;
  int pretrain_batch = 16;
  int pretrain_warmup = 100;
  double pretrain_max_lr = 3e-3;
  double pretrain_min_lr = 3e-4;

  int finetune_samples = 10000;
  int finetune_epochs = 3;
  int finetune_batch = 16;
  int finetune_warmup = 100;
  double finetune_max_lr = 1e-3;
  double finetune_min_lr = 1e-4;
  double finetune_weight_decay = 0.1;

  int test_samples = 1000;
  int context_length = 128;  // L; slot count = L / ratio
  int ratio = 4;
  int max_position = 512;
  std::uint64_t base_seed = 1234;

  void apply(const ConfigFile& cfg);
  nlohmann::json to_json() const;
};

struct PlanRow {
  std::string enc_ds;
  std::string enc_tier;
  std::string dec_ds;
  std::string dec_tier;
  std::string ft_ds;    // fine-tuning data distribution
  std::string eval_ds;  // evaluation distribution; "mix5" = all-family probe
  std::uint64_t seed = 1;
};

struct ExperimentPlan {
  std::string preset;
  std::vector<PlanRow> rows;
  LabBudget budget;

  std::string digest() const;  // stable across machines
};

// Expands one of the paper-protocol presets: rq1_entropy, rq1_gap,
// rq2_alignment, rq3_scaling, rq4_flops, rq5_random, or the empty plan
// "custom". n_seeds > 1 replicates every row with distinct seeds.
ExperimentPlan plan_from_preset(const std::string& preset, const LabBudget& budget,
                                int n_seeds = 1);

struct RunResources {
  std::string home;          // artifact root (checkpoints, data, records)
  bool force = false;        // ignore completed records
  int stop_after_rows = -1;  // <0: run all; otherwise stop early (tests)
};

// One experiment outcome, serialized as one JSON line. wall_clock_s is the
// only nondeterministic field; canonical_record strips it.
using RunRecord = nlohmann::json;

RunRecord canonical_record(const RunRecord& r);
std::string row_fingerprint(const PlanRow& row, const LabBudget& budget);

// Executes pretrain -> finetune -> eval per row with checkpoint reuse; a
// (dataset, tier) pretrain is built once and shared. Appends records to
// <home>/records/<preset>.jsonl as rows complete; a rerun after an
// interruption skips completed fingerprints, so the final record set is
// identical to an uninterrupted run. Failed rows are recorded and skipped.
std::vector<RunRecord> run_plan(const ExperimentPlan& plan, const RunResources& res);

std::vector<RunRecord> load_records(const std::string& path);
std::string records_path(const RunResources& res, const std::string& preset);

// Aggregated analysis per preset: bucket curves, gap curves, orderings,
// scatter points, and named boolean verdicts.
struct TrendReport {
  std::string preset;
  nlohmann::json payload;
  std::vector<std::string> warnings;  // e.g. missing fingerprints

  bool verdict(const std::string& name) const;
};

TrendReport analyze(const std::vector<RunRecord>& records, const ExperimentPlan& plan);

// Renders a report deterministically. Formats: "csv", "md", "svg".
// Returns the paths written.
std::vector<std::string> emit(const TrendReport& report, const std::string& format,
                              const std::string& out_dir);

// ---- building blocks shared with the CLI ----

struct DatasetPaths {
  std::string dir;
  std::string pretrain_file;
  std::string finetune_file;
  std::string test_file;
  std::string manifest_file;
};

// Generates (or reuses) the corpus triplet for a dataset id under
// <home>/data. Deterministic in (dataset id, budget).
DatasetPaths ensure_dataset(const std::string& home, const std::string& dataset_id,
                            const LabBudget& budget);

// Pretrains (or reuses) the LM checkpoint for (dataset, tier).
std::string ensure_pretrain(const std::string& home, const std::string& dataset_id,
                            const std::string& tier, const LabBudget& budget);

// All-family probe set for entropy experiments: test_samples samples of
// length L, equally many per family, with family labels.
struct ProbeSet {
  std::vector<TokenSequence> samples;
  std::vector<std::string> family;
};
ProbeSet build_probe_set(const LabBudget& budget);

}  // namespace ctxcomp::lab
