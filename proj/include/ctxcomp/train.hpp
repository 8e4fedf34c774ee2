#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxcomp/model.hpp"

namespace ctxcomp::nn {

enum class ScheduleShape { cosine, linear };

struct TrainSchedule {
  int warmup_steps = 0;
  int total_steps = 1;
  double max_lr = 1e-3;
  double min_lr = 1e-4;
  ScheduleShape shape = ScheduleShape::cosine;
  int grad_accum = 1;
  int batch_size = 16;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
};

// lr ramps linearly from 0 to max_lr over the warmup, then decays to
// exactly min_lr at total_steps.
double lr_at(const TrainSchedule& s, int step);

// Decoupled-weight-decay Adam (beta1 0.9, beta2 0.95, eps 1e-8). Norm
// weights are exempt from decay. Aborts on non-finite gradients, naming
// the offending tensor. Parameter/gradient tensors are registered once;
// the compressor registers encoder weights plus its own extra tensors.
class AdamW {
 public:
  void add(const std::string& name, Mat<float>* param, Mat<float>* grad, bool decay = true);
  void add_model(ModelParams<float>& params, Gradients<float>& grads);

  // Scales all registered gradients so their global L2 norm is at most
  // max_norm; returns the pre-clip norm.
  double clip(double max_norm);

  void step(const TrainSchedule& schedule, int step_index);

  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;

 private:
  struct Slot {
    std::string name;
    Mat<float>* param;
    Mat<float>* grad;
    bool decay;
    std::vector<float> m, v;
  };
  std::vector<Slot> slots_;
  int t_ = 0;
};

struct TraceRow {
  int step = 0;
  double lr = 0.0;
  double nll = 0.0;
};

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace);

// Next-token LM pretraining over a packed token stream. The stream is cut
// into seq_len windows, shuffled per epoch under the seed, and consumed in
// fixed batch order, so results are bit-reproducible for a fixed thread
// count. Declares divergence if the loss stays above 2x the initial loss
// for 500 consecutive steps.
ModelParams<float> pretrain(const ModelConfig& cfg, const TrainSchedule& schedule,
                            const TokenSequence& stream, std::uint64_t seed, int seq_len,
                            const std::string& provenance,
                            std::vector<TraceRow>* trace = nullptr);

// Mean next-token nll (nats) of the model over windows of the stream;
// evaluation-only helper for held-out scoring.
double evaluate_nll(const ModelParams<float>& params, const TokenSequence& stream,
                    int seq_len, int max_windows);

// ---- checkpoint container ----
struct CheckpointMeta {
  ModelConfig cfg;
  std::string provenance;
  std::string role;  // advisory: "encoder" / "decoder" / ""
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

// Raw little-endian f32 tensors in visit_tensors order, preceded by a JSON
// header and followed by a FNV-1a integrity trailer over the tensor bytes.
void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const CheckpointMeta& meta);
ModelParams<float> load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr);

// Digest over the little-endian tensor byte stream (the same value as the
// checkpoint trailer); the frozen-decoder contract compares these.
std::uint64_t tensor_digest(const ModelParams<float>& params);

}  // namespace ctxcomp::nn
