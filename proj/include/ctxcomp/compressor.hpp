#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxcomp/model.hpp"
#include "ctxcomp/train.hpp"

namespace ctxcomp::icae {

using nn::Gradients;
using nn::ModelParams;
using nn::TraceRow;
using nn::TrainSchedule;

// Compression geometry: L context tokens into k memory slots, r = L/k.
struct CompressorConfig {
  int context_length = 128;  // L
  int slot_count = 32;       // k
  Token ae_token = Vocab::kAe;

  int ratio() const { return context_length / slot_count; }
  void validate() const;

  static CompressorConfig with_ratio(int context_length, int ratio = 4);
};

// Decoder pinned by digest. Fine-tuning verifies the digest each epoch and
// hard-aborts on any drift.
struct FrozenDecoder {
  explicit FrozenDecoder(const ModelParams<float>& params);

  const ModelParams<float>& params() const { return *params_; }
  std::uint64_t digest() const { return digest_; }
  void verify() const;

 private:
  const ModelParams<float>* params_;
  std::uint64_t digest_;
};

// Trainable half of the autoencoder: encoder weights, the k learnable
// memory embeddings appended to the context, and the linear projection
// into the decoder's representation space.
struct Autoencoder {
  ModelParams<float> encoder;
  Mat<float> mem_embed;  // k x enc_hidden
  Mat<float> proj_w;     // enc_hidden x dec_hidden, identity init when square
  Mat<float> proj_b;     // 1 x dec_hidden
  CompressorConfig ccfg;
  std::uint64_t decoder_digest = 0;

  static Autoencoder init(ModelParams<float> encoder, const FrozenDecoder& decoder,
                          const CompressorConfig& ccfg, std::uint64_t seed);
};

// Runs the encoder over [context ; memory embeddings], reads the final
// hidden states at the k memory positions and projects them. One row per
// slot; batched variant packs slots of all contexts consecutively.
Mat<float> encode(const Autoencoder& ae, const TokenSequence& context);
void encode_batch(const Autoencoder& ae, std::span<const TokenSequence> contexts,
                  Mat<float>& slots_out);

// Teacher-forced reconstruction loss (mean nats over the L context-token
// predictions). Decoder input is [slots ; AE ; context]; only positions
// whose targets are context tokens contribute.
double ae_loss(const FrozenDecoder& decoder, const Mat<float>& slots,
               const TokenSequence& context, const CompressorConfig& ccfg);

struct FinetuneOptions {
  int epochs = 3;
  int batch_size = 16;
  double max_lr = 1e-3;
  double min_lr = 1e-4;
  int warmup_steps = 50;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
};

// Optimizes encoder, memory embeddings and projection against the frozen
// decoder. Schedule shape is linear. Samples must all have length L.
Autoencoder finetune(ModelParams<float> encoder, const FrozenDecoder& decoder,
                     std::span<const TokenSequence> finetune_set,
                     const CompressorConfig& ccfg, const FinetuneOptions& opts,
                     std::uint64_t seed, std::vector<TraceRow>* trace = nullptr);

// encode -> greedy decode from [slots ; AE] for at most L steps, truncating
// at EOS. Deterministic.
TokenSequence reconstruct(const Autoencoder& ae, const FrozenDecoder& decoder,
                          const TokenSequence& context);
std::vector<TokenSequence> reconstruct_batch(const Autoencoder& ae,
                                             const FrozenDecoder& decoder,
                                             std::span<const TokenSequence> contexts);

// Autoencoder checkpoint: the nn checkpoint container extended with the
// memory/projection tensors, the compressor config and the frozen decoder
// digest.
void save_autoencoder(const std::string& path, const Autoencoder& ae);
Autoencoder load_autoencoder(const std::string& path);

}  // namespace ctxcomp::icae
