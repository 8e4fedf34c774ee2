#include "ctxcomp/compressor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "ctxcomp/digest.hpp"
#include "ctxcomp/errors.hpp"
#include "ctxcomp/rng.hpp"

namespace ctxcomp::icae {

using nn::AdamW;
using nn::DecodeState;
using nn::ForwardCache;
using nn::ModelConfig;

void CompressorConfig::validate() const {
  if (context_length <= 0 || slot_count <= 0)
    throw ConfigError("compressor config: non-positive L or k");
  if (context_length % slot_count != 0)
    throw ConfigError("compressor config: L must equal r*k exactly (L=" +
                      std::to_string(context_length) + ", k=" + std::to_string(slot_count) + ")");
}

CompressorConfig CompressorConfig::with_ratio(int context_length, int ratio) {
  if (ratio <= 0 || context_length % ratio != 0)
    throw ConfigError("compressor config: ratio must divide L");
  CompressorConfig c;
  c.context_length = context_length;
  c.slot_count = context_length / ratio;
  c.validate();
  return c;
}

FrozenDecoder::FrozenDecoder(const ModelParams<float>& params)
    : params_(&params), digest_(nn::tensor_digest(params)) {}

void FrozenDecoder::verify() const {
  if (nn::tensor_digest(*params_) != digest_)
    throw ContractError("frozen-contract failure: decoder tensors changed during fine-tuning");
}

Autoencoder Autoencoder::init(ModelParams<float> encoder, const FrozenDecoder& decoder,
                              const CompressorConfig& ccfg, std::uint64_t seed) {
  ccfg.validate();
  Autoencoder ae;
  ae.ccfg = ccfg;
  ae.decoder_digest = decoder.digest();
  const int enc_h = encoder.cfg.hidden_size;
  const int dec_h = decoder.params().cfg.hidden_size;
  ae.encoder = std::move(encoder);

  Rng rng(seed ^ 0xae5107);
  ae.mem_embed.resize(ccfg.slot_count, enc_h);
  ae.mem_embed.fill_gaussian(rng, 0.02);
  ae.proj_w.resize(enc_h, dec_h);
  ae.proj_b.resize(1, dec_h);
  if (enc_h == dec_h) {
    for (int i = 0; i < enc_h; ++i) ae.proj_w.at(i, i) = 1.0f;
  } else {
    ae.proj_w.fill_gaussian(rng, 1.0 / std::sqrt(static_cast<double>(enc_h)));
  }
  return ae;
}

namespace {

// Encoder forward over [context ; memory embeddings]; returns the cache so
// the training path can push gradients back through it. Raw (pre-projection)
// memory states land in enc_states (batch*k x enc_h).
void encoder_forward(const Autoencoder& ae, std::span<const TokenSequence> contexts,
                     ForwardCache<float>& cache, Mat<float>& enc_states) {
  const int L = ae.ccfg.context_length, k = ae.ccfg.slot_count;
  const int enc_h = ae.encoder.cfg.hidden_size;
  const int seq = L + k;
  const int B = static_cast<int>(contexts.size());

  Mat<float> x(B * seq, enc_h);
  for (int b = 0; b < B; ++b) {
    const auto& ctx = contexts[static_cast<std::size_t>(b)];
    if (static_cast<int>(ctx.size()) != L)
      throw ContractError("encode: context length " + std::to_string(ctx.size()) +
                          " != configured L " + std::to_string(L));
    nn::embed_tokens(ae.encoder, std::span<const Token>(ctx), x, b * seq);
    for (int i = 0; i < k; ++i) {
      const float* src = ae.mem_embed.row(i);
      std::copy(src, src + enc_h, x.row(b * seq + L + i));
    }
  }
  nn::forward(ae.encoder, x, B, seq, cache);

  enc_states.ensure(B * k, enc_h);
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < k; ++i) {
      const float* src = cache.hidden().row(b * seq + L + i);
      std::copy(src, src + enc_h, enc_states.row(b * k + i));
    }
  }
}

void project_slots(const Autoencoder& ae, const Mat<float>& enc_states, Mat<float>& slots) {
  matmul(enc_states, ae.proj_w, slots);
  for (int r = 0; r < slots.rows; ++r) {
    float* row = slots.row(r);
    for (int j = 0; j < slots.cols; ++j) row[j] += ae.proj_b.data[static_cast<std::size_t>(j)];
  }
}

// Decoder input layout per sequence: [k slots ; AE ; L context tokens].
// Targets are the L context tokens, predicted from position k onward.
void decoder_batch_inputs(const ModelParams<float>& dec, const Mat<float>& slots,
                          std::span<const TokenSequence> contexts,
                          const CompressorConfig& ccfg, Mat<float>& x,
                          std::vector<Token>& targets, std::vector<std::uint8_t>& mask) {
  const int L = ccfg.context_length, k = ccfg.slot_count;
  const int seq = k + 1 + L;
  const int dec_h = dec.cfg.hidden_size;
  const int B = static_cast<int>(contexts.size());

  x.ensure(B * seq, dec_h);
  targets.assign(static_cast<std::size_t>(B) * seq, 0);
  mask.assign(static_cast<std::size_t>(B) * seq, 0);
  const Token ae_tok[1] = {ccfg.ae_token};
  for (int b = 0; b < B; ++b) {
    const auto& ctx = contexts[static_cast<std::size_t>(b)];
    for (int i = 0; i < k; ++i) {
      const float* src = slots.row(b * k + i);
      std::copy(src, src + dec_h, x.row(b * seq + i));
    }
    nn::embed_tokens(dec, std::span<const Token>(ae_tok, 1), x, b * seq + k);
    nn::embed_tokens(dec, std::span<const Token>(ctx), x, b * seq + k + 1);
    for (int t = 0; t < L; ++t) {
      targets[static_cast<std::size_t>(b * seq + k + t)] = ctx[static_cast<std::size_t>(t)];
      mask[static_cast<std::size_t>(b * seq + k + t)] = 1;
    }
  }
}

}  // namespace

Mat<float> encode(const Autoencoder& ae, const TokenSequence& context) {
  const TokenSequence* one = &context;
  ForwardCache<float> cache;
  Mat<float> enc_states, slots;
  encoder_forward(ae, std::span<const TokenSequence>(one, 1), cache, enc_states);
  project_slots(ae, enc_states, slots);
  if (!slots.all_finite()) throw NumericError("encode: non-finite slot values");
  return slots;
}

void encode_batch(const Autoencoder& ae, std::span<const TokenSequence> contexts,
                  Mat<float>& slots_out) {
  ForwardCache<float> cache;
  Mat<float> enc_states;
  encoder_forward(ae, contexts, cache, enc_states);
  project_slots(ae, enc_states, slots_out);
}

double ae_loss(const FrozenDecoder& decoder, const Mat<float>& slots,
               const TokenSequence& context, const CompressorConfig& ccfg) {
  ccfg.validate();
  if (slots.rows != ccfg.slot_count || slots.cols != decoder.params().cfg.hidden_size)
    throw ContractError("ae_loss: slot shape mismatch");
  if (static_cast<int>(context.size()) != ccfg.context_length)
    throw ContractError("ae_loss: context length mismatch");

  const TokenSequence* one = &context;
  Mat<float> x;
  std::vector<Token> targets;
  std::vector<std::uint8_t> mask;
  decoder_batch_inputs(decoder.params(), slots, std::span<const TokenSequence>(one, 1),
                       ccfg, x, targets, mask);
  ForwardCache<float> cache;
  const int seq = ccfg.slot_count + 1 + ccfg.context_length;
  nn::forward(decoder.params(), x, 1, seq, cache);
  Mat<float> logits;
  nn::logits_from_hidden(decoder.params(), cache.hidden(), logits);
  return nn::nll_loss(logits, std::span<const Token>(targets),
                      std::span<const std::uint8_t>(mask), static_cast<Mat<float>*>(nullptr));
}

Autoencoder finetune(ModelParams<float> encoder, const FrozenDecoder& decoder,
                     std::span<const TokenSequence> finetune_set,
                     const CompressorConfig& ccfg, const FinetuneOptions& opts,
                     std::uint64_t seed, std::vector<TraceRow>* trace) {
  ccfg.validate();
  const int B = opts.batch_size;
  const std::size_t n = finetune_set.size();
  if (n < static_cast<std::size_t>(B))
    throw DataError("finetune: need at least one full batch (" + std::to_string(n) + " < " +
                    std::to_string(B) + ")");
  const int steps_per_epoch = static_cast<int>(n / static_cast<std::size_t>(B));
  TrainSchedule schedule;
  schedule.warmup_steps = std::min(opts.warmup_steps, steps_per_epoch * opts.epochs / 10);
  schedule.total_steps = steps_per_epoch * opts.epochs;
  schedule.max_lr = opts.max_lr;
  schedule.min_lr = opts.min_lr;
  schedule.shape = nn::ScheduleShape::linear;
  schedule.batch_size = B;
  schedule.weight_decay = opts.weight_decay;
  schedule.grad_clip = opts.grad_clip;

  Autoencoder ae = Autoencoder::init(std::move(encoder), decoder, ccfg, seed);
  const int L = ccfg.context_length, k = ccfg.slot_count;
  const int enc_h = ae.encoder.cfg.hidden_size;
  const int dec_h = decoder.params().cfg.hidden_size;
  const int enc_seq = L + k, dec_seq = k + 1 + L;
  if (enc_seq > ae.encoder.cfg.max_position)
    throw CapacityError("finetune: L+k exceeds encoder max_position");
  if (dec_seq > decoder.params().cfg.max_position)
    throw CapacityError("finetune: k+1+L exceeds decoder max_position");

  Gradients<float> enc_grads = ModelParams<float>::zeros_like(ae.encoder);
  Mat<float> g_mem(k, enc_h), g_proj_w(enc_h, dec_h), g_proj_b(1, dec_h);
  AdamW opt;
  opt.add_model(ae.encoder, enc_grads);
  opt.add("mem_embed", &ae.mem_embed, &g_mem);
  opt.add("proj_w", &ae.proj_w, &g_proj_w);
  opt.add("proj_b", &ae.proj_b, &g_proj_b, false);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng shuffle_rng(seed ^ 0xf17e);

  ForwardCache<float> enc_cache, dec_cache;
  Mat<float> enc_states, slots, dec_x, logits, d_logits;
  std::vector<Token> targets;
  std::vector<std::uint8_t> mask;
  std::vector<TokenSequence> batch(static_cast<std::size_t>(B));
  Gradients<float> dec_grads_unused = ModelParams<float>::zeros_like(decoder.params());

  int step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    for (int bstart = 0; bstart + B <= static_cast<int>(n); bstart += B) {
      for (int b = 0; b < B; ++b)
        batch[static_cast<std::size_t>(b)] = finetune_set[order[static_cast<std::size_t>(bstart + b)]];

      encoder_forward(ae, batch, enc_cache, enc_states);
      project_slots(ae, enc_states, slots);
      decoder_batch_inputs(decoder.params(), slots, batch, ccfg, dec_x, targets, mask);
      nn::forward(decoder.params(), dec_x, B, dec_seq, dec_cache);
      nn::logits_from_hidden(decoder.params(), dec_cache.hidden(), logits);
      const double loss = nn::nll_loss(logits, std::span<const Token>(targets),
                                       std::span<const std::uint8_t>(mask), &d_logits);

      // decoder backward for input gradients only; its weights stay frozen
      Mat<float> d_dec_x;
      nn::backward_from_logits(decoder.params(), dec_cache, d_logits, dec_grads_unused,
                               &d_dec_x, /*param_grads=*/false);

      // slot gradients -> projection backward
      Mat<float> d_slots(B * k, dec_h);
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < k; ++i)
          std::copy(d_dec_x.row(b * dec_seq + i), d_dec_x.row(b * dec_seq + i) + dec_h,
                    d_slots.row(b * k + i));

      visit_tensors(enc_grads, [](const std::string&, Mat<float>& m) { m.zero(); });
      g_mem.zero();
      g_proj_w.zero();
      g_proj_b.zero();

      gemm(true, false, enc_h, dec_h, B * k, 1.0f, enc_states.data.data(), enc_h,
           d_slots.data.data(), dec_h, 0.0f, g_proj_w.data.data(), dec_h);
      for (int r = 0; r < d_slots.rows; ++r) {
        const float* row = d_slots.row(r);
        for (int j = 0; j < dec_h; ++j) g_proj_b.data[static_cast<std::size_t>(j)] += row[j];
      }
      Mat<float> d_enc_states(B * k, enc_h);
      gemm(false, true, B * k, enc_h, dec_h, 1.0f, d_slots.data.data(), dec_h,
           ae.proj_w.data.data(), dec_h, 0.0f, d_enc_states.data.data(), enc_h);

      // route into the encoder at the memory positions
      Mat<float> d_enc_hidden(B * enc_seq, enc_h);
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < k; ++i)
          std::copy(d_enc_states.row(b * k + i), d_enc_states.row(b * k + i) + enc_h,
                    d_enc_hidden.row(b * enc_seq + L + i));
      Mat<float> d_enc_x;
      nn::backward_from_hidden(ae.encoder, enc_cache, d_enc_hidden, enc_grads, &d_enc_x);
      for (int b = 0; b < B; ++b) {
        nn::scatter_embedding_grad(enc_grads, std::span<const Token>(batch[static_cast<std::size_t>(b)]),
                                   d_enc_x, b * enc_seq);
        for (int i = 0; i < k; ++i) {
          const float* src = d_enc_x.row(b * enc_seq + L + i);
          float* dst = g_mem.row(i);
          for (int j = 0; j < enc_h; ++j) dst[j] += src[j];
        }
      }

      opt.clip(schedule.grad_clip);
      opt.step(schedule, step);
      if (trace) trace->push_back({step, nn::lr_at(schedule, step), loss});
      ++step;
    }
    decoder.verify();  // digest check each epoch
  }
  decoder.verify();
  return ae;
}

TokenSequence reconstruct(const Autoencoder& ae, const FrozenDecoder& decoder,
                          const TokenSequence& context) {
  const TokenSequence* one = &context;
  auto out = reconstruct_batch(ae, decoder, std::span<const TokenSequence>(one, 1));
  return out[0];
}

std::vector<TokenSequence> reconstruct_batch(const Autoencoder& ae,
                                             const FrozenDecoder& decoder,
                                             std::span<const TokenSequence> contexts) {
  if (nn::tensor_digest(decoder.params()) != ae.decoder_digest)
    throw ContractError("reconstruct: decoder digest does not match the checkpoint");
  const int L = ae.ccfg.context_length, k = ae.ccfg.slot_count;
  const ModelParams<float>& dec = decoder.params();
  const int dec_h = dec.cfg.hidden_size;
  const int B = static_cast<int>(contexts.size());

  Mat<float> slots;
  encode_batch(ae, contexts, slots);

  DecodeState<float> state(dec.cfg, B, k + 1 + L);
  Mat<float> x(B, dec_h), logits;
  // prefill: slot vectors then the AE indicator
  for (int i = 0; i < k; ++i) {
    for (int b = 0; b < B; ++b)
      std::copy(slots.row(b * k + i), slots.row(b * k + i) + dec_h, x.row(b));
    nn::decode_step(dec, x, state, logits);
  }
  const Token ae_tok[1] = {ae.ccfg.ae_token};
  for (int b = 0; b < B; ++b) nn::embed_tokens(dec, std::span<const Token>(ae_tok, 1), x, b);
  nn::decode_step(dec, x, state, logits);

  std::vector<TokenSequence> out(static_cast<std::size_t>(B));
  std::vector<bool> done(static_cast<std::size_t>(B), false);
  for (int t = 0; t < L; ++t) {
    for (int b = 0; b < B; ++b) {
      const float* row = logits.row(b);
      int best = 0;
      for (int j = 1; j < logits.cols; ++j)
        if (row[j] > row[best]) best = j;
      const Token tok = static_cast<Token>(best);
      if (!done[static_cast<std::size_t>(b)]) {
        if (tok == Vocab::kEos)
          done[static_cast<std::size_t>(b)] = true;
        else
          out[static_cast<std::size_t>(b)].push_back(tok);
      }
      const Token feed[1] = {tok};
      nn::embed_tokens(dec, std::span<const Token>(feed, 1), x, b);
    }
    bool all_done = true;
    for (bool d : done) all_done = all_done && d;
    if (all_done || t == L - 1) break;
    nn::decode_step(dec, x, state, logits);
  }
  return out;
}

// ---- checkpoint container ----

namespace {

constexpr char kAeMagic[8] = {'C', 'A', 'E', 'K', '0', '0', '0', '1'};

void append_mat(std::vector<unsigned char>& out, const Mat<float>& m) {
  for (float f : m.data) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    out.push_back(static_cast<unsigned char>(u & 0xff));
    out.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
  }
}

void read_mat(std::ifstream& is, Mat<float>& m, std::vector<unsigned char>& all) {
  std::vector<unsigned char> buf(m.size() * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw DataError("autoencoder checkpoint truncated");
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(buf[4 * i]) |
                            (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    std::memcpy(&m.data[i], &u, 4);
  }
  all.insert(all.end(), buf.begin(), buf.end());
}

}  // namespace

void save_autoencoder(const std::string& path, const Autoencoder& ae) {
  nlohmann::json header;
  header["encoder_config"] = {{"hidden_size", ae.encoder.cfg.hidden_size},
                              {"intermediate_size", ae.encoder.cfg.intermediate_size},
                              {"n_layers", ae.encoder.cfg.n_layers},
                              {"n_heads", ae.encoder.cfg.n_heads},
                              {"n_kv_heads", ae.encoder.cfg.n_kv_heads},
                              {"vocab_size", ae.encoder.cfg.vocab_size},
                              {"max_position", ae.encoder.cfg.max_position},
                              {"tier", ae.encoder.cfg.tier}};
  header["provenance"] = ae.encoder.provenance;
  header["compressor"] = {{"context_length", ae.ccfg.context_length},
                          {"slot_count", ae.ccfg.slot_count},
                          {"ae_token", ae.ccfg.ae_token}};
  header["decoder_digest"] = digest_hex(ae.decoder_digest);
  header["proj"] = {{"rows", ae.proj_w.rows}, {"cols", ae.proj_w.cols}};
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path);
  os.write(kAeMagic, 8);
  const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                         static_cast<unsigned char>((len >> 8) & 0xff),
                         static_cast<unsigned char>((len >> 16) & 0xff),
                         static_cast<unsigned char>((len >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(lb), 4);
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  std::vector<unsigned char> bytes;
  visit_tensors(ae.encoder, [&](const std::string&, const Mat<float>& m) { append_mat(bytes, m); });
  append_mat(bytes, ae.mem_embed);
  append_mat(bytes, ae.proj_w);
  append_mat(bytes, ae.proj_b);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  const std::uint64_t digest = fnv1a(bytes.data(), bytes.size());
  unsigned char db[8];
  for (int i = 0; i < 8; ++i) db[i] = static_cast<unsigned char>((digest >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(db), 8);
  if (!os) throw DataError("write failed: " + path);
}

Autoencoder load_autoencoder(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kAeMagic, 8) != 0)
    throw DataError("bad autoencoder checkpoint magic: " + path);
  unsigned char lb[4];
  is.read(reinterpret_cast<char*>(lb), 4);
  const std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                            (static_cast<std::uint32_t>(lb[1]) << 8) |
                            (static_cast<std::uint32_t>(lb[2]) << 16) |
                            (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string hs(len, '\0');
  is.read(hs.data(), len);
  if (!is) throw DataError("autoencoder checkpoint truncated: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  ModelConfig cfg;
  const auto& jc = header.at("encoder_config");
  cfg.hidden_size = jc.at("hidden_size").get<int>();
  cfg.intermediate_size = jc.at("intermediate_size").get<int>();
  cfg.n_layers = jc.at("n_layers").get<int>();
  cfg.n_heads = jc.at("n_heads").get<int>();
  cfg.n_kv_heads = jc.at("n_kv_heads").get<int>();
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.max_position = jc.at("max_position").get<int>();
  cfg.tier = jc.at("tier").get<std::string>();

  Autoencoder ae;
  ae.encoder = ModelParams<float>::init(cfg, 0);
  ae.encoder.provenance = header.value("provenance", "");
  ae.ccfg.context_length = header.at("compressor").at("context_length").get<int>();
  ae.ccfg.slot_count = header.at("compressor").at("slot_count").get<int>();
  ae.ccfg.ae_token = header.at("compressor").at("ae_token").get<Token>();
  ae.decoder_digest = std::stoull(header.at("decoder_digest").get<std::string>(), nullptr, 16);
  ae.mem_embed.resize(ae.ccfg.slot_count, cfg.hidden_size);
  ae.proj_w.resize(header.at("proj").at("rows").get<int>(), header.at("proj").at("cols").get<int>());
  ae.proj_b.resize(1, ae.proj_w.cols);

  std::vector<unsigned char> bytes;
  visit_tensors(ae.encoder, [&](const std::string&, Mat<float>& m) { read_mat(is, m, bytes); });
  read_mat(is, ae.mem_embed, bytes);
  read_mat(is, ae.proj_w, bytes);
  read_mat(is, ae.proj_b, bytes);

  unsigned char db[8];
  is.read(reinterpret_cast<char*>(db), 8);
  if (!is) throw DataError("autoencoder checkpoint missing digest: " + path);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(db[i]) << (8 * i);
  if (stored != fnv1a(bytes.data(), bytes.size()))
    throw DataError("autoencoder checkpoint integrity digest mismatch: " + path);
  return ae;
}

}  // namespace ctxcomp::icae
