#include "ctxcomp/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

#include "ctxcomp/digest.hpp"
#include "ctxcomp/errors.hpp"
#include "ctxcomp/rng.hpp"

namespace ctxcomp::nn {

double lr_at(const TrainSchedule& s, int step) {
  if (s.total_steps <= 0) throw ConfigError("schedule: total_steps must be > 0");
  if (step < 0) step = 0;
  if (step >= s.total_steps) return s.min_lr;
  if (s.warmup_steps > 0 && step <= s.warmup_steps)
    return s.max_lr * static_cast<double>(step) / s.warmup_steps;
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double frac = static_cast<double>(step - s.warmup_steps) / span;
  if (s.shape == ScheduleShape::cosine)
    return s.min_lr + 0.5 * (s.max_lr - s.min_lr) * (1.0 + std::cos(M_PI * frac));
  return s.max_lr + (s.min_lr - s.max_lr) * frac;
}

void AdamW::add(const std::string& name, Mat<float>* param, Mat<float>* grad, bool decay) {
  if (param->size() != grad->size())
    throw ContractError("optimizer: param/grad shape mismatch at " + name);
  Slot s;
  s.name = name;
  s.param = param;
  s.grad = grad;
  s.decay = decay;
  s.m.assign(param->size(), 0.0f);
  s.v.assign(param->size(), 0.0f);
  slots_.push_back(std::move(s));
}

void AdamW::add_model(ModelParams<float>& params, Gradients<float>& grads) {
  std::vector<Mat<float>*> gptrs;
  visit_tensors(grads, [&](const std::string&, Mat<float>& g) { gptrs.push_back(&g); });
  std::size_t ti = 0;
  visit_tensors(params, [&](const std::string& name, Mat<float>& p) {
    add(name, &p, gptrs[ti], name.find("norm") == std::string::npos);
    ++ti;
  });
}

double AdamW::clip(double max_norm) {
  double sq = 0.0;
  for (const auto& s : slots_)
    for (float x : s.grad->data) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& s : slots_)
      for (float& x : s.grad->data) x *= scale;
  }
  return norm;
}

void AdamW::step(const TrainSchedule& schedule, int step_index) {
  if (step_index >= schedule.total_steps)
    throw ContractError("optimizer_step: step beyond schedule total_steps");
  const double lr = lr_at(schedule, step_index);
  t_ += 1;
  const double bc1 = 1.0 - std::pow(beta1, t_);
  const double bc2 = 1.0 - std::pow(beta2, t_);

  for (auto& s : slots_) {
    const bool decay = schedule.weight_decay > 0.0 && s.decay;
    for (std::size_t i = 0; i < s.param->data.size(); ++i) {
      const double gi = s.grad->data[i];
      if (!std::isfinite(gi))
        throw NumericError("optimizer_step: non-finite gradient in tensor " + s.name);
      s.m[i] = static_cast<float>(beta1 * s.m[i] + (1.0 - beta1) * gi);
      s.v[i] = static_cast<float>(beta2 * s.v[i] + (1.0 - beta2) * gi * gi);
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + eps);
      if (decay) update += schedule.weight_decay * s.param->data[i];
      s.param->data[i] = static_cast<float>(s.param->data[i] - lr * update);
    }
  }
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path);
  os << "step,lr,nll\n";
  char buf[96];
  for (const auto& row : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.8g,%.8g\n", row.step, row.lr, row.nll);
    os << buf;
  }
}

namespace {

void zero_grads(Gradients<float>& g) {
  visit_tensors(g, [](const std::string&, Mat<float>& m) { m.zero(); });
}

}  // namespace

ModelParams<float> pretrain(const ModelConfig& cfg, const TrainSchedule& schedule,
                            const TokenSequence& stream, std::uint64_t seed, int seq_len,
                            const std::string& provenance, std::vector<TraceRow>* trace) {
  if (seq_len < 2) throw ConfigError("pretrain: seq_len must be >= 2");
  const std::size_t n_windows = stream.size() > static_cast<std::size_t>(seq_len)
                                    ? (stream.size() - 1) / static_cast<std::size_t>(seq_len)
                                    : 0;
  if (n_windows == 0) throw DataError("pretrain: stream shorter than one window");

  ModelParams<float> params = ModelParams<float>::init(cfg, seed);
  params.provenance = provenance;
  Gradients<float> grads = ModelParams<float>::zeros_like(params);
  AdamW opt;
  opt.add_model(params, grads);

  const int B = schedule.batch_size;
  const int rows = B * seq_len;
  Mat<float> x(rows, cfg.hidden_size);
  ForwardCache<float> cache;
  Mat<float> logits, d_logits;
  std::vector<Token> inputs(static_cast<std::size_t>(rows));
  std::vector<Token> targets(static_cast<std::size_t>(rows));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(rows), 1);

  std::vector<std::size_t> order(n_windows);
  for (std::size_t i = 0; i < n_windows; ++i) order[i] = i;
  Rng shuffle_rng(seed ^ 0x5b5ad4);
  shuffle(order, shuffle_rng);

  double initial_loss = -1.0;
  int over_count = 0;
  std::size_t cursor = 0;
  for (int step = 0; step < schedule.total_steps; ++step) {
    for (int b = 0; b < B; ++b) {
      if (cursor >= n_windows) {  // new epoch, fresh deterministic order
        cursor = 0;
        shuffle(order, shuffle_rng);
      }
      const std::size_t off = order[cursor++] * static_cast<std::size_t>(seq_len);
      for (int t = 0; t < seq_len; ++t) {
        inputs[static_cast<std::size_t>(b * seq_len + t)] = stream[off + t];
        targets[static_cast<std::size_t>(b * seq_len + t)] = stream[off + t + 1];
      }
    }
    embed_tokens(params, std::span<const Token>(inputs), x, 0);
    forward(params, x, B, seq_len, cache);
    logits_from_hidden(params, cache.hidden(), logits);
    const double loss = nll_loss(logits, std::span<const Token>(targets),
                                 std::span<const std::uint8_t>(mask), &d_logits);

    zero_grads(grads);
    Mat<float> dx;
    backward_from_logits(params, cache, d_logits, grads, &dx);
    scatter_embedding_grad(grads, std::span<const Token>(inputs), dx, 0);
    opt.clip(schedule.grad_clip);
    opt.step(schedule, step);

    if (initial_loss < 0.0) initial_loss = loss;
    over_count = (loss > 2.0 * initial_loss) ? over_count + 1 : 0;
    if (over_count >= 500)
      throw NumericError("pretrain: loss diverged (above 2x initial for 500 steps)");
    if (trace) trace->push_back({step, lr_at(schedule, step), loss});
  }

  if (!params.all_finite()) throw NumericError("pretrain: non-finite parameters");
  return params;
}

double evaluate_nll(const ModelParams<float>& params, const TokenSequence& stream,
                    int seq_len, int max_windows) {
  const std::size_t n_windows = stream.size() > static_cast<std::size_t>(seq_len)
                                    ? (stream.size() - 1) / static_cast<std::size_t>(seq_len)
                                    : 0;
  if (n_windows == 0) throw DataError("evaluate_nll: stream shorter than one window");
  const int n = static_cast<int>(std::min<std::size_t>(n_windows, max_windows));

  ForwardCache<float> cache;
  Mat<float> x(seq_len, params.cfg.hidden_size), logits;
  std::vector<Token> inputs(static_cast<std::size_t>(seq_len));
  std::vector<Token> targets(static_cast<std::size_t>(seq_len));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(seq_len), 1);
  double total = 0.0;
  for (int w = 0; w < n; ++w) {
    const std::size_t off = static_cast<std::size_t>(w) * seq_len;
    for (int t = 0; t < seq_len; ++t) {
      inputs[static_cast<std::size_t>(t)] = stream[off + t];
      targets[static_cast<std::size_t>(t)] = stream[off + t + 1];
    }
    embed_tokens(params, std::span<const Token>(inputs), x, 0);
    forward(params, x, 1, seq_len, cache);
    logits_from_hidden(params, cache.hidden(), logits);
    total += nll_loss(logits, std::span<const Token>(targets),
                      std::span<const std::uint8_t>(mask), static_cast<Mat<float>*>(nullptr));
  }
  return total / n;
}

// ---- checkpoint container ----

namespace {

constexpr char kCkptMagic[8] = {'C', 'C', 'K', 'P', '0', '0', '0', '1'};

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"hidden_size", cfg.hidden_size},
          {"intermediate_size", cfg.intermediate_size},
          {"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},
          {"n_kv_heads", cfg.n_kv_heads},
          {"vocab_size", cfg.vocab_size},
          {"max_position", cfg.max_position},
          {"tier", cfg.tier}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.hidden_size = j.at("hidden_size").get<int>();
  cfg.intermediate_size = j.at("intermediate_size").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.n_kv_heads = j.at("n_kv_heads").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_position = j.at("max_position").get<int>();
  cfg.tier = j.at("tier").get<std::string>();
  cfg.validate();
  return cfg;
}

void append_le_bytes(std::vector<unsigned char>& out, const Mat<float>& m) {
  for (float f : m.data) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    out.push_back(static_cast<unsigned char>(u & 0xff));
    out.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
  }
}

}  // namespace

std::uint64_t tensor_digest(const ModelParams<float>& params) {
  std::uint64_t h = kFnvOffset;
  visit_tensors(params, [&](const std::string&, const Mat<float>& m) {
    for (float f : m.data) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      unsigned char b[4] = {static_cast<unsigned char>(u & 0xff),
                            static_cast<unsigned char>((u >> 8) & 0xff),
                            static_cast<unsigned char>((u >> 16) & 0xff),
                            static_cast<unsigned char>((u >> 24) & 0xff)};
      h = fnv1a(b, 4, h);
    }
  });
  return h;
}

void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const CheckpointMeta& meta) {
  nlohmann::json header;
  header["config"] = config_to_json(params.cfg);
  header["provenance"] = meta.provenance.empty() ? params.provenance : meta.provenance;
  header["role"] = meta.role;
  header["step"] = meta.step;
  header["seed"] = meta.seed;
  nlohmann::json tensors = nlohmann::json::array();
  visit_tensors(params, [&](const std::string& name, const Mat<float>& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows}, {"cols", m.cols}});
  });
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path);
  os.write(kCkptMagic, 8);
  const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                         static_cast<unsigned char>((len >> 8) & 0xff),
                         static_cast<unsigned char>((len >> 16) & 0xff),
                         static_cast<unsigned char>((len >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(lb), 4);
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  std::vector<unsigned char> bytes;
  visit_tensors(params, [&](const std::string&, const Mat<float>& m) { append_le_bytes(bytes, m); });
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));

  const std::uint64_t digest = fnv1a(bytes.data(), bytes.size());
  unsigned char db[8];
  for (int i = 0; i < 8; ++i) db[i] = static_cast<unsigned char>((digest >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(db), 8);
  if (!os) throw DataError("write failed: " + path);
}

ModelParams<float> load_checkpoint(const std::string& path, CheckpointMeta* meta_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw DataError("bad checkpoint magic: " + path);
  unsigned char lb[4];
  is.read(reinterpret_cast<char*>(lb), 4);
  if (!is) throw DataError("checkpoint truncated: " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(lb[0]) | (static_cast<std::uint32_t>(lb[1]) << 8) |
                            (static_cast<std::uint32_t>(lb[2]) << 16) |
                            (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string hs(len, '\0');
  is.read(hs.data(), len);
  if (!is) throw DataError("checkpoint truncated: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  ModelConfig cfg = config_from_json(header.at("config"));
  ModelParams<float> params = ModelParams<float>::init(cfg, 0);
  params.provenance = header.value("provenance", "");
  if (meta_out) {
    meta_out->cfg = cfg;
    meta_out->provenance = params.provenance;
    meta_out->role = header.value("role", "");
    meta_out->step = header.value("step", std::int64_t{0});
    meta_out->seed = header.value("seed", std::uint64_t{0});
  }

  std::vector<unsigned char> bytes;
  visit_tensors(params, [&](const std::string&, Mat<float>& m) {
    std::vector<unsigned char> buf(m.size() * 4);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw DataError("checkpoint truncated: " + path);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      const std::uint32_t u = static_cast<std::uint32_t>(buf[4 * i]) |
                              (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                              (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                              (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
      std::memcpy(&m.data[i], &u, 4);
    }
    bytes.insert(bytes.end(), buf.begin(), buf.end());
  });

  unsigned char db[8];
  is.read(reinterpret_cast<char*>(db), 8);
  if (!is) throw DataError("checkpoint missing digest trailer: " + path);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(db[i]) << (8 * i);
  const std::uint64_t computed = fnv1a(bytes.data(), bytes.size());
  if (stored != computed) throw DataError("checkpoint integrity digest mismatch: " + path);
  return params;
}

}  // namespace ctxcomp::nn
