#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ctxcomp/compressor.hpp"
#include "ctxcomp/corpus.hpp"
#include "ctxcomp/labctl.hpp"
#include "ctxcomp/metrics.hpp"
#include "ctxcomp/tensor.hpp"
#include "ctxcomp/theory.hpp"
#include "ctxcomp/train.hpp"

namespace py = pybind11;
using namespace ctxcomp;

namespace {

theory::DiscreteSource make_source(const std::vector<double>& p) {
  return theory::DiscreteSource(p);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "context-compression laboratory core";

  set_compute_threads(1);

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");
  py::register_exception<ContractError>(m, "ContractError");
  py::register_exception<CapacityError>(m, "CapacityError");
  py::register_exception<NumericError>(m, "NumericError");

  // ---- vocabulary ----
  m.attr("VOCAB_SIZE") = Vocab::kSize;
  m.attr("PAD") = Vocab::kPad;
  m.attr("BOS") = Vocab::kBos;
  m.attr("EOS") = Vocab::kEos;
  m.attr("AE") = Vocab::kAe;
  m.def("tokenize", [](const py::bytes& b) { return tokenize(std::string(b)); },
        "byte-level tokenization: one id per byte");
  m.def("detokenize", [](const TokenSequence& toks) {
    return py::bytes(detokenize(toks));
  });

  // ---- corpus ----
  m.def(
      "generate",
      [](const std::string& family, std::uint64_t seed, std::size_t n_bytes, int order,
         int grammar_depth) {
        corpus::GeneratorSpec spec;
        spec.family = corpus::family_from_string(family);
        spec.seed = seed;
        spec.order = order;
        spec.grammar_depth = grammar_depth;
        return py::bytes(corpus::generate(spec, n_bytes));
      },
      py::arg("family"), py::arg("seed"), py::arg("n_bytes"), py::arg("order") = 3,
      py::arg("grammar_depth") = 4, "deterministic synthetic byte stream");
  m.def(
      "mixture_fractions",
      [](const std::string& dataset_id) {
        const auto mix = corpus::MixtureSpec::for_dataset(dataset_id);
        py::dict out;
        for (const auto& [family, frac] : mix.fractions())
          out[py::str(corpus::to_string(family))] =
              py::make_tuple(frac.num, frac.den);
        return out;
      },
      py::arg("dataset_id"), "exact rational family fractions of a dataset D1..D6");

  // ---- metrics ----
  m.def("token_f1", [](const TokenSequence& p, const TokenSequence& r) {
    return eval::token_f1(p, r);
  });
  m.def("bleu4", [](const TokenSequence& p, const TokenSequence& r) {
    return eval::bleu4(p, r);
  });
  m.def("rouge_l", [](const TokenSequence& p, const TokenSequence& r) {
    return eval::rouge_l(p, r);
  });
  m.def("correlate", [](const std::vector<double>& xs, const std::vector<double>& ys) {
    const auto res = eval::correlate(xs, ys);
    return py::make_tuple(res.pearson_r, res.spearman_rho);
  });

  // ---- theory ----
  m.def("entropy_bits", [](const std::vector<double>& p) { return theory::entropy(make_source(p)); });
  m.def(
      "rate_distortion",
      [](const std::vector<double>& p, double target_d, double tol) {
        const auto res = theory::blahut_arimoto(
            make_source(p), theory::DistortionSpec::hamming(p.size()), target_d, tol);
        py::dict out;
        out["rate_bits"] = res.rate_bits;
        out["iterations"] = res.iterations;
        out["converged"] = res.converged;
        return out;
      },
      py::arg("pmf"), py::arg("target_distortion"), py::arg("tolerance") = 1e-9,
      "Blahut-Arimoto R(D) under Hamming distortion");
  m.def("lossless_rate", [](const std::vector<double>& p) {
    return theory::lossless_rate(make_source(p));
  });
  m.def("ce_decomposition", [](const std::vector<double>& p, const std::vector<double>& q) {
    const auto rep = theory::ce_decomposition(make_source(p), make_source(q));
    py::dict out;
    out["entropy_bits"] = rep.entropy_bits;
    out["kl_bits"] = rep.kl_bits;
    out["cross_entropy_bits"] = rep.cross_entropy_bits;
    out["residual"] = rep.residual;
    return out;
  });
  m.def("feasible", [](double entropy_bits, double budget_bits) {
    return theory::feasibility_check(entropy_bits, budget_bits) == theory::Feasibility::feasible;
  });

  // ---- model-level operations ----
  m.def(
      "flops_estimate",
      [](const std::string& tier, std::uint64_t n_tokens, const std::string& phase) {
        const auto cfg = nn::ModelConfig::tier_config(tier);
        return eval::flops_estimate(
            cfg, n_tokens, phase == "generate" ? eval::Phase::generate : eval::Phase::compress);
      },
      py::arg("tier"), py::arg("n_tokens"), py::arg("phase") = "compress");
  m.def("tier_param_count", [](const std::string& tier) {
    return nn::ModelConfig::tier_config(tier).param_count();
  });
  m.def(
      "lr_schedule",
      [](int step, int warmup, int total, double max_lr, double min_lr, const std::string& shape) {
        nn::TrainSchedule s;
        s.warmup_steps = warmup;
        s.total_steps = total;
        s.max_lr = max_lr;
        s.min_lr = min_lr;
        s.shape = shape == "linear" ? nn::ScheduleShape::linear : nn::ScheduleShape::cosine;
        return nn::lr_at(s, step);
      },
      py::arg("step"), py::arg("warmup"), py::arg("total"), py::arg("max_lr"),
      py::arg("min_lr"), py::arg("shape") = "cosine");

  // small end-to-end hooks: enough for notebook-scale experiments
  m.def(
      "pretrain_lm",
      [](const std::string& tier, const TokenSequence& stream, std::uint64_t seed, int seq_len,
         int steps, int batch, double max_lr, const std::string& out_path) {
        nn::ModelConfig cfg = nn::ModelConfig::tier_config(tier);
        cfg.max_position = std::max(64, seq_len * 2);
        nn::TrainSchedule s;
        s.warmup_steps = std::max(1, steps / 10);
        s.total_steps = steps;
        s.max_lr = max_lr;
        s.min_lr = max_lr * 0.1;
        s.batch_size = batch;
        std::vector<nn::TraceRow> trace;
        auto params = nn::pretrain(cfg, s, stream, seed, seq_len, "custom", &trace);
        nn::CheckpointMeta meta;
        meta.seed = seed;
        meta.step = steps;
        nn::save_checkpoint(out_path, params, meta);
        return trace.back().nll;
      },
      py::arg("tier"), py::arg("stream"), py::arg("seed"), py::arg("seq_len") = 64,
      py::arg("steps") = 100, py::arg("batch") = 8, py::arg("max_lr") = 2e-3,
      py::arg("out_path") = "model.ckpt", "tiny from-scratch pretraining; returns final nll");
  m.def(
      "per_token_entropy",
      [](const std::string& ckpt_path, const TokenSequence& seq) {
        const auto params = nn::load_checkpoint(ckpt_path);
        return eval::per_token_entropy(params, seq);
      },
      py::arg("checkpoint"), py::arg("tokens"), "plain causal-LM bits/token on a sequence");

  m.attr("__version__") = "0.1.0";
}
