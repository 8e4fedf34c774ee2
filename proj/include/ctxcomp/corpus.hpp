#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctxcomp/digest.hpp"
#include "ctxcomp/errors.hpp"
#include "ctxcomp/rng.hpp"
#include "ctxcomp/vocab.hpp"

namespace ctxcomp::corpus {

enum class Family { general, article, code, math, random };

Family family_from_string(const std::string& s);
std::string to_string(Family f);

struct GeneratorSpec {
  Family family = Family::general;
  std::uint64_t seed = 0;
  int order = 3;          // Markov order for the text families
  int grammar_depth = 4;  // max expression nesting for the code family
};

// Streaming document source. Documents are byte strings; token streams are
// obtained by tokenizing and terminating each document with EOS.
class DocGen {
 public:
  explicit DocGen(const GeneratorSpec& spec);
  ~DocGen();
  DocGen(DocGen&&) noexcept;
  DocGen& operator=(DocGen&&) noexcept;

  std::string next_doc();
  const GeneratorSpec& spec() const { return spec_; }

 private:
  struct Impl;
  GeneratorSpec spec_;
  std::unique_ptr<Impl> impl_;
};

// Concatenated document stream truncated to exactly n_bytes.
std::string generate(const GeneratorSpec& spec, std::size_t n_bytes);

// Exact rational arithmetic for the mixture fractions.
struct Fraction {
  long long num = 0;
  long long den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

// Dataset recipe: alpha = alpha_sixths/6 of the corpus is the specialized
// mixture (article:code:math = 2:2:1), the rest is the general family.
struct MixtureSpec {
  int alpha_sixths = 0;  // 0..5; D1 has alpha = 0
  std::string label;     // "D1".."D6"

  static MixtureSpec for_dataset(const std::string& dataset_id);

  Fraction fraction(Family f) const;
  // (family, fraction) pairs for the four mixed families, denominator 30.
  std::array<std::pair<Family, Fraction>, 4> fractions() const;
};

struct Document {
  TokenSequence tokens;  // EOS-terminated
  std::uint64_t digest = 0;
};

struct Dataset {
  std::string label;
  std::vector<Document> docs;
  std::uint64_t token_count() const;
};

// A finite or generator-backed per-family document source used by
// build_mixture. Generator-backed streams are unbounded.
class FamilyStream {
 public:
  static FamilyStream from_generator(const GeneratorSpec& spec);
  static FamilyStream from_documents(Family family, std::vector<std::string> docs);

  Family family() const { return family_; }
  // Returns nullopt when a finite stream is exhausted.
  std::optional<std::string> next();

 private:
  FamilyStream() = default;
  Family family_ = Family::general;
  std::shared_ptr<DocGen> gen;
  std::vector<std::string> fixed;
  std::size_t fixed_pos = 0;
};

// Draws documents per family until each token quota is met (quota enforced
// at document granularity), then interleaves them with a seeded shuffle.
Dataset build_mixture(const MixtureSpec& mix, std::vector<FamilyStream>& streams,
                      std::uint64_t n_tokens, std::uint64_t shuffle_seed);

// Convenience: mixture built straight from the family generators, with
// per-family seeds derived from `seed`.
Dataset build_dataset(const std::string& dataset_id, std::uint64_t n_tokens,
                      std::uint64_t seed);

// "rnd" dataset (random-family only) used by the decoder-collapse study,
// plus D1..D6. Returns true for recognized dataset ids.
bool is_dataset_id(const std::string& id);

struct CorpusSplit {
  std::vector<Document> pretrain;
  std::vector<Document> finetune;
  std::vector<Document> test;
  // content digests per split, in split order
  std::vector<std::string> pretrain_digests;
  std::vector<std::string> finetune_digests;
  std::vector<std::string> test_digests;
};

// Dedups by content digest, shuffles deterministically, then assigns the
// first pretrain_quota docs to pretrain, the next finetune_count to
// finetune and the next test_count to test. Splits never share a document.
CorpusSplit split_corpus(const Dataset& ds, std::size_t pretrain_quota,
                         std::size_t finetune_count, std::size_t test_count,
                         std::uint64_t seed);

// ---- file formats ----
// Corpus file: 16-byte header (magic "CCL1", u32 vocab size, u64 document
// count, little-endian) followed by length-prefixed records of u32 ids.
void write_corpus_file(const std::string& path, const std::vector<Document>& docs);
std::vector<Document> read_corpus_file(const std::string& path);

// Split manifest: JSON object mapping split name -> list of digest strings.
void write_manifest(const std::string& path, const CorpusSplit& split);

// Fixed-length samples for autoencoder fine-tuning and test sets: first L
// tokens of each document (EOS excluded); shorter documents are skipped.
std::vector<TokenSequence> fixed_length_samples(const std::vector<Document>& docs,
                                                int length, std::size_t max_count);

// Concatenation of all document token streams, for LM pretraining windows.
TokenSequence concat_tokens(const std::vector<Document>& docs);

}  // namespace ctxcomp::corpus
