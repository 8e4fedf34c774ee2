#include "ctxcomp/corpus.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "english_sample.inc"

namespace ctxcomp::corpus {

Family family_from_string(const std::string& s) {
  if (s == "general") return Family::general;
  if (s == "article") return Family::article;
  if (s == "code") return Family::code;
  if (s == "math") return Family::math;
  if (s == "random") return Family::random;
  throw ConfigError("unknown corpus family: " + s);
}

std::string to_string(Family f) {
  switch (f) {
    case Family::general: return "general";
    case Family::article: return "article";
    case Family::code: return "code";
    case Family::math: return "math";
    case Family::random: return "random";
  }
  throw ConfigError("bad family enum");
}

namespace {

// Order-N byte Markov chain fitted circularly on a sample, so every context
// that can be reached has at least one continuation.
class MarkovChain {
 public:
  MarkovChain(std::string_view sample, int order) : order_(order), sample_(sample) {
    if (order < 1 || order > 8) throw ConfigError("markov order must be in 1..8");
    if (sample.size() <= static_cast<std::size_t>(order)) {
      throw ConfigError("markov sample shorter than order");
    }
    const std::size_t n = sample.size();
    std::unordered_map<std::uint64_t, std::unordered_map<unsigned char, int>> counts;
    std::uint64_t ctx = 0;
    for (int i = 0; i < order; ++i) ctx = push(ctx, static_cast<unsigned char>(sample[i]));
    for (std::size_t i = 0; i < n; ++i) {
      const auto next = static_cast<unsigned char>(sample[(i + order) % n]);
      counts[ctx][next] += 1;
      ctx = push(ctx, next);
    }
    for (auto& [key, m] : counts) {
      Row row;
      for (const auto& [b, c] : m) row.entries.push_back({b, c});
      std::sort(row.entries.begin(), row.entries.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
      for (const auto& e : row.entries) row.total += e.second;
      rows_.emplace(key, std::move(row));
    }
  }

  // Context seeded from a sample position; walk is weighted by fitted counts.
  std::string generate(Rng& rng, std::size_t n_bytes) const {
    std::string out;
    out.reserve(n_bytes);
    const std::size_t start = rng.below(sample_.size());
    std::uint64_t ctx = 0;
    for (int i = 0; i < order_; ++i) {
      ctx = push(ctx, static_cast<unsigned char>(sample_[(start + i) % sample_.size()]));
    }
    while (out.size() < n_bytes) {
      const Row& row = rows_.at(ctx);
      std::uint64_t pick = rng.below(static_cast<std::uint64_t>(row.total));
      unsigned char next = row.entries.back().first;
      for (const auto& [b, c] : row.entries) {
        if (pick < static_cast<std::uint64_t>(c)) {
          next = b;
          break;
        }
        pick -= static_cast<std::uint64_t>(c);
      }
      out.push_back(static_cast<char>(next));
      ctx = push(ctx, next);
    }
    return out;
  }

 private:
  struct Row {
    std::vector<std::pair<unsigned char, int>> entries;
    long long total = 0;
  };

  std::uint64_t push(std::uint64_t ctx, unsigned char b) const {
    const std::uint64_t mask = (order_ >= 8) ? ~0ULL : ((1ULL << (8 * order_)) - 1);
    return ((ctx << 8) | b) & mask;
  }

  int order_;
  std::string sample_;
  std::unordered_map<std::uint64_t, Row> rows_;
};

constexpr const char kPunct[] = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

std::string random_text(Rng& rng, std::size_t n) {
  // upper/lowercase letters and punctuation, uniform
  static std::string pool = [] {
    std::string p;
    for (char c = 'A'; c <= 'Z'; ++c) p.push_back(c);
    for (char c = 'a'; c <= 'z'; ++c) p.push_back(c);
    p += kPunct;
    return p;
  }();
  std::string out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool[rng.below(pool.size())]);
  return out;
}

// ---- math family: integer arithmetic problems with their answers ----

long long small_int(Rng& rng) {
  // weighted toward small operands, like drill-style math corpora
  switch (rng.below(4)) {
    case 0: return static_cast<long long>(rng.range(0, 9));
    case 1: return static_cast<long long>(rng.range(1, 99));
    default: return static_cast<long long>(rng.range(1, 999));
  }
}

std::string math_line(Rng& rng) {
  std::string line;
  const int op = static_cast<int>(rng.below(4));
  long long a, b, r;
  char opc;
  switch (op) {
    case 0: opc = '+'; a = small_int(rng); b = small_int(rng); r = a + b; break;
    case 1: opc = '-'; a = small_int(rng); b = small_int(rng); r = a - b; break;
    case 2: opc = '*'; a = rng.range(0, 99); b = rng.range(0, 99); r = a * b; break;
    default:
      opc = '/';
      b = rng.range(2, 12);
      r = rng.range(1, 99);
      a = b * r;
      break;
  }
  const bool spaced = rng.below(2) == 0;
  const char* gap = spaced ? " " : "";
  line += std::to_string(a);
  line += gap;
  line.push_back(opc);
  line += gap;
  line += std::to_string(b);
  line += gap;
  line.push_back('=');
  line += gap;
  line += std::to_string(r);
  line.push_back('\n');
  return line;
}

// ---- code family: expression-statement grammar with bounded nesting ----

const char* kIdents[] = {"x", "y", "z", "a", "b", "n", "m", "acc", "tmp",
                         "val", "sum", "idx", "lhs", "rhs", "out"};
const char* kFuncs[] = {"f", "g", "h", "scale", "clamp", "mix", "norm", "step"};

std::string ident(Rng& rng) {
  std::string s = kIdents[rng.below(std::size(kIdents))];
  if (rng.below(3) == 0) s += std::to_string(rng.below(10));
  return s;
}

std::string expr(Rng& rng, int depth);

std::string term(Rng& rng, int depth) {
  const int kind = static_cast<int>(rng.below(depth > 0 ? 4 : 2));
  switch (kind) {
    case 0: return std::to_string(rng.below(256));
    case 1: return ident(rng);
    case 2: return "(" + expr(rng, depth - 1) + ")";
    default: {
      std::string s = kFuncs[rng.below(std::size(kFuncs))];
      s += "(";
      const int nargs = rng.range(1, 2);
      for (int i = 0; i < nargs; ++i) {
        if (i) s += ", ";
        s += expr(rng, depth - 1);
      }
      s += ")";
      return s;
    }
  }
}

std::string expr(Rng& rng, int depth) {
  static const char* ops[] = {" + ", " - ", " * ", " / "};
  std::string s = term(rng, depth);
  const int extra = static_cast<int>(rng.below(3));
  for (int i = 0; i < extra; ++i) {
    s += ops[rng.below(4)];
    s += term(rng, depth);
  }
  return s;
}

std::string code_block(Rng& rng, int depth) {
  std::string out;
  if (rng.below(3) == 0) {
    out += "fn " + std::string(kFuncs[rng.below(std::size(kFuncs))]) + "(" + ident(rng) +
           ", " + ident(rng) + ") {\n";
    const int stmts = rng.range(1, 4);
    for (int i = 0; i < stmts; ++i) {
      out += "  let " + ident(rng) + " = " + expr(rng, depth) + ";\n";
    }
    out += "  return " + expr(rng, depth) + ";\n}\n";
  } else {
    out += "let " + ident(rng) + " = " + expr(rng, depth) + ";\n";
  }
  return out;
}

// ---- article family: general chain plus section/citation markers ----

std::string with_markers(const std::string& body, Rng& rng, int section) {
  std::string out = "## " + std::to_string(section) + ". ";
  // heading borrowed from the body's opening words
  std::size_t head_end = body.find(' ', 24);
  if (head_end == std::string::npos || head_end > 48) head_end = std::min<std::size_t>(32, body.size());
  out.append(body, 0, head_end);
  out += "\n";
  std::size_t i = head_end;
  std::size_t since_cite = 0;
  while (i < body.size()) {
    out.push_back(body[i]);
    ++since_cite;
    if (body[i] == '.' && since_cite > 90 && rng.below(3) == 0) {
      out += " [" + std::to_string(rng.range(1, 40)) + "]";
      since_cite = 0;
    }
    ++i;
  }
  return out;
}

}  // namespace

struct DocGen::Impl {
  Rng rng;
  std::unique_ptr<MarkovChain> chain;
  int section = 1;

  explicit Impl(const GeneratorSpec& spec) : rng(spec.seed) {
    if (spec.family == Family::general || spec.family == Family::article) {
      chain = std::make_unique<MarkovChain>(kEnglishSample, spec.order);
    }
  }
};

DocGen::DocGen(const GeneratorSpec& spec) : spec_(spec), impl_(std::make_unique<Impl>(spec)) {}
DocGen::~DocGen() = default;
DocGen::DocGen(DocGen&&) noexcept = default;
DocGen& DocGen::operator=(DocGen&&) noexcept = default;

std::string DocGen::next_doc() {
  Rng& rng = impl_->rng;
  const std::size_t target = 256 + rng.below(513);  // 256..768 bytes
  switch (spec_.family) {
    case Family::general:
      return impl_->chain->generate(rng, target);
    case Family::article: {
      std::string body = impl_->chain->generate(rng, target);
      return with_markers(body, rng, impl_->section++);
    }
    case Family::code: {
      std::string out;
      while (out.size() < target) out += code_block(rng, spec_.grammar_depth);
      return out;
    }
    case Family::math: {
      std::string out;
      while (out.size() < target) out += math_line(rng);
      return out;
    }
    case Family::random:
      return random_text(rng, target);
  }
  throw ConfigError("bad family enum");
}

std::string generate(const GeneratorSpec& spec, std::size_t n_bytes) {
  if (n_bytes == 0) throw ContractError("generate: n_bytes must be > 0");
  DocGen gen(spec);
  std::string out;
  out.reserve(n_bytes);
  while (out.size() < n_bytes) out += gen.next_doc();
  out.resize(n_bytes);
  return out;
}

MixtureSpec MixtureSpec::for_dataset(const std::string& dataset_id) {
  if (dataset_id.size() == 2 && dataset_id[0] == 'D' && dataset_id[1] >= '1' &&
      dataset_id[1] <= '6') {
    MixtureSpec mix;
    mix.alpha_sixths = dataset_id[1] - '1';
    mix.label = dataset_id;
    return mix;
  }
  throw ConfigError("unknown dataset id: " + dataset_id + " (expected D1..D6)");
}

Fraction MixtureSpec::fraction(Family f) const {
  const long long a = alpha_sixths;
  // general 1-alpha, article 2*alpha/5, code 2*alpha/5, math alpha/5;
  // common denominator 30 keeps everything exact.
  switch (f) {
    case Family::general: return {30 - 5 * a, 30};
    case Family::article: return {2 * a, 30};
    case Family::code: return {2 * a, 30};
    case Family::math: return {a, 30};
    case Family::random: return {0, 30};
  }
  throw ConfigError("bad family enum");
}

std::array<std::pair<Family, Fraction>, 4> MixtureSpec::fractions() const {
  return {{{Family::general, fraction(Family::general)},
           {Family::article, fraction(Family::article)},
           {Family::code, fraction(Family::code)},
           {Family::math, fraction(Family::math)}}};
}

std::uint64_t Dataset::token_count() const {
  std::uint64_t n = 0;
  for (const auto& d : docs) n += d.tokens.size();
  return n;
}

FamilyStream FamilyStream::from_generator(const GeneratorSpec& spec) {
  FamilyStream s;
  s.family_ = spec.family;
  s.gen = std::make_shared<DocGen>(spec);
  return s;
}

FamilyStream FamilyStream::from_documents(Family family, std::vector<std::string> docs) {
  FamilyStream s;
  s.family_ = family;
  s.fixed = std::move(docs);
  return s;
}

std::optional<std::string> FamilyStream::next() {
  if (gen) return gen->next_doc();
  if (fixed_pos < fixed.size()) return fixed[fixed_pos++];
  return std::nullopt;
}

namespace {

Document make_document(const std::string& bytes) {
  Document d;
  d.tokens = tokenize(bytes);
  d.tokens.push_back(Vocab::kEos);
  d.digest = fnv1a(std::span<const Token>(d.tokens.data(), d.tokens.size()));
  return d;
}

}  // namespace

Dataset build_mixture(const MixtureSpec& mix, std::vector<FamilyStream>& streams,
                      std::uint64_t n_tokens, std::uint64_t shuffle_seed) {
  Dataset ds;
  ds.label = mix.label;
  for (auto& [family, frac] : mix.fractions()) {
    const std::uint64_t quota =
        n_tokens * static_cast<std::uint64_t>(frac.num) / static_cast<std::uint64_t>(frac.den);
    if (quota == 0) continue;
    FamilyStream* stream = nullptr;
    for (auto& s : streams) {
      if (s.family() == family) stream = &s;
    }
    if (!stream) throw DataError("build_mixture: missing stream for family " + to_string(family));
    std::uint64_t got = 0;
    while (got < quota) {
      auto doc = stream->next();
      if (!doc) {
        throw DataError("build_mixture: stream exhausted for family " + to_string(family) +
                        " (" + std::to_string(got) + "/" + std::to_string(quota) + " tokens)");
      }
      Document d = make_document(*doc);
      got += d.tokens.size();
      ds.docs.push_back(std::move(d));
    }
  }
  Rng rng(shuffle_seed);
  shuffle(ds.docs, rng);
  return ds;
}

bool is_dataset_id(const std::string& id) {
  if (id == "rnd") return true;
  return id.size() == 2 && id[0] == 'D' && id[1] >= '1' && id[1] <= '6';
}

Dataset build_dataset(const std::string& dataset_id, std::uint64_t n_tokens,
                      std::uint64_t seed) {
  Rng root(seed);
  if (dataset_id == "rnd") {
    // decoder-collapse corpus: random family only, same volume as the others
    GeneratorSpec spec{Family::random, root.fork(99).next_u64()};
    std::vector<FamilyStream> streams;
    streams.push_back(FamilyStream::from_generator(spec));
    MixtureSpec pure;
    pure.alpha_sixths = 0;
    pure.label = "rnd";
    Dataset ds;
    ds.label = "rnd";
    std::uint64_t got = 0;
    while (got < n_tokens) {
      auto doc = streams[0].next();
      Document d = make_document(*doc);
      got += d.tokens.size();
      ds.docs.push_back(std::move(d));
    }
    Rng rng(root.fork(7).next_u64());
    shuffle(ds.docs, rng);
    return ds;
  }
  MixtureSpec mix = MixtureSpec::for_dataset(dataset_id);
  std::vector<FamilyStream> streams;
  const Family fams[] = {Family::general, Family::article, Family::code, Family::math};
  for (std::size_t i = 0; i < std::size(fams); ++i) {
    GeneratorSpec spec;
    spec.family = fams[i];
    spec.seed = root.fork(i + 1).next_u64();
    streams.push_back(FamilyStream::from_generator(spec));
  }
  return build_mixture(mix, streams, n_tokens, root.fork(7).next_u64());
}

CorpusSplit split_corpus(const Dataset& ds, std::size_t pretrain_quota,
                         std::size_t finetune_count, std::size_t test_count,
                         std::uint64_t seed) {
  // dedup by content digest, first occurrence wins
  std::vector<const Document*> unique;
  std::unordered_set<std::uint64_t> seen;
  for (const auto& d : ds.docs) {
    if (seen.insert(d.digest).second) unique.push_back(&d);
  }
  if (unique.size() < pretrain_quota + finetune_count + test_count) {
    throw DataError("split_corpus: need " +
                    std::to_string(pretrain_quota + finetune_count + test_count) +
                    " unique docs, have " + std::to_string(unique.size()));
  }
  Rng rng(seed);
  shuffle(unique, rng);
  CorpusSplit split;
  std::size_t i = 0;
  auto take = [&](std::size_t n, std::vector<Document>& out, std::vector<std::string>& digests) {
    for (std::size_t j = 0; j < n; ++j, ++i) {
      out.push_back(*unique[i]);
      digests.push_back(digest_hex(unique[i]->digest));
    }
  };
  take(pretrain_quota, split.pretrain, split.pretrain_digests);
  take(finetune_count, split.finetune, split.finetune_digests);
  take(test_count, split.test, split.test_digests);
  return split;
}

// ---- file formats ----

namespace {

constexpr char kMagic[4] = {'C', 'C', 'L', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("corpus file: truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

}  // namespace

void write_corpus_file(const std::string& path, const std::vector<Document>& docs) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path);
  os.write(kMagic, 4);
  put_u32(os, Vocab::kSize);
  put_u64(os, docs.size());
  for (const auto& d : docs) {
    put_u32(os, static_cast<std::uint32_t>(d.tokens.size()));
    for (Token t : d.tokens) put_u32(os, t);
  }
  if (!os) throw DataError("write failed: " + path);
}

std::vector<Document> read_corpus_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw DataError("bad corpus magic: " + path);
  const std::uint32_t vocab = get_u32(is);
  if (vocab != Vocab::kSize) {
    throw DataError("corpus vocab mismatch: " + std::to_string(vocab));
  }
  const std::uint64_t count = get_u64(is);
  std::vector<Document> docs;
  docs.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(is);
    Document d;
    d.tokens.resize(len);
    for (std::uint32_t j = 0; j < len; ++j) {
      const std::uint32_t id = get_u32(is);
      if (id >= Vocab::kSize) throw DataError("corpus token id out of range");
      d.tokens[j] = id;
    }
    d.digest = fnv1a(std::span<const Token>(d.tokens.data(), d.tokens.size()));
    docs.push_back(std::move(d));
  }
  return docs;
}

void write_manifest(const std::string& path, const CorpusSplit& split) {
  nlohmann::json j;
  j["pretrain"] = split.pretrain_digests;
  j["finetune"] = split.finetune_digests;
  j["test"] = split.test_digests;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

std::vector<TokenSequence> fixed_length_samples(const std::vector<Document>& docs,
                                                int length, std::size_t max_count) {
  if (length <= 0) throw ContractError("fixed_length_samples: length must be > 0");
  std::vector<TokenSequence> out;
  for (const auto& d : docs) {
    if (out.size() >= max_count) break;
    // trailing EOS is a terminator, not content
    const std::size_t content = d.tokens.size() - 1;
    if (content < static_cast<std::size_t>(length)) continue;
    out.emplace_back(d.tokens.begin(), d.tokens.begin() + length);
  }
  return out;
}

TokenSequence concat_tokens(const std::vector<Document>& docs) {
  TokenSequence out;
  std::size_t total = 0;
  for (const auto& d : docs) total += d.tokens.size();
  out.reserve(total);
  for (const auto& d : docs) out.insert(out.end(), d.tokens.begin(), d.tokens.end());
  return out;
}

}  // namespace ctxcomp::corpus
