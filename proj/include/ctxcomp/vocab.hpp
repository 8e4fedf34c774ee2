#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxcomp/errors.hpp"

namespace ctxcomp {

using Token = std::uint32_t;
using TokenSequence = std::vector<Token>;

// Byte-level vocabulary: ids 0..255 are the raw byte values, followed by
// four out-of-band special ids. Size is fixed at 260.
struct Vocab {
  static constexpr Token kPad = 256;
  static constexpr Token kBos = 257;
  static constexpr Token kEos = 258;
  static constexpr Token kAe = 259;  // reconstruction indicator token
  static constexpr int kSize = 260;

  static constexpr bool is_special(Token t) { return t >= 256; }
};

inline TokenSequence tokenize(std::string_view bytes) {
  TokenSequence out;
  out.reserve(bytes.size());
  for (unsigned char c : bytes) out.push_back(static_cast<Token>(c));
  return out;
}

inline std::string detokenize(std::span<const Token> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t >= 256) {
      throw ContractError("detokenize: special id " + std::to_string(t) +
                          " in payload");
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

// Like detokenize but renders specials as printable markers; for logs and
// reconstruction dumps where special ids can legitimately appear.
inline std::string render_tokens(std::span<const Token> tokens) {
  std::string out;
  for (Token t : tokens) {
    switch (t) {
      case Vocab::kPad: out += "<pad>"; break;
      case Vocab::kBos: out += "<bos>"; break;
      case Vocab::kEos: out += "<eos>"; break;
      case Vocab::kAe: out += "<ae>"; break;
      default: out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
  }
  return out;
}

}  // namespace ctxcomp
