#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "distaudit/error.hpp"

namespace distaudit {

// Byte-level tokenizer. Ids 0..255 are raw bytes; the last four ids are the
// specials. Every byte string round-trips exactly, so there is no
// out-of-vocabulary case on encode.
struct Tokenizer {
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kSep = 258;
  static constexpr int kPad = 259;
  static constexpr int kVocabSize = 260;

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }

  // Specials decode to visible markers rather than bytes so that decoded
  // text is printable and unambiguous.
  std::string decode(std::span<const int> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id >= 0 && id < 256) {
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
      } else if (id == kBos) {
        out += "<|bos|>";
      } else if (id == kEos) {
        out += "<|eos|>";
      } else if (id == kSep) {
        out += "<|sep|>";
      } else if (id == kPad) {
        out += "<|pad|>";
      } else {
        throw VocabError("decode: id " + std::to_string(id) + " outside [0, " +
                         std::to_string(kVocabSize) + ")");
      }
    }
    return out;
  }
};

}  // namespace distaudit
