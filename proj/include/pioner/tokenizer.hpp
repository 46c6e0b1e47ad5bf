#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pioner/core.hpp"

namespace pioner {

// Lossless word-piece tokenizer with byte fallback.
//
// Text is pre-split GPT-2 style into pieces (an optional leading space plus a
// run of letters/digits, a single punctuation byte, or a whitespace run).
// Pieces seen in the training corpus get their own ids; anything else falls
// back to one token per byte, so decode(encode(s)) == s for every string.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kByteBase = 2;
    static constexpr int kPieceBase = kByteBase + 256;

    Tokenizer() = default;
    // Keeps the most frequent pieces (ties broken lexicographically) so that
    // the vocabulary has at most max_vocab entries.
    static Tokenizer train(const std::vector<std::string>& corpus, int max_vocab);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(const std::vector<int>& ids) const;
    int vocab_size() const { return kPieceBase + static_cast<int>(pieces_.size()); }

    static std::vector<std::string> pretokenize(std::string_view text);

    json to_json() const;
    static Tokenizer from_json(const json& j);

    bool operator==(const Tokenizer& other) const { return pieces_ == other.pieces_; }

private:
    std::vector<std::string> pieces_;
    std::map<std::string, int, std::less<>> ids_;
};

} // namespace pioner
