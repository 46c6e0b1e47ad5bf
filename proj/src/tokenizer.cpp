#include "pioner/tokenizer.hpp"

#include <algorithm>
#include <cctype>

namespace pioner {

namespace {

enum class CharClass { word, space, punct };

CharClass classify(unsigned char c) {
    if (c >= 0x80 || std::isalnum(c)) return CharClass::word;
    if (std::isspace(c)) return CharClass::space;
    return CharClass::punct;
}

} // namespace

std::vector<std::string> Tokenizer::pretokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        std::size_t start = i;
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (c == ' ' && i + 1 < n && classify(static_cast<unsigned char>(text[i + 1])) != CharClass::space) {
            ++i; // leading space joins the following piece
            c = static_cast<unsigned char>(text[i]);
        }
        CharClass cls = classify(c);
        if (cls == CharClass::word) {
            while (i < n && classify(static_cast<unsigned char>(text[i])) == CharClass::word) ++i;
        } else if (cls == CharClass::punct) {
            ++i;
        } else {
            // whitespace run; leave a trailing single space for the next piece
            while (i < n && classify(static_cast<unsigned char>(text[i])) == CharClass::space) ++i;
            if (i < n && i - start > 1 && text[i - 1] == ' ') --i;
        }
        out.emplace_back(text.substr(start, i - start));
    }
    return out;
}

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus, int max_vocab) {
    std::map<std::string, long long> freq;
    for (const auto& text : corpus)
        for (auto& piece : pretokenize(text))
            if (piece.size() > 1) ++freq[piece];
    std::vector<std::pair<std::string, long long>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    const int budget = std::max(0, max_vocab - kPieceBase);
    if (static_cast<int>(ranked.size()) > budget) ranked.resize(budget);
    std::sort(ranked.begin(), ranked.end());

    Tokenizer tok;
    for (auto& [piece, count] : ranked) {
        tok.ids_.emplace(piece, kPieceBase + static_cast<int>(tok.pieces_.size()));
        tok.pieces_.push_back(piece);
    }
    return tok;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& piece : pretokenize(text)) {
        if (auto it = ids_.find(piece); it != ids_.end()) {
            ids.push_back(it->second);
        } else {
            for (unsigned char c : piece) ids.push_back(kByteBase + c);
        }
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id >= kPieceBase && id < vocab_size())
            out += pieces_[id - kPieceBase];
        else if (id >= kByteBase && id < kPieceBase)
            out.push_back(static_cast<char>(id - kByteBase));
        // specials decode to nothing
    }
    return out;
}

json Tokenizer::to_json() const { return json{{"type", "piece-bytes/v1"}, {"pieces", pieces_}}; }

Tokenizer Tokenizer::from_json(const json& j) {
    if (j.value("type", "") != "piece-bytes/v1") throw FormatError("unsupported tokenizer type");
    Tokenizer tok;
    for (const auto& p : j.at("pieces")) {
        std::string piece = p.get<std::string>();
        tok.ids_.emplace(piece, kPieceBase + static_cast<int>(tok.pieces_.size()));
        tok.pieces_.push_back(std::move(piece));
    }
    return tok;
}

} // namespace pioner
