#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "qbt/error.hpp"

namespace qbt {

/// Token inventory. Ids 0-4 are the fixed specials, ids 5-260 the 256 raw
/// bytes, everything above comes from learned merges.
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr int kNumSpecials = 5;
    static constexpr int kByteBase = kNumSpecials;          // byte b -> id 5 + b
    static constexpr int kByteFloor = kNumSpecials + 256;   // 261

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;

    static const std::array<const char*, kNumSpecials>& special_names() {
        static const std::array<const char*, kNumSpecials> names = {"[PAD]", "[UNK]", "[CLS]",
                                                                    "[SEP]", "[MASK]"};
        return names;
    }

    static Vocab byte_vocab() {
        Vocab v;
        for (const char* name : special_names()) v.add(name);
        for (int b = 0; b < 256; ++b) v.add(std::string(1, static_cast<char>(b)));
        return v;
    }

    int add(const std::string& token) {
        const int id = static_cast<int>(tokens.size());
        tokens.push_back(token);
        ids.emplace(token, id);
        return id;
    }

    bool contains(const std::string& token) const { return ids.count(token) > 0; }
    std::size_t size() const { return tokens.size(); }
    static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }
};

struct MergeRule {
    int left = 0;
    int right = 0;
    int result = 0;
};

namespace detail {

inline std::string escape_token(const std::string& raw) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char ch : raw) {
        if (ch == '\\' || ch < 0x21 || ch > 0x7e) {
            out += "\\x";
            out += hex[ch >> 4];
            out += hex[ch & 0xf];
        } else {
            out += static_cast<char>(ch);
        }
    }
    return out;
}

inline std::string unescape_token(const std::string& esc, int line_no) {
    auto hexval = [&](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw ParseError("tokenizer file line " + std::to_string(line_no) +
                         ": bad hex digit in escape");
    };
    std::string out;
    for (std::size_t i = 0; i < esc.size(); ++i) {
        if (esc[i] == '\\') {
            if (i + 3 >= esc.size()) {
                throw ParseError("tokenizer file line " + std::to_string(line_no) +
                                 ": truncated escape");
            }
            if (esc[i + 1] != 'x') {
                throw ParseError("tokenizer file line " + std::to_string(line_no) +
                                 ": unknown escape");
            }
            out += static_cast<char>(hexval(esc[i + 2]) * 16 + hexval(esc[i + 3]));
            i += 3;
        } else {
            out += esc[i];
        }
    }
    return out;
}

inline std::string ascii_lower(const std::string& s) {
    std::string out = s;
    for (auto& c : out) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c + 32);
    }
    return out;
}

} // namespace detail

/// Byte-level BPE tokenizer with a predetermined vocabulary budget. Merges are
/// learned greedily by pair frequency (ties broken lexicographically on the
/// token strings) and applied in learned order at encode time. Words after the
/// first carry their leading space byte, which is how word boundaries survive
/// the round trip through decode.
class SubwordTokenizer {
public:
    SubwordTokenizer() : vocab_(Vocab::byte_vocab()) {}

    static SubwordTokenizer train(std::istream& corpus, std::size_t target_vocab) {
        if (target_vocab < static_cast<std::size_t>(Vocab::kByteFloor)) {
            throw InputError("target vocab " + std::to_string(target_vocab) +
                             " is below the floor of " + std::to_string(Vocab::kByteFloor) +
                             " (256 byte symbols + 5 specials)");
        }

        // Collect unique words with counts, preserving first-seen order so
        // training is deterministic given corpus order.
        struct Word {
            std::vector<int> symbols;
            std::size_t count = 0;
        };
        std::vector<Word> words;
        std::unordered_map<std::string, std::size_t> word_index;
        std::string line;
        while (std::getline(corpus, line)) {
            const std::string lowered = detail::ascii_lower(line);
            std::size_t i = 0;
            bool first = true;
            while (i < lowered.size()) {
                while (i < lowered.size() && std::isspace(static_cast<unsigned char>(lowered[i])))
                    ++i;
                if (i >= lowered.size()) break;
                std::size_t j = i;
                while (j < lowered.size() && !std::isspace(static_cast<unsigned char>(lowered[j])))
                    ++j;
                std::string word = lowered.substr(i, j - i);
                if (!first) word = " " + word;
                first = false;
                auto it = word_index.find(word);
                if (it == word_index.end()) {
                    Word w;
                    for (unsigned char ch : word) w.symbols.push_back(Vocab::kByteBase + ch);
                    w.count = 1;
                    word_index.emplace(word, words.size());
                    words.push_back(std::move(w));
                } else {
                    ++words[it->second].count;
                }
                i = j;
            }
        }
        if (words.empty()) throw InputError("tokenizer training corpus is empty");

        SubwordTokenizer tok;
        while (tok.vocab_.size() < target_vocab) {
            // Count all adjacent symbol pairs, weighted by word frequency.
            std::map<std::pair<int, int>, std::size_t> pair_counts;
            for (const auto& w : words) {
                for (std::size_t k = 0; k + 1 < w.symbols.size(); ++k) {
                    pair_counts[{w.symbols[k], w.symbols[k + 1]}] += w.count;
                }
            }
            bool found = false;
            std::pair<int, int> best{};
            std::size_t best_count = 0;
            std::string best_key;
            for (const auto& [pair, count] : pair_counts) {
                if (count < 2) continue; // a pair must repeat to be worth merging
                const std::string merged =
                    tok.vocab_.tokens[pair.first] + tok.vocab_.tokens[pair.second];
                if (tok.vocab_.contains(merged)) continue; // keep token strings unique
                const std::string key = tok.vocab_.tokens[pair.first] + std::string(1, '\0') +
                                        tok.vocab_.tokens[pair.second];
                if (!found || count > best_count || (count == best_count && key < best_key)) {
                    found = true;
                    best = pair;
                    best_count = count;
                    best_key = key;
                }
            }
            if (!found) break;

            const std::string merged = tok.vocab_.tokens[best.first] + tok.vocab_.tokens[best.second];
            const int result = tok.vocab_.add(merged);
            tok.merges_.push_back({best.first, best.second, result});
            for (auto& w : words) apply_merge(w.symbols, best.first, best.second, result);
        }
        return tok;
    }

    static SubwordTokenizer train_on_text(const std::string& text, std::size_t target_vocab) {
        std::istringstream in(text);
        return train(in, target_vocab);
    }

    std::vector<int> encode(const std::string& text) const {
        const std::string lowered = detail::ascii_lower(text);
        std::vector<int> out;
        std::size_t i = 0;
        bool first = true;
        while (i < lowered.size()) {
            while (i < lowered.size() && std::isspace(static_cast<unsigned char>(lowered[i]))) ++i;
            if (i >= lowered.size()) break;
            std::size_t j = i;
            while (j < lowered.size() && !std::isspace(static_cast<unsigned char>(lowered[j]))) ++j;
            std::string word = lowered.substr(i, j - i);
            if (!first) word = " " + word;
            first = false;

            std::vector<int> symbols;
            symbols.reserve(word.size());
            for (unsigned char ch : word) symbols.push_back(Vocab::kByteBase + ch);
            for (const auto& rule : merges_) {
                if (symbols.size() < 2) break;
                apply_merge(symbols, rule.left, rule.right, rule.result);
            }
            out.insert(out.end(), symbols.begin(), symbols.end());
            i = j;
        }
        return out;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
                throw IndexError("token id " + std::to_string(id) + " out of range [0, " +
                                 std::to_string(vocab_.size()) + ")");
            }
            if (Vocab::is_special(id)) continue;
            out += vocab_.tokens[static_cast<std::size_t>(id)];
        }
        return out;
    }

    const Vocab& vocab() const { return vocab_; }
    const std::vector<MergeRule>& merges() const { return merges_; }
    std::size_t vocab_size() const { return vocab_.size(); }

    void save(std::ostream& os) const {
        os << "qbt-tokenizer-v1 " << vocab_.size() << "\n";
        for (const auto& tok : vocab_.tokens) os << detail::escape_token(tok) << "\n";
        os << "#merges\n";
        for (const auto& rule : merges_) {
            os << detail::escape_token(vocab_.tokens[rule.left]) << " "
               << detail::escape_token(vocab_.tokens[rule.right]) << "\n";
        }
    }

    void save_file(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot open tokenizer file for writing: " + path);
        save(out);
    }

    static SubwordTokenizer load(std::istream& is) {
        std::string line;
        int line_no = 1;
        if (!std::getline(is, line)) throw ParseError("tokenizer file line 1: missing header");
        std::istringstream header(line);
        std::string magic;
        std::size_t size = 0;
        header >> magic >> size;
        if (magic != "qbt-tokenizer-v1" || size < static_cast<std::size_t>(Vocab::kByteFloor)) {
            throw ParseError("tokenizer file line 1: bad header '" + line + "'");
        }

        SubwordTokenizer tok;
        tok.vocab_ = Vocab{};
        for (std::size_t i = 0; i < size; ++i) {
            ++line_no;
            if (!std::getline(is, line)) {
                throw ParseError("tokenizer file line " + std::to_string(line_no) +
                                 ": expected token, found end of file");
            }
            std::string raw = line;
            if (i < static_cast<std::size_t>(Vocab::kNumSpecials)) {
                if (raw != Vocab::special_names()[i]) {
                    throw ParseError("tokenizer file line " + std::to_string(line_no) +
                                     ": expected special token " +
                                     std::string(Vocab::special_names()[i]));
                }
            } else {
                raw = detail::unescape_token(line, line_no);
            }
            tok.vocab_.add(raw);
        }

        ++line_no;
        if (!std::getline(is, line) || line != "#merges") {
            throw ParseError("tokenizer file line " + std::to_string(line_no) +
                             ": expected '#merges' sentinel");
        }

        int next_result = Vocab::kByteFloor;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto space = line.find(' ');
            if (space == std::string::npos) {
                throw ParseError("tokenizer file line " + std::to_string(line_no) +
                                 ": merge line needs two tokens");
            }
            const std::string left = detail::unescape_token(line.substr(0, space), line_no);
            const std::string right = detail::unescape_token(line.substr(space + 1), line_no);
            const auto lit = tok.vocab_.ids.find(left);
            const auto rit = tok.vocab_.ids.find(right);
            if (lit == tok.vocab_.ids.end() || rit == tok.vocab_.ids.end()) {
                throw ParseError("tokenizer file line " + std::to_string(line_no) +
                                 ": merge references unknown token");
            }
            if (next_result >= static_cast<int>(tok.vocab_.size()) ||
                tok.vocab_.tokens[next_result] != left + right) {
                throw ParseError("tokenizer file line " + std::to_string(line_no) +
                                 ": merge result does not match vocabulary order");
            }
            tok.merges_.push_back({lit->second, rit->second, next_result});
            ++next_result;
        }
        if (next_result != static_cast<int>(tok.vocab_.size())) {
            throw ParseError("tokenizer file: " +
                             std::to_string(tok.vocab_.size() - next_result) +
                             " vocabulary entries lack a merge rule");
        }
        return tok;
    }

    static SubwordTokenizer load_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open tokenizer file: " + path);
        return load(in);
    }

private:
    // One left-to-right pass replacing every non-overlapping (left, right)
    // adjacency with the merged symbol.
    static void apply_merge(std::vector<int>& symbols, int left, int right, int result) {
        std::size_t write = 0;
        std::size_t read = 0;
        while (read < symbols.size()) {
            if (read + 1 < symbols.size() && symbols[read] == left && symbols[read + 1] == right) {
                symbols[write++] = result;
                read += 2;
            } else {
                symbols[write++] = symbols[read++];
            }
        }
        symbols.resize(write);
    }

    Vocab vocab_;
    std::vector<MergeRule> merges_;
};

} // namespace qbt
