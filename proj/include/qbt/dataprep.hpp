#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbt/error.hpp"
#include "qbt/rng.hpp"
#include "qbt/tokenizer.hpp"

namespace qbt {

struct Document {
    std::string text;
    std::string source;
    std::optional<int> label;
};

/// One masked pretraining instance: token_ids holds the corrupted sequence
/// [CLS] A [SEP] B [SEP]; masked_labels restore the originals in place.
struct PretrainExample {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    int is_next = 0;
    std::vector<int> masked_positions;
    std::vector<int> masked_labels;
};

struct FinetuneExample {
    std::vector<int> token_ids; // [CLS] s [SEP]
    std::string source;
    int label = 0;
};

struct SentencePair {
    std::string first;
    std::string second;
    int is_next = 0;
};

// ---------------------------------------------------------------------------
// Sentence splitting
// ---------------------------------------------------------------------------

namespace detail {

inline const std::set<std::string>& abbreviation_guards() {
    static const std::set<std::string> guards = {"mr.", "mrs.", "dr.", "vs.",
                                                 "e.g.", "i.e.", "etc."};
    return guards;
}

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

} // namespace detail

/// Rule-based splitter: a sentence ends at {. ! ?} followed by whitespace and
/// an uppercase letter, or at end of text. A short abbreviation list guards
/// against false splits. Empty fragments are dropped.
inline std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (ch != '.' && ch != '!' && ch != '?') continue;

        // the whitespace-delimited word ending at this punctuation mark
        std::size_t wb = i;
        while (wb > start && !std::isspace(static_cast<unsigned char>(text[wb - 1]))) --wb;
        std::string word = detail::ascii_lower(text.substr(wb, i - wb + 1));
        if (detail::abbreviation_guards().count(word)) continue;

        std::size_t j = i + 1;
        while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        const bool at_end = j >= text.size();
        const bool has_ws = j > i + 1;
        const bool next_upper = !at_end && text[j] >= 'A' && text[j] <= 'Z';
        if (at_end || (has_ws && next_upper)) {
            const std::string sent = detail::trim(text.substr(start, i + 1 - start));
            if (!sent.empty()) out.push_back(sent);
            start = j;
            i = j - 1;
        }
    }
    if (start < text.size()) {
        const std::string tail = detail::trim(text.substr(start));
        if (!tail.empty()) out.push_back(tail);
    }
    return out;
}

// ---------------------------------------------------------------------------
// 50-50 next-sentence rule
// ---------------------------------------------------------------------------

/// p1 = (M + N) / (2M + N): the next-pair sampling probability that balances
/// expected next and not-next counts when N single-sentence documents can only
/// ever produce not-next pairs.
inline double compute_next_probability(std::size_t multi_docs, std::size_t single_docs) {
    if (multi_docs + single_docs == 0) {
        throw InputError("50-50 rule needs at least one document (M + N > 0)");
    }
    const double m = static_cast<double>(multi_docs);
    const double n = static_cast<double>(single_docs);
    return (m + n) / (2.0 * m + n);
}

/// For every consecutive sentence pair inside a multi-sentence document, emit
/// (A, successor, next) with probability p1, otherwise (A, random sentence of
/// another document, not-next). Single-sentence documents always emit a
/// not-next pair. The random partner never comes from the same document.
inline std::vector<SentencePair> pair_sentences(const std::vector<std::vector<std::string>>& docs,
                                                double p1, std::uint64_t rng_seed) {
    if (docs.size() < 2) {
        throw InputError("next-sentence pairing needs at least two documents so a "
                         "not-next partner exists");
    }
    std::vector<std::size_t> offsets(docs.size());
    std::vector<const std::string*> flat;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        if (docs[d].empty()) throw InputError("document " + std::to_string(d) + " has no sentences");
        offsets[d] = flat.size();
        for (const auto& s : docs[d]) flat.push_back(&s);
    }

    Rng rng(rng_seed);
    auto random_other = [&](std::size_t doc) -> const std::string& {
        const std::size_t own = docs[doc].size();
        std::size_t r = rng.uniform_index(flat.size() - own);
        if (r >= offsets[doc]) r += own;
        return *flat[r];
    };

    std::vector<SentencePair> out;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        const auto& sents = docs[d];
        if (sents.size() == 1) {
            out.push_back({sents[0], random_other(d), 0});
            continue;
        }
        for (std::size_t i = 0; i + 1 < sents.size(); ++i) {
            if (rng.uniform() < p1) {
                out.push_back({sents[i], sents[i + 1], 1});
            } else {
                out.push_back({sents[i], random_other(d), 0});
            }
        }
    }
    return out;
}

/// Splits raw documents and runs the 50-50 pairing in one call.
struct PairingResult {
    std::vector<SentencePair> pairs;
    std::size_t multi_docs = 0;
    std::size_t single_docs = 0;
    double p1 = 0.0;
};

inline PairingResult pair_documents(const std::vector<Document>& docs, std::uint64_t rng_seed) {
    std::vector<std::vector<std::string>> split;
    split.reserve(docs.size());
    std::size_t multi = 0, single = 0;
    for (const auto& doc : docs) {
        auto sents = split_sentences(doc.text);
        if (sents.empty()) throw InputError("document with empty text cannot be paired");
        (sents.size() > 1 ? multi : single) += 1;
        split.push_back(std::move(sents));
    }
    PairingResult result;
    result.multi_docs = multi;
    result.single_docs = single;
    result.p1 = compute_next_probability(multi, single);
    result.pairs = pair_sentences(split, result.p1, rng_seed);
    return result;
}

// ---------------------------------------------------------------------------
// Masked-instance generation
// ---------------------------------------------------------------------------

struct MaskingParams {
    int tau = 10;          // independent maskings per pair
    double mask_rate = 0.15;
    int vocab_size = 0;    // for the 10% random replacement draw
};

/// Generates tau independently masked instances of one [CLS] A [SEP] B [SEP]
/// sequence. Per instance, ceil(mask_rate * maskable) positions are chosen
/// without replacement; 80% become [MASK], 10% a random non-special id, 10%
/// stay unchanged. Special-token slots are never masked.
inline std::vector<PretrainExample> make_masked_instances(const std::vector<int>& token_ids,
                                                          const std::vector<int>& segment_ids,
                                                          int is_next, const MaskingParams& params,
                                                          std::uint64_t rng_seed) {
    if (params.tau < 1) throw InputError("masking factor tau must be >= 1");
    if (params.mask_rate <= 0.0 || params.mask_rate >= 1.0) {
        throw InputError("mask_rate must lie in (0, 1)");
    }
    if (params.vocab_size <= Vocab::kNumSpecials) {
        throw InputError("vocab size too small for random replacement");
    }
    std::vector<int> maskable;
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (!Vocab::is_special(token_ids[i])) maskable.push_back(static_cast<int>(i));
    }
    if (maskable.empty()) throw InputError("sequence has no maskable positions");

    const std::size_t k = static_cast<std::size_t>(
        std::ceil(params.mask_rate * static_cast<double>(maskable.size())));
    Rng rng(rng_seed);
    std::vector<PretrainExample> out;
    out.reserve(static_cast<std::size_t>(params.tau));
    for (int t = 0; t < params.tau; ++t) {
        // partial Fisher-Yates draw of k positions without replacement
        std::vector<int> pool = maskable;
        std::vector<int> chosen;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t pick = i + rng.uniform_index(pool.size() - i);
            std::swap(pool[i], pool[pick]);
            chosen.push_back(pool[i]);
        }
        std::sort(chosen.begin(), chosen.end());

        PretrainExample ex;
        ex.token_ids = token_ids;
        ex.segment_ids = segment_ids;
        ex.is_next = is_next;
        for (int pos : chosen) {
            ex.masked_positions.push_back(pos);
            ex.masked_labels.push_back(token_ids[static_cast<std::size_t>(pos)]);
            const double u = rng.uniform();
            if (u < 0.8) {
                ex.token_ids[static_cast<std::size_t>(pos)] = Vocab::kMask;
            } else if (u < 0.9) {
                ex.token_ids[static_cast<std::size_t>(pos)] =
                    Vocab::kNumSpecials +
                    static_cast<int>(rng.uniform_index(
                        static_cast<std::uint64_t>(params.vocab_size - Vocab::kNumSpecials)));
            } // else: left unchanged
        }
        out.push_back(std::move(ex));
    }
    return out;
}

/// Tokenizes a sentence pair into [CLS] A [SEP] B [SEP] with segment ids
/// (0 through the first [SEP] inclusive, 1 afterward), truncating the longer
/// sentence from its end until the sequence fits n_max.
inline void build_pair_sequence(const SubwordTokenizer& tok, const SentencePair& pair,
                                std::size_t n_max, std::vector<int>& token_ids,
                                std::vector<int>& segment_ids) {
    std::vector<int> a = tok.encode(pair.first);
    std::vector<int> b = tok.encode(pair.second);
    if (n_max < 5) throw InputError("n_max too small for a sentence pair");
    while (a.size() + b.size() + 3 > n_max) {
        (a.size() >= b.size() ? a : b).pop_back();
    }
    token_ids.clear();
    segment_ids.clear();
    token_ids.push_back(Vocab::kCls);
    token_ids.insert(token_ids.end(), a.begin(), a.end());
    token_ids.push_back(Vocab::kSep);
    segment_ids.assign(token_ids.size(), 0);
    token_ids.insert(token_ids.end(), b.begin(), b.end());
    token_ids.push_back(Vocab::kSep);
    segment_ids.resize(token_ids.size(), 1);
}

struct PrepareStats {
    std::size_t multi_docs = 0;
    std::size_t single_docs = 0;
    double p1 = 0.0;
    std::size_t next_pairs = 0;
    std::size_t not_next_pairs = 0;
    std::size_t examples = 0;
};

/// Full preparation pipeline: split, pair under the 50-50 rule, tokenize, and
/// mask each pair tau times. Masking seeds are derived per pair index so the
/// output is independent of any worker partitioning.
inline std::vector<PretrainExample> prepare_pretraining(const std::vector<Document>& docs,
                                                        const SubwordTokenizer& tok,
                                                        const MaskingParams& params,
                                                        std::size_t n_max, std::uint64_t seed,
                                                        PrepareStats* stats = nullptr) {
    PairingResult pairing = pair_documents(docs, seed);
    std::vector<PretrainExample> out;
    out.reserve(pairing.pairs.size() * static_cast<std::size_t>(params.tau));
    std::size_t next_count = 0;
    for (std::size_t p = 0; p < pairing.pairs.size(); ++p) {
        const auto& pair = pairing.pairs[p];
        next_count += static_cast<std::size_t>(pair.is_next);
        std::vector<int> token_ids, segment_ids;
        build_pair_sequence(tok, pair, n_max, token_ids, segment_ids);
        auto instances = make_masked_instances(token_ids, segment_ids, pair.is_next, params,
                                               derive_seed(seed, p + 1));
        for (auto& ex : instances) out.push_back(std::move(ex));
    }
    if (stats) {
        stats->multi_docs = pairing.multi_docs;
        stats->single_docs = pairing.single_docs;
        stats->p1 = pairing.p1;
        stats->next_pairs = next_count;
        stats->not_next_pairs = pairing.pairs.size() - next_count;
        stats->examples = out.size();
    }
    return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Raw pretraining corpus: UTF-8 text, one document per line. Blank lines are
/// skipped.
inline std::vector<Document> read_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::vector<Document> docs;
    std::string line;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        docs.push_back({line, "", std::nullopt});
    }
    return docs;
}

inline void to_json(nlohmann::json& j, const PretrainExample& ex) {
    j = nlohmann::json{{"token_ids", ex.token_ids},
                       {"segment_ids", ex.segment_ids},
                       {"is_next", ex.is_next},
                       {"masked_positions", ex.masked_positions},
                       {"masked_labels", ex.masked_labels}};
}

inline void from_json(const nlohmann::json& j, PretrainExample& ex) {
    j.at("token_ids").get_to(ex.token_ids);
    j.at("segment_ids").get_to(ex.segment_ids);
    j.at("is_next").get_to(ex.is_next);
    j.at("masked_positions").get_to(ex.masked_positions);
    j.at("masked_labels").get_to(ex.masked_labels);
}

inline void write_pretrain_jsonl(const std::string& path,
                                 const std::vector<PretrainExample>& examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open file for writing: " + path);
    for (const auto& ex : examples) {
        out << nlohmann::json(ex).dump() << "\n";
    }
}

inline std::vector<PretrainExample> read_pretrain_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::vector<PretrainExample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        try {
            PretrainExample ex = nlohmann::json::parse(line).get<PretrainExample>();
            if (ex.masked_positions.size() != ex.masked_labels.size() ||
                ex.token_ids.size() != ex.segment_ids.size() || ex.masked_positions.empty()) {
                throw ValidationError("inconsistent example field sizes");
            }
            out.push_back(std::move(ex));
        } catch (const ValidationError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

struct FinetuneDataset {
    std::vector<FinetuneExample> examples;
    std::map<std::string, std::vector<std::size_t>> by_source;
};

/// Labeled JSONL: {"text": ..., "label": 0|1, "source": ...} per line. The
/// text is truncated to n_max - 2 ids before wrapping with [CLS]/[SEP].
inline FinetuneDataset load_finetune_dataset(const std::string& path, const SubwordTokenizer& tok,
                                             std::size_t n_max) {
    if (n_max < 3) throw InputError("n_max must leave room for [CLS] and [SEP]");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file: " + path);
    FinetuneDataset ds;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw ParseError(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string() ||
            !j.contains("label") || !j.contains("source") || !j["source"].is_string()) {
            throw ParseError(path + " line " + std::to_string(line_no) +
                             ": record needs string text, 0/1 label, string source");
        }
        if (!j["label"].is_number_integer() ||
            (j["label"].get<int>() != 0 && j["label"].get<int>() != 1)) {
            throw ValidationError(path + " line " + std::to_string(line_no) +
                                  ": label must be 0 or 1");
        }
        const std::string text = j["text"].get<std::string>();
        if (detail::trim(text).empty()) {
            throw ValidationError(path + " line " + std::to_string(line_no) + ": empty text");
        }
        std::vector<int> ids = tok.encode(text);
        if (ids.size() > n_max - 2) ids.resize(n_max - 2);
        FinetuneExample ex;
        ex.token_ids.push_back(Vocab::kCls);
        ex.token_ids.insert(ex.token_ids.end(), ids.begin(), ids.end());
        ex.token_ids.push_back(Vocab::kSep);
        ex.source = j["source"].get<std::string>();
        ex.label = j["label"].get<int>();
        ds.by_source[ex.source].push_back(ds.examples.size());
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

} // namespace qbt
