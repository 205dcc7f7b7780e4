#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbt/dataprep.hpp"
#include "qbt/error.hpp"
#include "qbt/rng.hpp"

namespace qbt {

/// Synthetic binary-classification corpus: two phrase pools with a controlled
/// shared-vocabulary overlap, spread across two source tags. Documents carry
/// one to three sentences so the corpus exercises both branches of the 50-50
/// pairing rule.
struct SyntheticSpec {
    std::size_t train_docs = 2000;
    std::size_t dev_docs = 400;
    std::size_t test_docs = 600;
    std::size_t words_per_pool = 30;
    double overlap = 0.1; // fraction of each sentence drawn from a shared pool
    std::uint64_t seed = 1;
};

struct SyntheticData {
    std::vector<Document> train, dev, test;
};

namespace detail {

inline std::vector<std::string> synthetic_words(Rng& rng, std::size_t count,
                                                const std::string& prefix) {
    static const std::vector<std::string> syllables = {
        "ba", "do", "ki", "lu", "mep", "tor", "san", "vel", "nor", "fim",
        "gra", "hop", "jin", "kel", "lom", "nap", "par", "que", "rud", "sil"};
    std::vector<std::string> words;
    std::set<std::string> seen;
    while (words.size() < count) {
        std::string w = prefix;
        const std::size_t parts = 2 + rng.uniform_index(2);
        for (std::size_t i = 0; i < parts; ++i) w += syllables[rng.uniform_index(syllables.size())];
        if (seen.insert(w).second) words.push_back(w);
    }
    return words;
}

} // namespace detail

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    Rng rng(spec.seed);
    const auto pos_pool = detail::synthetic_words(rng, spec.words_per_pool, "z");
    const auto neg_pool = detail::synthetic_words(rng, spec.words_per_pool, "q");
    const auto shared_pool = detail::synthetic_words(rng, spec.words_per_pool / 2 + 1, "w");

    auto make_sentence = [&](int label) {
        const auto& own = label == 1 ? pos_pool : neg_pool;
        const std::size_t len = 4 + rng.uniform_index(5);
        std::string s;
        for (std::size_t i = 0; i < len; ++i) {
            const bool from_shared = rng.uniform() < spec.overlap;
            const auto& pool = from_shared ? shared_pool : own;
            std::string w = pool[rng.uniform_index(pool.size())];
            if (i == 0 && !w.empty()) w[0] = static_cast<char>(std::toupper(w[0]));
            if (i) s += " ";
            s += w;
        }
        s += ".";
        return s;
    };

    auto make_docs = [&](std::size_t count) {
        std::vector<Document> docs;
        docs.reserve(count);
        for (std::size_t d = 0; d < count; ++d) {
            const int label = static_cast<int>(rng.uniform_index(2));
            const std::size_t sentences = 1 + rng.uniform_index(3);
            std::string text;
            for (std::size_t s = 0; s < sentences; ++s) {
                if (s) text += " ";
                text += make_sentence(label);
            }
            const std::string source = rng.uniform_index(2) == 0 ? "news" : "finance";
            docs.push_back({text, source, label});
        }
        return docs;
    };

    SyntheticData data;
    data.train = make_docs(spec.train_docs);
    data.dev = make_docs(spec.dev_docs);
    data.test = make_docs(spec.test_docs);
    return data;
}

/// One document per line, for tokenizer training and pretraining preparation.
inline void write_corpus(const std::string& path, const std::vector<Document>& docs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open corpus for writing: " + path);
    for (const auto& doc : docs) out << doc.text << "\n";
}

/// Labeled JSONL records for fine-tuning and evaluation.
inline void write_labeled_jsonl(const std::string& path, const std::vector<Document>& docs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open dataset for writing: " + path);
    for (const auto& doc : docs) {
        if (!doc.label.has_value()) throw ValidationError("document lacks a label: " + doc.text);
        out << nlohmann::json{{"text", doc.text}, {"label", *doc.label}, {"source", doc.source}}
                   .dump()
            << "\n";
    }
}

/// In-memory conversion used by tests: tokenize labeled documents directly.
inline std::vector<FinetuneExample> to_finetune_examples(const std::vector<Document>& docs,
                                                         const SubwordTokenizer& tok,
                                                         std::size_t n_max) {
    std::vector<FinetuneExample> out;
    out.reserve(docs.size());
    for (const auto& doc : docs) {
        if (!doc.label.has_value()) throw ValidationError("document lacks a label");
        std::vector<int> ids = tok.encode(doc.text);
        if (ids.size() > n_max - 2) ids.resize(n_max - 2);
        FinetuneExample ex;
        ex.token_ids.push_back(Vocab::kCls);
        ex.token_ids.insert(ex.token_ids.end(), ids.begin(), ids.end());
        ex.token_ids.push_back(Vocab::kSep);
        ex.source = doc.source;
        ex.label = *doc.label;
        out.push_back(std::move(ex));
    }
    return out;
}

} // namespace qbt
