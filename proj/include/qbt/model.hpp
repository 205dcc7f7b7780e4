#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbt/error.hpp"
#include "qbt/quaternion.hpp"
#include "qbt/rng.hpp"
#include "qbt/tensor.hpp"
#include "qbt/tokenizer.hpp"

namespace qbt {

enum class Pooling { Min, Max, Mean };

inline std::string pooling_name(Pooling p) {
    switch (p) {
        case Pooling::Min: return "min";
        case Pooling::Max: return "max";
        case Pooling::Mean: return "mean";
    }
    return "min";
}

inline Pooling pooling_from_name(const std::string& name) {
    if (name == "min") return Pooling::Min;
    if (name == "max") return Pooling::Max;
    if (name == "mean") return Pooling::Mean;
    throw ConfigError("unknown pooling '" + name + "' (expected min, max, or mean)");
}

/// Architecture hyperparameters. The feed-forward size F is pinned to 4H.
struct ModelConfig {
    std::size_t vocab_size = 40000;      // V
    std::size_t embed_size = 128;        // E
    std::size_t hidden_size = 384;       // H
    std::size_t attention_size = 192;    // C
    std::size_t intermediate_size = 128; // I
    std::size_t layers = 6;              // L
    std::size_t heads = 6;
    std::size_t n_max = 128;
    bool factorize_vocab = true;
    bool factorize_attention = true;
    bool factorize_feedforward = true;
    bool factorize_output = true;
    std::vector<std::string> sources = {"news", "finance"};
    std::size_t heads_per_source = 2;
    Pooling pooling = Pooling::Min;

    std::size_t feedforward_size() const { return 4 * hidden_size; } // F

    void validate() const {
        if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecials)) {
            throw ConfigError("vocab_size must exceed the special-token count");
        }
        if (heads == 0) throw ConfigError("heads must be positive");
        if (hidden_size == 0 || hidden_size % 4 != 0) {
            throw ConfigError("hidden_size (H=" + std::to_string(hidden_size) +
                              ") must be a positive multiple of 4");
        }
        if (hidden_size % heads != 0) {
            throw ConfigError("hidden_size (H=" + std::to_string(hidden_size) +
                              ") must be divisible by heads (" + std::to_string(heads) + ")");
        }
        if (attention_size == 0 || attention_size % 4 != 0) {
            throw ConfigError("attention_size (C=" + std::to_string(attention_size) +
                              ") must be a positive multiple of 4");
        }
        if (attention_size % heads != 0) {
            throw ConfigError("attention_size (C=" + std::to_string(attention_size) +
                              ") must be divisible by heads (" + std::to_string(heads) + ")");
        }
        if (factorize_vocab && (embed_size == 0 || embed_size % 4 != 0)) {
            throw ConfigError("embed_size (E=" + std::to_string(embed_size) +
                              ") must be a positive multiple of 4 when vocab factorization is on");
        }
        if ((factorize_feedforward || factorize_output) &&
            (intermediate_size == 0 || intermediate_size % 4 != 0)) {
            throw ConfigError("intermediate_size (I=" + std::to_string(intermediate_size) +
                              ") must be a positive multiple of 4 when feed-forward or output "
                              "factorization is on");
        }
        if (n_max == 0) throw ConfigError("n_max must be positive");
        if (sources.empty()) throw ConfigError("sources must not be empty");
        if (heads_per_source == 0) throw ConfigError("heads_per_source must be positive");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"V", c.vocab_size},
                       {"E", c.embed_size},
                       {"H", c.hidden_size},
                       {"C", c.attention_size},
                       {"I", c.intermediate_size},
                       {"L", c.layers},
                       {"heads", c.heads},
                       {"F", c.feedforward_size()},
                       {"n_max", c.n_max},
                       {"factorize_vocab", c.factorize_vocab},
                       {"factorize_attention", c.factorize_attention},
                       {"factorize_feedforward", c.factorize_feedforward},
                       {"factorize_output", c.factorize_output},
                       {"sources", c.sources},
                       {"heads_per_source", c.heads_per_source},
                       {"pooling", pooling_name(c.pooling)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.vocab_size = j.at("V").get<std::size_t>();
    c.embed_size = j.at("E").get<std::size_t>();
    c.hidden_size = j.at("H").get<std::size_t>();
    c.attention_size = j.at("C").get<std::size_t>();
    c.intermediate_size = j.at("I").get<std::size_t>();
    c.layers = j.at("L").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.n_max = j.at("n_max").get<std::size_t>();
    c.factorize_vocab = j.at("factorize_vocab").get<bool>();
    c.factorize_attention = j.at("factorize_attention").get<bool>();
    c.factorize_feedforward = j.at("factorize_feedforward").get<bool>();
    c.factorize_output = j.at("factorize_output").get<bool>();
    c.sources = j.at("sources").get<std::vector<std::string>>();
    c.heads_per_source = j.at("heads_per_source").get<std::size_t>();
    c.pooling = pooling_from_name(j.at("pooling").get<std::string>());
    if (j.contains("F") && j.at("F").get<std::size_t>() != c.feedforward_size()) {
        throw ConfigError("F must equal 4H (got F=" + j.at("F").dump() + ", H=" +
                          std::to_string(c.hidden_size) + ")");
    }
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

enum class CountMode { Formula, Exact };

/// Weight-matrix accounting: the unfactorized baseline is VH + 12LH^2; each
/// factorization replaces its term (vocab VH -> VE + EH/4; attention QKV
/// 3H^2 -> 3CH/4 with the output projection kept at H^2; feed-forward
/// 4H^2 -> HI/4 + IH; output 4H^2 -> HI + IH/4). Exact mode counts every
/// trainable scalar of the built model, including position/segment tables,
/// biases, layer norms, the decoder heads, and the classifier nets.
inline unsigned long long count_params(const ModelConfig& c, CountMode mode) {
    c.validate();
    using ull = unsigned long long;
    const ull v = c.vocab_size, e = c.embed_size, h = c.hidden_size, cc = c.attention_size,
              i = c.intermediate_size, l = c.layers;
    if (mode == CountMode::Formula) {
        const ull vocab_term = c.factorize_vocab ? v * e + e * h / 4 : v * h;
        const ull qkv = c.factorize_attention ? 3 * cc * h / 4 : 3 * h * h;
        const ull attn_out = h * h;
        const ull ff = c.factorize_feedforward ? h * i / 4 + i * h : 4 * h * h;
        const ull out = c.factorize_output ? h * i + i * h / 4 : 4 * h * h;
        return vocab_term + l * (qkv + attn_out + ff + out);
    }

    const ull f = 4 * h;
    ull total = 0;
    // embeddings
    total += c.factorize_vocab ? v * e + (e * h / 4 + h) : v * h;
    total += c.n_max * h; // position
    total += 2 * h;       // segment
    total += 2 * h;       // embedding layer norm
    // encoder layers
    ull per_layer = 0;
    per_layer += c.factorize_attention ? 3 * (h * cc / 4 + cc) : 3 * (h * h + h);
    per_layer += c.factorize_attention ? cc * h + h : h * h + h; // attention output
    per_layer += 2 * h;                                          // ln1
    per_layer += c.factorize_feedforward ? (h * i / 4 + i) + (i * f / 4 + f) : h * f + f;
    per_layer += c.factorize_output ? (f * i / 4 + i) + (i * h / 4 + h) : f * h + h;
    per_layer += 2 * h; // ln2
    total += l * per_layer;
    // decoders and classifier nets
    total += h * v + v; // W1
    total += h + 1;     // W2
    total += static_cast<ull>(c.sources.size()) * c.heads_per_source * (h + 1);
    return total;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Dense map y = x W + b with W stored [in x out].
class DenseLinear {
public:
    DenseLinear() = default;
    DenseLinear(std::size_t in_dim, std::size_t out_dim, Rng& rng, double init_stddev = 0.02)
        : weight_(Tensor::randn({in_dim, out_dim}, rng, init_stddev, true)),
          bias_(Tensor::zeros({out_dim}, true)) {}

    Tensor forward(Tape& tape, const Tensor& x) const {
        return add_rowvec(tape, matmul(tape, x, weight_), bias_);
    }

    Tensor& weight() { return weight_; }
    const Tensor& weight() const { return weight_; }
    Tensor& bias() { return bias_; }
    const Tensor& bias() const { return bias_; }
    std::vector<Tensor> params() const { return {weight_, bias_}; }

private:
    Tensor weight_, bias_;
};

struct LayerNormParams {
    Tensor gamma, beta;
    LayerNormParams() = default;
    explicit LayerNormParams(std::size_t dim)
        : gamma(Tensor::filled({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)) {}
    Tensor forward(Tape& tape, const Tensor& x) const { return layer_norm(tape, x, gamma, beta); }
};

/// Either a dense map or a quaternion factorized map behind one interface.
class ProjectionMap {
public:
    ProjectionMap() = default;

    static ProjectionMap dense(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
        ProjectionMap m;
        m.dense_ = DenseLinear(in_dim, out_dim, rng);
        m.kind_ = Kind::Dense;
        return m;
    }

    static ProjectionMap quaternion(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
        ProjectionMap m;
        m.quat_ = QuaternionLinear(in_dim, out_dim, rng);
        m.kind_ = Kind::Quat;
        return m;
    }

    /// Two chained quaternion maps through a bottleneck, linear in between.
    static ProjectionMap quaternion_pair(std::size_t in_dim, std::size_t mid_dim,
                                         std::size_t out_dim, Rng& rng) {
        ProjectionMap m;
        m.quat_ = QuaternionLinear(in_dim, mid_dim, rng);
        m.quat2_ = QuaternionLinear(mid_dim, out_dim, rng);
        m.kind_ = Kind::QuatPair;
        return m;
    }

    Tensor forward(Tape& tape, const Tensor& x) const {
        switch (kind_) {
            case Kind::Dense: return dense_.forward(tape, x);
            case Kind::Quat: return quat_.forward(tape, x);
            case Kind::QuatPair: return quat2_.forward(tape, quat_.forward(tape, x));
        }
        throw ContractError("projection map used before initialization");
    }

    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor>>& out) const {
        static const char* comp_names[4] = {"r", "i", "j", "k"};
        switch (kind_) {
            case Kind::Dense:
                out.emplace_back(prefix + ".weight", dense_.weight());
                out.emplace_back(prefix + ".bias", dense_.bias());
                break;
            case Kind::Quat:
                for (int k = 0; k < 4; ++k)
                    out.emplace_back(prefix + ".q." + comp_names[k], quat_.component(k));
                out.emplace_back(prefix + ".q.bias", quat_.bias());
                break;
            case Kind::QuatPair:
                for (int k = 0; k < 4; ++k)
                    out.emplace_back(prefix + ".q1." + comp_names[k], quat_.component(k));
                out.emplace_back(prefix + ".q1.bias", quat_.bias());
                for (int k = 0; k < 4; ++k)
                    out.emplace_back(prefix + ".q2." + comp_names[k], quat2_.component(k));
                out.emplace_back(prefix + ".q2.bias", quat2_.bias());
                break;
        }
    }

    const QuaternionLinear& quat() const { return quat_; }
    const DenseLinear& dense() const { return dense_; }

private:
    enum class Kind { Dense, Quat, QuatPair };
    Kind kind_ = Kind::Dense;
    DenseLinear dense_;
    QuaternionLinear quat_, quat2_;
};

struct EncoderLayer {
    ProjectionMap query, key, value; // H -> C (quaternion) or H -> H (dense)
    DenseLinear attention_out;       // C -> H or H -> H
    LayerNormParams ln1;
    ProjectionMap ff_up;    // H -> 4H, optionally through I
    ProjectionMap ff_down;  // 4H -> H, optionally through I
    LayerNormParams ln2;
};

/// Optional per-layer capture of attention probabilities for diagnostics.
struct EncoderTrace {
    std::vector<std::vector<Tensor>> attention; // [layer][head] -> [n x n]
};

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

class Model {
public:
    Model() = default;

    Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        const std::size_t h = config_.hidden_size;
        const std::size_t f = config_.feedforward_size();

        if (config_.factorize_vocab) {
            token_table_ = Tensor::randn({config_.vocab_size, config_.embed_size}, rng, 0.02, true);
            vocab_proj_ = QuaternionLinear(config_.embed_size, h, rng);
        } else {
            token_table_ = Tensor::randn({config_.vocab_size, h}, rng, 0.02, true);
        }
        position_table_ = Tensor::randn({config_.n_max, h}, rng, 0.02, true);
        segment_table_ = Tensor::randn({2, h}, rng, 0.02, true);
        embed_ln_ = LayerNormParams(h);

        layers_.resize(config_.layers);
        for (auto& layer : layers_) {
            if (config_.factorize_attention) {
                const std::size_t c = config_.attention_size;
                layer.query = ProjectionMap::quaternion(h, c, rng);
                layer.key = ProjectionMap::quaternion(h, c, rng);
                layer.value = ProjectionMap::quaternion(h, c, rng);
                layer.attention_out = DenseLinear(c, h, rng);
            } else {
                layer.query = ProjectionMap::dense(h, h, rng);
                layer.key = ProjectionMap::dense(h, h, rng);
                layer.value = ProjectionMap::dense(h, h, rng);
                layer.attention_out = DenseLinear(h, h, rng);
            }
            layer.ln1 = LayerNormParams(h);
            layer.ff_up = config_.factorize_feedforward
                              ? ProjectionMap::quaternion_pair(h, config_.intermediate_size, f, rng)
                              : ProjectionMap::dense(h, f, rng);
            layer.ff_down = config_.factorize_output
                                ? ProjectionMap::quaternion_pair(f, config_.intermediate_size, h, rng)
                                : ProjectionMap::dense(f, h, rng);
            layer.ln2 = LayerNormParams(h);
        }

        mlm_decoder_ = DenseLinear(h, config_.vocab_size, rng); // W1
        nsp_head_ = DenseLinear(h, 1, rng);                     // W2
        for (const auto& source : config_.sources) {
            std::vector<DenseLinear> heads;
            for (std::size_t k = 0; k < config_.heads_per_source; ++k) {
                heads.emplace_back(h, 1, rng);
            }
            classifier_heads_.emplace_back(source, std::move(heads));
        }
    }

    const ModelConfig& config() const { return config_; }

    /// Hidden states [n x H] for one sequence. attention_mask marks real (1)
    /// vs padded (0) positions; padded keys receive -1e9 before the softmax.
    /// delta, when present, perturbs the embedding sum before the layer norm.
    Tensor forward_encoder(Tape& tape, const std::vector<int>& token_ids,
                           const std::vector<int>& segment_ids,
                           const std::vector<int>& attention_mask,
                           const std::optional<Tensor>& delta = std::nullopt,
                           EncoderTrace* trace = nullptr) const {
        const std::size_t n = token_ids.size();
        if (n == 0) throw InputError("empty sequence");
        if (segment_ids.size() != n || attention_mask.size() != n) {
            throw InputError("token/segment/mask lengths disagree: " + std::to_string(n) + "/" +
                             std::to_string(segment_ids.size()) + "/" +
                             std::to_string(attention_mask.size()));
        }
        if (n > config_.n_max) {
            throw InputError("sequence length " + std::to_string(n) + " exceeds n_max " +
                             std::to_string(config_.n_max));
        }
        for (int s : segment_ids) {
            if (s != 0 && s != 1) throw InputError("segment ids must be 0 or 1");
        }

        Tensor tok = embedding_rows(tape, token_table_, token_ids);
        if (config_.factorize_vocab) tok = vocab_proj_.forward(tape, tok);
        std::vector<int> positions(n);
        std::iota(positions.begin(), positions.end(), 0);
        Tensor x = add(tape, tok, embedding_rows(tape, position_table_, positions));
        x = add(tape, x, embedding_rows(tape, segment_table_, segment_ids));
        if (delta.has_value()) x = add(tape, x, *delta);
        x = embed_ln_.forward(tape, x);

        const std::size_t proj_dim = config_.factorize_attention ? config_.attention_size
                                                                 : config_.hidden_size;
        const std::size_t head_dim = proj_dim / config_.heads;
        const Tensor mask_bias = attention_bias(attention_mask);
        if (trace) trace->attention.clear();

        for (const auto& layer : layers_) {
            Tensor q = layer.query.forward(tape, x);
            Tensor k = layer.key.forward(tape, x);
            Tensor v = layer.value.forward(tape, x);

            std::vector<Tensor> contexts;
            std::vector<Tensor> layer_attn;
            for (std::size_t hh = 0; hh < config_.heads; ++hh) {
                const std::size_t c0 = hh * head_dim, c1 = (hh + 1) * head_dim;
                Tensor qh = slice_cols(tape, q, c0, c1);
                Tensor kh = slice_cols(tape, k, c0, c1);
                Tensor vh = slice_cols(tape, v, c0, c1);
                Tensor scores = matmul(tape, qh, transpose(tape, kh));
                scores = scale(tape, scores, 1.0 / std::sqrt(static_cast<double>(head_dim)));
                scores = add(tape, scores, mask_bias);
                Tensor attn = softmax_rows(tape, scores);
                if (trace) layer_attn.push_back(attn);
                contexts.push_back(matmul(tape, attn, vh));
            }
            Tensor ctx = concat_cols(tape, contexts);
            Tensor attn_out = layer.attention_out.forward(tape, ctx);
            x = layer.ln1.forward(tape, add(tape, x, attn_out));

            Tensor up = gelu(tape, layer.ff_up.forward(tape, x));
            Tensor down = layer.ff_down.forward(tape, up);
            x = layer.ln2.forward(tape, add(tape, x, down));
            if (trace) trace->attention.push_back(std::move(layer_attn));
        }
        return x;
    }

    /// MLM decoder logits [masked x V] at the given positions.
    Tensor mlm_logits(Tape& tape, const Tensor& hidden,
                      const std::vector<int>& masked_positions) const {
        return mlm_decoder_.forward(tape, gather_rows(tape, hidden, masked_positions));
    }

    /// Next-sentence probability from the [CLS] (position 0) vector.
    Tensor nsp_probability(Tape& tape, const Tensor& hidden) const {
        Tensor cls = gather_rows(tape, hidden, {0});
        return sigmoid(tape, nsp_head_.forward(tape, cls));
    }

    bool has_source(const std::string& source) const {
        for (const auto& [name, heads] : classifier_heads_) {
            if (name == source) return true;
        }
        return false;
    }

    /// P(y=1 | sequence, source): the source's head probabilities pooled by
    /// the configured function. Unseen sources average the pooled scores of
    /// every source net.
    Tensor classify(Tape& tape, const std::vector<int>& token_ids, const std::string& source,
                    const std::optional<Tensor>& delta = std::nullopt) const {
        const std::vector<int> segments(token_ids.size(), 0);
        const std::vector<int> mask(token_ids.size(), 1);
        Tensor hidden = forward_encoder(tape, token_ids, segments, mask, delta);
        Tensor cls = gather_rows(tape, hidden, {0});

        auto pooled_for = [&](const std::vector<DenseLinear>& heads) {
            std::vector<Tensor> probs;
            probs.reserve(heads.size());
            for (const auto& head : heads) probs.push_back(sigmoid(tape, head.forward(tape, cls)));
            return pool_scalars(tape, probs, config_.pooling);
        };

        for (const auto& [name, heads] : classifier_heads_) {
            if (name == source) return pooled_for(heads);
        }
        std::vector<Tensor> pooled;
        pooled.reserve(classifier_heads_.size());
        for (const auto& [name, heads] : classifier_heads_) pooled.push_back(pooled_for(heads));
        return mean_all(tape, stack_scalars(tape, pooled));
    }

    static Tensor pool_scalars(Tape& tape, const std::vector<Tensor>& scalars, Pooling pooling) {
        Tensor stacked = stack_scalars(tape, scalars);
        switch (pooling) {
            case Pooling::Min: return reduce_min(tape, stacked);
            case Pooling::Max: return reduce_max(tape, stacked);
            case Pooling::Mean: return mean_all(tape, stacked);
        }
        throw ContractError("unreachable pooling");
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        static const char* comp_names[4] = {"r", "i", "j", "k"};
        out.emplace_back("embeddings.token", token_table_);
        if (config_.factorize_vocab) {
            for (int k = 0; k < 4; ++k)
                out.emplace_back(std::string("embeddings.vocab_proj.") + comp_names[k],
                                 vocab_proj_.component(k));
            out.emplace_back("embeddings.vocab_proj.bias", vocab_proj_.bias());
        }
        out.emplace_back("embeddings.position", position_table_);
        out.emplace_back("embeddings.segment", segment_table_);
        out.emplace_back("embeddings.ln.gamma", embed_ln_.gamma);
        out.emplace_back("embeddings.ln.beta", embed_ln_.beta);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const std::string p = "layer" + std::to_string(l);
            layers_[l].query.collect_params(p + ".attn.query", out);
            layers_[l].key.collect_params(p + ".attn.key", out);
            layers_[l].value.collect_params(p + ".attn.value", out);
            out.emplace_back(p + ".attn.out.weight", layers_[l].attention_out.weight());
            out.emplace_back(p + ".attn.out.bias", layers_[l].attention_out.bias());
            out.emplace_back(p + ".ln1.gamma", layers_[l].ln1.gamma);
            out.emplace_back(p + ".ln1.beta", layers_[l].ln1.beta);
            layers_[l].ff_up.collect_params(p + ".ff.up", out);
            layers_[l].ff_down.collect_params(p + ".ff.down", out);
            out.emplace_back(p + ".ln2.gamma", layers_[l].ln2.gamma);
            out.emplace_back(p + ".ln2.beta", layers_[l].ln2.beta);
        }
        out.emplace_back("mlm.w1.weight", mlm_decoder_.weight());
        out.emplace_back("mlm.w1.bias", mlm_decoder_.bias());
        out.emplace_back("nsp.w2.weight", nsp_head_.weight());
        out.emplace_back("nsp.w2.bias", nsp_head_.bias());
        for (const auto& [source, heads] : classifier_heads_) {
            for (std::size_t k = 0; k < heads.size(); ++k) {
                const std::string p = "cls." + source + ".head" + std::to_string(k);
                out.emplace_back(p + ".weight", heads[k].weight());
                out.emplace_back(p + ".bias", heads[k].bias());
            }
        }
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_scalars() const {
        std::size_t total = 0;
        for (const auto& [name, t] : named_parameters()) total += t.size();
        return total;
    }

    void zero_grad() const {
        for (auto& t : parameters()) t.zero_grad();
    }

    /// Parameters of the fine-tuning surface only (everything except the two
    /// pretraining decoder heads).
    std::vector<Tensor> finetune_parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) {
            if (name.rfind("mlm.", 0) == 0 || name.rfind("nsp.", 0) == 0) continue;
            out.push_back(t);
        }
        return out;
    }

    const std::vector<EncoderLayer>& layers() const { return layers_; }
    const Tensor& token_table() const { return token_table_; }
    const QuaternionLinear& vocab_projection() const { return vocab_proj_; }
    const DenseLinear& mlm_decoder() const { return mlm_decoder_; }
    const DenseLinear& nsp_head() const { return nsp_head_; }

private:
    Tensor attention_bias(const std::vector<int>& attention_mask) const {
        const std::size_t n = attention_mask.size();
        Tensor bias = Tensor::zeros({n, n});
        for (std::size_t j = 0; j < n; ++j) {
            if (attention_mask[j] == 0) {
                for (std::size_t i = 0; i < n; ++i) bias.at(i, j) = -1e9;
            }
        }
        return bias;
    }

    ModelConfig config_;
    Tensor token_table_;
    QuaternionLinear vocab_proj_;
    Tensor position_table_, segment_table_;
    LayerNormParams embed_ln_;
    std::vector<EncoderLayer> layers_;
    DenseLinear mlm_decoder_, nsp_head_;
    std::vector<std::pair<std::string, std::vector<DenseLinear>>> classifier_heads_;
};

inline Model build_model(const ModelConfig& config, std::uint64_t seed) {
    return Model(config, seed);
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "QBT1", u64 manifest length, JSON manifest (config plus
// name/shape/offset per tensor), then raw little-endian 64-bit floats.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);

    nlohmann::json manifest;
    manifest["config"] = model.config();
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0; // element offset into the payload
    const auto params = model.named_parameters();
    for (const auto& [name, t] : params) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.size();
    }
    manifest["tensors"] = tensors;
    const std::string mtext = manifest.dump();

    out.write("QBT1", 4);
    const std::uint64_t mlen = mtext.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [name, t] : params) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed while writing checkpoint: " + path);
}

inline ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "QBT1", 4) != 0) {
        throw StateError("not a QBT1 checkpoint: " + path);
    }
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw StateError("truncated checkpoint manifest: " + path);
    return nlohmann::json::parse(mtext).at("config").get<ModelConfig>();
}

/// Loads a checkpoint into an existing model. Every manifest tensor must match
/// the model's tensor of the same name in shape.
inline void load_checkpoint_into(Model& model, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "QBT1", 4) != 0) {
        throw StateError("not a QBT1 checkpoint: " + path);
    }
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw StateError("truncated checkpoint manifest: " + path);
    const nlohmann::json manifest = nlohmann::json::parse(mtext);

    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : model.named_parameters()) by_name.emplace(name, t);

    const std::streampos payload_start = in.tellg();
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw StateError("checkpoint tensor '" + name + "' has no counterpart in the model");
        }
        if (it->second.shape() != shape) {
            throw StateError("checkpoint/model shape mismatch for '" + name + "': checkpoint " +
                             detail::shape_str(shape) + " vs model " +
                             detail::shape_str(it->second.shape()));
        }
        in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(double)));
        in.read(reinterpret_cast<char*>(it->second.data().data()),
                static_cast<std::streamsize>(it->second.size() * sizeof(double)));
        if (!in) throw StateError("truncated checkpoint payload at tensor '" + name + "'");
    }
}

/// Builds a model from the checkpoint's own config and loads its weights.
inline Model load_checkpoint(const std::string& path) {
    Model model(read_checkpoint_config(path), 0);
    load_checkpoint_into(model, path);
    return model;
}

} // namespace qbt
