#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbt/dataprep.hpp"
#include "qbt/error.hpp"
#include "qbt/model.hpp"
#include "qbt/rng.hpp"
#include "qbt/tensor.hpp"

namespace qbt {

/// Learnable per-embedding-dimension perturbation scale, box-constrained to
/// [lower, upper] by projection after every update.
struct NoiseMagnitude {
    Tensor epsilon; // [H]
    double lower = 1.0;
    double upper = 2.0;

    NoiseMagnitude() = default;
    NoiseMagnitude(std::size_t dim, double a, double b) : lower(a), upper(b) {
        if (a > b) throw ConfigError("noise bounds need a <= b, got [" + std::to_string(a) + ", " +
                                     std::to_string(b) + "]");
        if (a <= 0.0) throw ConfigError("noise lower bound must be positive");
        epsilon = Tensor::filled({dim}, a, true);
    }

    void project() {
        for (auto& v : epsilon.data()) v = std::clamp(v, lower, upper);
    }

    double min() const { return *std::min_element(epsilon.data().begin(), epsilon.data().end()); }
    double max() const { return *std::max_element(epsilon.data().begin(), epsilon.data().end()); }
    double mean() const {
        double s = 0.0;
        for (double v : epsilon.data()) s += v;
        return s / static_cast<double>(epsilon.size());
    }
};

/// Owns the optimizer state for one training run. One trainer owns the model
/// at a time; evaluation on the live model must pause training.
class TrainState {
public:
    TrainState(Model& model, double lr, std::uint64_t seed)
        : model_(model), optimizer_(model.parameters(), lr), seed_(seed) {}

    Model& model() { return model_; }
    const Model& model() const { return model_; }
    Adam& optimizer() { return optimizer_; }
    std::uint64_t seed() const { return seed_; }

    std::size_t step_count() const { return step_; }
    const std::vector<double>& loss_history() const { return history_; }

    void record(double loss) {
        if (!std::isfinite(loss)) {
            throw ContractError("non-finite loss at step " + std::to_string(step_));
        }
        ++step_;
        history_.push_back(loss);
    }

    Adam& epsilon_optimizer(NoiseMagnitude& eps) {
        if (!eps_optimizer_.has_value()) {
            eps_optimizer_.emplace(std::vector<Tensor>{eps.epsilon}, optimizer_.learning_rate());
        } else if (!eps_optimizer_->params()[0].same_storage(eps.epsilon)) {
            throw ContractError("train state already tracks a different noise magnitude tensor");
        }
        return *eps_optimizer_;
    }

private:
    Model& model_;
    Adam optimizer_;
    std::optional<Adam> eps_optimizer_;
    std::uint64_t seed_ = 0;
    std::size_t step_ = 0;
    std::vector<double> history_;
};

struct PretrainLosses {
    double l1 = 0.0; // masked-token cross entropy
    double l2 = 0.0; // next-sentence binary cross entropy
    double lm = 0.0; // l1 + l2
};

/// One optimization step on L1 + L2 over a batch of masked instances.
inline PretrainLosses pretrain_step(TrainState& state, const std::vector<PretrainExample>& batch) {
    if (batch.empty()) throw InputError("pretrain batch is empty");
    std::size_t total_masked = 0;
    for (const auto& ex : batch) total_masked += ex.masked_positions.size();
    if (total_masked == 0) throw InputError("pretrain batch has zero masked positions");

    Model& model = state.model();
    state.optimizer().zero_grad();
    Tape tape;

    Tensor l1 = Tensor::scalar(0.0);
    std::vector<Tensor> nsp_probs;
    std::vector<double> nsp_labels;
    for (const auto& ex : batch) {
        const std::vector<int> mask(ex.token_ids.size(), 1);
        Tensor hidden = model.forward_encoder(tape, ex.token_ids, ex.segment_ids, mask);
        Tensor logits = model.mlm_logits(tape, hidden, ex.masked_positions);
        Tensor ce = softmax_cross_entropy(tape, logits, ex.masked_labels);
        // per-example mean re-weighted into a mean over all masked positions
        const double w = static_cast<double>(ex.masked_positions.size()) /
                         static_cast<double>(total_masked);
        l1 = add(tape, l1, scale(tape, ce, w));
        nsp_probs.push_back(model.nsp_probability(tape, hidden));
        nsp_labels.push_back(static_cast<double>(ex.is_next));
    }
    Tensor l2 = bce_loss(tape, stack_scalars(tape, nsp_probs), nsp_labels);
    Tensor lm = add(tape, l1, l2);
    tape.backward(lm);
    state.optimizer().step();

    PretrainLosses out{l1.item(), l2.item(), lm.item()};
    state.record(out.lm);
    return out;
}

/// One optimization step on the classification loss L_hs over clean inputs.
inline double finetune_step(TrainState& state, const std::vector<FinetuneExample>& batch) {
    if (batch.empty()) throw InputError("finetune batch is empty");
    Model& model = state.model();
    for (const auto& ex : batch) {
        if (ex.label != 0 && ex.label != 1) throw ValidationError("labels must be 0 or 1");
        if (!model.has_source(ex.source)) {
            throw ValidationError("unknown source '" + ex.source + "' at train time");
        }
    }
    state.optimizer().zero_grad();
    Tape tape;
    std::vector<Tensor> probs;
    std::vector<double> labels;
    for (const auto& ex : batch) {
        probs.push_back(model.classify(tape, ex.token_ids, ex.source));
        labels.push_back(static_cast<double>(ex.label));
    }
    Tensor l_hs = bce_loss(tape, stack_scalars(tape, probs), labels);
    tape.backward(l_hs);
    state.optimizer().step();
    state.record(l_hs.item());
    return l_hs.item();
}

struct AdversarialDelta {
    std::vector<Tensor> deltas;     // per example, [n x H]
    std::vector<Tensor> unit_grads; // g / ||g||_2, constants
    std::vector<bool> degenerate;   // true when the gradient norm was zero
};

/// Fast-gradient perturbations toward the adversarial target class: for each
/// example, delta = -eps (*) g/||g||_2 where g is the gradient of
/// -log P(target | s) with respect to the token-embedding sum, eps broadcast
/// across positions, and the norm taken over the whole sequence gradient.
/// Model parameters are read, never updated.
inline AdversarialDelta adversarial_delta(Model& model, const std::vector<FinetuneExample>& batch,
                                          const NoiseMagnitude& eps) {
    AdversarialDelta out;
    const std::size_t h = model.config().hidden_size;
    if (eps.epsilon.shape() != std::vector<std::size_t>{h}) {
        throw ConfigError("noise magnitude dimension " + detail::shape_str(eps.epsilon.shape()) +
                          " does not match hidden size " + std::to_string(h));
    }
    for (const auto& ex : batch) {
        const std::size_t n = ex.token_ids.size();
        Tape tape;
        // a zero perturbation probe whose gradient is the embedding-sum gradient
        Tensor probe = Tensor::zeros({n, h}, true);
        Tensor prob = model.classify(tape, ex.token_ids, ex.source, probe);
        const double target = 1.0 - static_cast<double>(ex.label);
        Tensor loss = bce_loss(tape, stack_scalars(tape, {prob}), {target});
        probe.zero_grad();
        tape.backward(loss);

        const auto& g = probe.grad();
        double norm = 0.0;
        for (double v : g) norm += v * v;
        norm = std::sqrt(norm);

        Tensor unit = Tensor::zeros({n, h});
        Tensor delta = Tensor::zeros({n, h});
        if (norm > 0.0) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < h; ++j) {
                    const double u = g[i * h + j] / norm;
                    unit.at(i, j) = u;
                    delta.at(i, j) = -eps.epsilon.data()[j] * u;
                }
            }
        }
        out.deltas.push_back(std::move(delta));
        out.unit_grads.push_back(std::move(unit));
        out.degenerate.push_back(norm == 0.0);
    }
    return out;
}

/// One gradient step on eps minimizing L_adv(eps) - lambda_eps * ||eps||_2
/// through the delta(eps) dependency, with the model treated as a constant,
/// followed by componentwise projection into [a, b].
inline void update_epsilon(TrainState& state, const std::vector<FinetuneExample>& batch,
                           NoiseMagnitude& eps, double lambda_eps) {
    if (eps.lower > eps.upper) throw ConfigError("noise bounds need a <= b");
    Model& model = state.model();
    AdversarialDelta probes = adversarial_delta(model, batch, eps);

    model.zero_grad(); // parameter gradients from the probe pass are discarded
    eps.epsilon.zero_grad();
    Tape tape;
    std::vector<Tensor> probs;
    std::vector<double> targets;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor delta = scale(tape, mul_rowvec(tape, probes.unit_grads[i], eps.epsilon), -1.0);
        probs.push_back(model.classify(tape, batch[i].token_ids, batch[i].source, delta));
        targets.push_back(1.0 - static_cast<double>(batch[i].label));
    }
    Tensor l_adv = bce_loss(tape, stack_scalars(tape, probs), targets);
    Tensor objective = sub(tape, l_adv, scale(tape, l2_norm(tape, eps.epsilon), lambda_eps));
    tape.backward(objective);
    state.epsilon_optimizer(eps).step();
    eps.project();
    model.zero_grad();
}

struct AdversarialLosses {
    double l_hs = 0.0;
    double l_robust = 0.0; // perturbed-input BCE against the true labels
    double total = 0.0;    // l_hs + lambda_adv * l_robust - lambda_eps * ||eps||
};

/// Three sub-steps per batch: (1) a model step on the clean loss; (2) fast
/// gradient perturbations with the current eps against the frozen parameters;
/// (3) a model step on the perturbed-input loss, then the eps update. The
/// robustness step trains against the true labels; literal_objective instead
/// uses the adversarial target labels as printed in the combined objective,
/// which trains the model toward the wrong class under noise and exists for
/// ablation only. With lambda_adv == 0 the adversarial sub-steps are skipped
/// entirely, reproducing the plain fine-tune trajectory bit for bit.
inline AdversarialLosses adversarial_finetune_step(TrainState& state,
                                                   const std::vector<FinetuneExample>& batch,
                                                   NoiseMagnitude& eps, double lambda_adv,
                                                   double lambda_eps,
                                                   bool literal_objective = false) {
    AdversarialLosses out;
    out.l_hs = finetune_step(state, batch);

    if (lambda_adv != 0.0) {
        Model& model = state.model();
        AdversarialDelta adv = adversarial_delta(model, batch, eps);

        state.optimizer().zero_grad();
        Tape tape;
        std::vector<Tensor> probs;
        std::vector<double> train_labels, true_labels;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            probs.push_back(
                model.classify(tape, batch[i].token_ids, batch[i].source, adv.deltas[i]));
            const double y = static_cast<double>(batch[i].label);
            true_labels.push_back(y);
            train_labels.push_back(literal_objective ? 1.0 - y : y);
        }
        Tensor stacked = stack_scalars(tape, probs);
        Tensor l_train = bce_loss(tape, stacked, train_labels);
        Tensor scaled = scale(tape, l_train, lambda_adv);
        tape.backward(scaled);
        state.optimizer().step();

        // reported robustness loss always measures the true labels
        Tape report_tape;
        out.l_robust = bce_loss(report_tape, stacked, true_labels).item();

        update_epsilon(state, batch, eps, lambda_eps);
    }

    Tape norm_tape;
    out.total = out.l_hs + lambda_adv * out.l_robust -
                lambda_eps * l2_norm(norm_tape, eps.epsilon).item();
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

/// Fraction of masked positions whose argmax logit equals the original token.
inline double masked_token_accuracy(const Model& model,
                                    const std::vector<PretrainExample>& examples) {
    std::size_t correct = 0, total = 0;
    for (const auto& ex : examples) {
        Tape tape;
        const std::vector<int> mask(ex.token_ids.size(), 1);
        Tensor hidden = model.forward_encoder(tape, ex.token_ids, ex.segment_ids, mask);
        Tensor logits = model.mlm_logits(tape, hidden, ex.masked_positions);
        const std::size_t v = logits.shape()[1];
        for (std::size_t i = 0; i < ex.masked_positions.size(); ++i) {
            const double* row = logits.data().data() + i * v;
            const std::size_t arg = static_cast<std::size_t>(
                std::max_element(row, row + v) - row);
            correct += arg == static_cast<std::size_t>(ex.masked_labels[i]) ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

inline std::vector<double> classify_probabilities(const Model& model,
                                                  const std::vector<FinetuneExample>& examples) {
    std::vector<double> probs;
    probs.reserve(examples.size());
    for (const auto& ex : examples) {
        Tape tape;
        probs.push_back(model.classify(tape, ex.token_ids, ex.source).item());
    }
    return probs;
}

inline double classification_accuracy(const Model& model,
                                      const std::vector<FinetuneExample>& examples,
                                      double threshold = 0.5) {
    if (examples.empty()) return 0.0;
    std::size_t correct = 0;
    const auto probs = classify_probabilities(model, examples);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        correct += ((probs[i] >= threshold) ? 1 : 0) == examples[i].label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

/// Accuracy under random embedding noise: each sequence is perturbed by a
/// Gaussian direction rescaled to the given L2 norm before classification.
inline double perturbed_accuracy(const Model& model, const std::vector<FinetuneExample>& examples,
                                 double noise_norm, std::uint64_t seed, double threshold = 0.5) {
    if (examples.empty()) return 0.0;
    Rng rng(seed);
    const std::size_t h = model.config().hidden_size;
    std::size_t correct = 0;
    for (const auto& ex : examples) {
        const std::size_t n = ex.token_ids.size();
        Tensor noise = Tensor::zeros({n, h});
        double norm = 0.0;
        for (auto& v : noise.data()) {
            v = rng.gaussian();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm > 0.0) {
            for (auto& v : noise.data()) v *= noise_norm / norm;
        }
        Tape tape;
        const double p = model.classify(tape, ex.token_ids, ex.source, noise).item();
        correct += ((p >= threshold) ? 1 : 0) == ex.label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Metrics log: one JSON object per step
// ---------------------------------------------------------------------------

struct StepMetrics {
    std::size_t step = 0;
    std::optional<double> l1, l2, l_hs, l_robust;
    std::optional<double> eps_min, eps_max, eps_mean;
};

inline void to_json(nlohmann::json& j, const StepMetrics& m) {
    auto opt = [](const std::optional<double>& v) {
        return v.has_value() ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    j = nlohmann::json{{"step", m.step},         {"L1", opt(m.l1)},
                       {"L2", opt(m.l2)},        {"L_hs", opt(m.l_hs)},
                       {"L_robust", opt(m.l_robust)}, {"eps_min", opt(m.eps_min)},
                       {"eps_max", opt(m.eps_max)},   {"eps_mean", opt(m.eps_mean)}};
}

class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open metrics log for writing: " + path);
    }

    void append(const StepMetrics& m) {
        if (out_.is_open()) out_ << nlohmann::json(m).dump() << "\n";
    }

    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
};

} // namespace qbt
