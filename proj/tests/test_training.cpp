#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "qbt/synthetic.hpp"
#include "qbt/training.hpp"

using namespace qbt;

namespace {

ModelConfig tiny_config(std::size_t vocab) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.embed_size = 16;
    c.hidden_size = 32;
    c.attention_size = 16;
    c.intermediate_size = 16;
    c.layers = 1;
    c.heads = 2;
    c.n_max = 48;
    c.sources = {"news", "finance"};
    c.heads_per_source = 2;
    return c;
}

struct Fixture {
    SubwordTokenizer tokenizer;
    std::vector<PretrainExample> pretrain;
    std::vector<FinetuneExample> finetune;
    std::vector<FinetuneExample> heldout;
    ModelConfig config;
};

Fixture make_fixture(std::size_t docs, double overlap, int tau, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.train_docs = docs;
    spec.dev_docs = 40;
    spec.test_docs = 40;
    spec.overlap = overlap;
    spec.seed = seed;
    SyntheticData data = generate_synthetic(spec);

    std::string corpus;
    for (const auto& d : data.train) corpus += d.text + "\n";
    Fixture fx;
    fx.tokenizer = SubwordTokenizer::train_on_text(corpus, 400);

    MaskingParams params;
    params.tau = tau;
    params.mask_rate = 0.15;
    params.vocab_size = static_cast<int>(fx.tokenizer.vocab_size());
    fx.pretrain = prepare_pretraining(data.train, fx.tokenizer, params, 48, seed, nullptr);
    fx.finetune = to_finetune_examples(data.train, fx.tokenizer, 48);
    fx.heldout = to_finetune_examples(data.test, fx.tokenizer, 48);
    fx.config = tiny_config(fx.tokenizer.vocab_size());
    return fx;
}

std::vector<PretrainExample> slice(const std::vector<PretrainExample>& v, std::size_t b,
                                   std::size_t e) {
    return {v.begin() + static_cast<long>(b), v.begin() + static_cast<long>(std::min(e, v.size()))};
}

} // namespace

TEST_CASE("untrained model loss baselines") {
    ModelConfig c = tiny_config(40000);
    Model model(c, 3);
    TrainState state(model, 1e-4, 3);

    // hand-built batch over the full 40k vocabulary
    Rng rng(5);
    std::vector<PretrainExample> batch;
    for (int e = 0; e < 8; ++e) {
        PretrainExample ex;
        ex.token_ids.push_back(Vocab::kCls);
        for (int i = 0; i < 18; ++i)
            ex.token_ids.push_back(261 + static_cast<int>(rng.uniform_index(39000)));
        ex.token_ids.push_back(Vocab::kSep);
        ex.segment_ids.assign(ex.token_ids.size(), 0);
        ex.is_next = e % 2;
        for (int m : {3, 9, 15}) {
            ex.masked_positions.push_back(m);
            ex.masked_labels.push_back(ex.token_ids[static_cast<std::size_t>(m)]);
            ex.token_ids[static_cast<std::size_t>(m)] = Vocab::kMask;
        }
        batch.push_back(std::move(ex));
    }
    PretrainLosses losses = pretrain_step(state, batch);
    CHECK(std::fabs(losses.l1 - std::log(40000.0)) < 0.5);
    CHECK(std::fabs(losses.l2 - std::log(2.0)) < 0.1);

    std::vector<FinetuneExample> fbatch;
    for (int e = 0; e < 8; ++e) {
        FinetuneExample ex;
        ex.token_ids.push_back(Vocab::kCls);
        for (int i = 0; i < 10; ++i)
            ex.token_ids.push_back(261 + static_cast<int>(rng.uniform_index(39000)));
        ex.token_ids.push_back(Vocab::kSep);
        ex.source = e % 2 ? "news" : "finance";
        ex.label = e % 2;
        fbatch.push_back(std::move(ex));
    }
    Model fresh(c, 7);
    TrainState fstate(fresh, 1e-4, 7);
    const double l_hs = finetune_step(fstate, fbatch);
    CHECK(std::fabs(l_hs - std::log(2.0)) < 0.1);
}

TEST_CASE("training step guards") {
    ModelConfig c = tiny_config(300);
    Model model(c, 1);
    TrainState state(model, 1e-3, 1);
    CHECK_THROWS_AS(pretrain_step(state, {}), InputError);
    FinetuneExample bad;
    bad.token_ids = {Vocab::kCls, 270, Vocab::kSep};
    bad.source = "blogs"; // not a configured source
    bad.label = 1;
    CHECK_THROWS_AS(finetune_step(state, {bad}), ValidationError);
}

TEST_CASE("memorization: 200 steps on a 64-example corpus") {
    Fixture fx = make_fixture(60, 0.1, 1, 11);
    REQUIRE(fx.pretrain.size() >= 64);
    auto corpus64 = slice(fx.pretrain, 0, 64);

    Model model(fx.config, 21);
    TrainState state(model, 5e-3, 21);
    std::vector<double> lm_history;
    for (int step = 0; step < 200; ++step) {
        const std::size_t b = (static_cast<std::size_t>(step) * 16) % corpus64.size();
        auto batch = slice(corpus64, b, b + 16);
        lm_history.push_back(pretrain_step(state, batch).lm);
    }
    // trending down: quarter means strictly decreasing start to end
    auto mean_of = [&](std::size_t b, std::size_t e) {
        double s = 0.0;
        for (std::size_t i = b; i < e; ++i) s += lm_history[i];
        return s / static_cast<double>(e - b);
    };
    CHECK(mean_of(150, 200) < mean_of(0, 50));
    CHECK(mean_of(150, 200) < 0.5 * mean_of(0, 50));
    CHECK(masked_token_accuracy(model, corpus64) > 0.99);
}

TEST_CASE("separable fine-tuning reaches near-perfect training accuracy") {
    Fixture fx = make_fixture(150, 0.0, 1, 13); // token-disjoint pools
    Model model(fx.config, 31);
    TrainState state(model, 3e-3, 31);
    for (int step = 0; step < 300; ++step) {
        const std::size_t b = (static_cast<std::size_t>(step) * 16) % fx.finetune.size();
        std::vector<FinetuneExample> batch(
            fx.finetune.begin() + static_cast<long>(b),
            fx.finetune.begin() + static_cast<long>(std::min(b + 16, fx.finetune.size())));
        finetune_step(state, batch);
    }
    CHECK(classification_accuracy(model, fx.finetune) > 0.99);
}

TEST_CASE("hand-checked loss values") {
    // probability exactly equal to the label hits the clamp floor
    Tape tape;
    Tensor exact = Tensor::from({1.0, 0.0}, {2});
    CHECK(bce_loss(tape, exact, {1.0, 0.0}).item() < 1e-10);
    Tensor half = Tensor::from({0.5, 0.5}, {2});
    CHECK(bce_loss(tape, half, {1.0, 0.0}).item() == Catch::Approx(std::log(2.0)));
}

TEST_CASE("delta norm law: scalar epsilon c gives ||delta|| = c") {
    Fixture fx = make_fixture(30, 0.1, 1, 17);
    Model model(fx.config, 41);
    const double c = 0.7;
    NoiseMagnitude eps(fx.config.hidden_size, c, c);
    auto batch = std::vector<FinetuneExample>(fx.finetune.begin(), fx.finetune.begin() + 6);
    AdversarialDelta adv = adversarial_delta(model, batch, eps);
    REQUIRE(adv.deltas.size() == 6);
    for (std::size_t i = 0; i < adv.deltas.size(); ++i) {
        if (adv.degenerate[i]) continue;
        double norm = 0.0;
        for (double v : adv.deltas[i].data()) norm += v * v;
        norm = std::sqrt(norm);
        CHECK(std::fabs(norm - c) < 1e-10);
    }
}

TEST_CASE("delta is a descent direction for the target loss") {
    Fixture fx = make_fixture(120, 0.0, 1, 19);
    Model model(fx.config, 43);
    TrainState state(model, 3e-3, 43);
    for (int step = 0; step < 150; ++step) {
        const std::size_t b = (static_cast<std::size_t>(step) * 16) % fx.finetune.size();
        std::vector<FinetuneExample> batch(
            fx.finetune.begin() + static_cast<long>(b),
            fx.finetune.begin() + static_cast<long>(std::min(b + 16, fx.finetune.size())));
        finetune_step(state, batch);
    }

    NoiseMagnitude eps(fx.config.hidden_size, 0.1, 0.1);
    int descents = 0, probes = 0;
    for (const auto& ex : fx.heldout) {
        if (probes >= 100) break;
        std::vector<FinetuneExample> one = {ex};
        AdversarialDelta adv = adversarial_delta(model, one, eps);
        if (adv.degenerate[0]) continue;
        const double target = 1.0 - static_cast<double>(ex.label);
        auto target_loss = [&](const std::optional<Tensor>& delta) {
            Tape tape;
            Tensor p = model.classify(tape, ex.token_ids, ex.source, delta);
            return bce_loss(tape, stack_scalars(tape, {p}), {target}).item();
        };
        const double before = target_loss(std::nullopt);
        const double after = target_loss(adv.deltas[0]);
        descents += after < before ? 1 : 0;
        ++probes;
    }
    REQUIRE(probes >= 40);
    CHECK(static_cast<double>(descents) / probes >= 0.95);
}

TEST_CASE("flipping the label flips the FGM direction exactly for a single sigmoid head") {
    ModelConfig c = tiny_config(320);
    c.sources = {"news"};
    c.heads_per_source = 1;
    Model model(c, 47);
    NoiseMagnitude eps(c.hidden_size, 1.0, 1.0);

    FinetuneExample ex;
    ex.token_ids = {Vocab::kCls, 280, 281, 282, Vocab::kSep};
    ex.source = "news";
    ex.label = 0;
    FinetuneExample flipped = ex;
    flipped.label = 1;

    AdversarialDelta d0 = adversarial_delta(model, {ex}, eps);
    AdversarialDelta d1 = adversarial_delta(model, {flipped}, eps);
    REQUIRE_FALSE(d0.degenerate[0]);
    REQUIRE_FALSE(d1.degenerate[0]);
    for (std::size_t i = 0; i < d0.deltas[0].size(); ++i) {
        CHECK(d0.deltas[0].data()[i] == Catch::Approx(-d1.deltas[0].data()[i]).margin(1e-12));
    }
}

TEST_CASE("epsilon stays inside its box after every update") {
    Fixture fx = make_fixture(30, 0.1, 1, 23);
    Model model(fx.config, 53);
    TrainState state(model, 0.01, 53);
    NoiseMagnitude eps(fx.config.hidden_size, 1.0, 2.0);
    for (int step = 0; step < 60; ++step) {
        const std::size_t b = (static_cast<std::size_t>(step) * 2) % (fx.finetune.size() - 2);
        std::vector<FinetuneExample> batch(fx.finetune.begin() + static_cast<long>(b),
                                           fx.finetune.begin() + static_cast<long>(b + 2));
        update_epsilon(state, batch, eps, 1.0);
        CHECK(eps.min() >= 1.0);
        CHECK(eps.max() <= 2.0);
    }
}

TEST_CASE("a dominant norm reward drives epsilon to the upper bound") {
    Fixture fx = make_fixture(20, 0.1, 1, 29);
    Model model(fx.config, 59);
    TrainState state(model, 0.05, 59);
    NoiseMagnitude eps(fx.config.hidden_size, 1.0, 2.0);
    std::vector<FinetuneExample> batch(fx.finetune.begin(), fx.finetune.begin() + 2);
    for (int step = 0; step < 80; ++step) update_epsilon(state, batch, eps, 50.0);
    for (double v : eps.epsilon.data()) CHECK(v == 2.0);
}

TEST_CASE("a == b pins epsilon forever (traditional FGM)") {
    Fixture fx = make_fixture(20, 0.1, 1, 31);
    Model model(fx.config, 61);
    TrainState state(model, 0.05, 61);
    NoiseMagnitude eps(fx.config.hidden_size, 1.5, 1.5);
    std::vector<FinetuneExample> batch(fx.finetune.begin(), fx.finetune.begin() + 2);
    for (int step = 0; step < 10; ++step) {
        update_epsilon(state, batch, eps, 1.0);
        for (double v : eps.epsilon.data()) CHECK(v == 1.5);
    }
}

TEST_CASE("noise bound validation") {
    CHECK_THROWS_AS(NoiseMagnitude(8, 2.0, 1.0), ConfigError);
    CHECK_THROWS_AS(NoiseMagnitude(8, 0.0, 1.0), ConfigError);
}

TEST_CASE("lambda_adv = 0 reproduces the plain fine-tune trajectory bit for bit") {
    Fixture fx = make_fixture(40, 0.1, 1, 37);

    Model plain(fx.config, 67);
    Model adv(fx.config, 67);
    TrainState plain_state(plain, 2e-3, 67);
    TrainState adv_state(adv, 2e-3, 67);
    NoiseMagnitude eps(fx.config.hidden_size, 1.0, 2.0);

    std::vector<double> plain_losses, adv_losses;
    for (int step = 0; step < 12; ++step) {
        const std::size_t b = (static_cast<std::size_t>(step) * 8) % (fx.finetune.size() - 8);
        std::vector<FinetuneExample> batch(fx.finetune.begin() + static_cast<long>(b),
                                           fx.finetune.begin() + static_cast<long>(b + 8));
        plain_losses.push_back(finetune_step(plain_state, batch));
        adv_losses.push_back(adversarial_finetune_step(adv_state, batch, eps, 0.0, 1.0).l_hs);
    }
    for (std::size_t i = 0; i < plain_losses.size(); ++i) {
        CHECK(plain_losses[i] == adv_losses[i]); // bitwise
    }
    auto pp = plain.named_parameters(), pa = adv.named_parameters();
    for (std::size_t i = 0; i < pp.size(); ++i) {
        CHECK(std::memcmp(pp[i].second.data().data(), pa[i].second.data().data(),
                          pp[i].second.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("adversarial training leaves the inference path untouched") {
    Fixture fx = make_fixture(30, 0.1, 1, 41);
    Model model(fx.config, 71);
    const std::size_t before_params = model.parameter_scalars();
    Tape probe1;
    model.classify(probe1, fx.finetune[0].token_ids, fx.finetune[0].source);
    const std::size_t before_ops = probe1.size();

    TrainState state(model, 2e-3, 71);
    NoiseMagnitude eps(fx.config.hidden_size, 1.0, 2.0);
    std::vector<FinetuneExample> batch(fx.finetune.begin(), fx.finetune.begin() + 8);
    for (int step = 0; step < 3; ++step) {
        adversarial_finetune_step(state, batch, eps, 1.0, 1.0);
    }

    CHECK(model.parameter_scalars() == before_params);
    Tape probe2;
    model.classify(probe2, fx.finetune[0].token_ids, fx.finetune[0].source);
    CHECK(probe2.size() == before_ops);
}

TEST_CASE("identical seeds give identical loss trajectories") {
    auto run = [](std::uint64_t seed) {
        Fixture fx = make_fixture(40, 0.1, 1, 43);
        Model model(fx.config, seed);
        TrainState state(model, 2e-3, seed);
        NoiseMagnitude eps(fx.config.hidden_size, 1.0, 2.0);
        std::vector<double> history;
        for (int step = 0; step < 8; ++step) {
            const std::size_t b = (static_cast<std::size_t>(step) * 8) % (fx.finetune.size() - 8);
            std::vector<FinetuneExample> batch(fx.finetune.begin() + static_cast<long>(b),
                                               fx.finetune.begin() + static_cast<long>(b + 8));
            auto losses = adversarial_finetune_step(state, batch, eps, 1.0, 1.0);
            history.push_back(losses.total);
        }
        return history;
    };
    auto h1 = run(97), h2 = run(97);
    REQUIRE(h1.size() == h2.size());
    for (std::size_t i = 0; i < h1.size(); ++i) CHECK(h1[i] == h2[i]);
}

TEST_CASE("metrics log writes one json object per step with the full schema") {
    const std::string path = "qbt_test_metrics.jsonl";
    {
        MetricsLog log(path);
        StepMetrics m1;
        m1.step = 1;
        m1.l1 = 10.5;
        m1.l2 = 0.69;
        log.append(m1);
        StepMetrics m2;
        m2.step = 2;
        m2.l_hs = 0.7;
        m2.l_robust = 0.8;
        m2.eps_min = 1.0;
        m2.eps_max = 2.0;
        m2.eps_mean = 1.4;
        log.append(m2);
    }
    std::ifstream in(path);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        ++n;
        for (const char* key :
             {"step", "L1", "L2", "L_hs", "L_robust", "eps_min", "eps_max", "eps_mean"}) {
            CHECK(j.contains(key));
        }
        if (n == 1) {
            CHECK(j["L1"].get<double>() == Catch::Approx(10.5));
            CHECK(j["L_hs"].is_null());
        }
        if (n == 2) {
            CHECK(j["L1"].is_null());
            CHECK(j["eps_mean"].get<double>() == Catch::Approx(1.4));
        }
    }
    CHECK(n == 2);
    std::remove(path.c_str());
}
