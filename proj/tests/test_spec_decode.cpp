#include "doctest.h"

#include <cmath>

#include "hyperlab/errors.hpp"
#include "hyperlab/spec_decode.hpp"

using namespace hyperlab;

namespace {

TargetConfig spec_target_config() {
    TargetConfig c;
    c.num_layers = 3;
    c.dim = 16;
    c.heads = 2;
    c.vocab = 16;
    c.max_seq = 96;
    c.mlp_hidden = 32;
    return c;
}

// Perfect drafter: proposes the target's own greedy continuation.
struct TargetDrafter : Drafter {
    const TargetModel& model;
    std::vector<int> committed;
    explicit TargetDrafter(const TargetModel& m) : model(m) {}
    void begin() override { committed.clear(); }
    void observe(const TargetSession& target) override { committed = target.tokens(); }
    std::vector<int> draft(const TargetSession&, int k) override {
        std::vector<int> full = greedy_decode(model, committed, k);
        return std::vector<int>(full.end() - k, full.end());
    }
};

// Uniform-random drafter, independent of the target.
struct UniformDrafter : Drafter {
    Rng rng;
    int vocab;
    UniformDrafter(uint64_t seed, int v) : rng(seed), vocab(v) {}
    void begin() override {}
    void observe(const TargetSession&) override {}
    std::vector<int> draft(const TargetSession&, int k) override {
        std::vector<int> out;
        for (int i = 0; i < k; ++i) out.push_back(rng.uniform_int(vocab));
        return out;
    }
};

}  // namespace

TEST_CASE("perfect drafter accepts everything: n = k, tau = k+1, k-alpha = 1") {
    TargetModel target(spec_target_config(), 51);
    TargetDrafter drafter(target);
    std::vector<std::vector<int>> prompts = {{1, 2, 3}, {7, 4}};
    const int k = 4;
    AcceptanceReport rep = measure_acceptance(target, drafter, prompts, 20, k);
    CHECK(rep.tau == doctest::Approx(k + 1));
    CHECK(rep.k_alpha == doctest::Approx(1.0));
    for (const auto& r : rep.round_log) CHECK(r.accepted == r.proposed);
}

TEST_CASE("speculative output is bit-identical to pure target greedy decoding") {
    TargetModel target(spec_target_config(), 52);
    std::vector<std::vector<int>> prompts = {{3, 1, 4}, {15, 9, 2, 6}, {5}};

    // Any drafter, including adversarial ones, must preserve the output.
    UniformDrafter uniform(99, 16);
    TargetDrafter perfect(target);
    DraftModel zero_draft(target, {}, 52);
    ModelDrafter untrained(zero_draft);

    for (auto* drafter : std::initializer_list<Drafter*>{&uniform, &perfect, &untrained}) {
        for (const auto& prompt : prompts) {
            SpecResult spec = speculative_decode(target, *drafter, prompt, 24, 5);
            std::vector<int> ref = greedy_decode(target, prompt, 24);
            CHECK(spec.tokens == ref);
        }
    }
}

TEST_CASE("k = 1 reduces to single-token drafting and is deterministic") {
    TargetModel target(spec_target_config(), 53);
    DraftModel draft(target, {}, 53);
    ModelDrafter drafter(draft);
    SpecResult a = speculative_decode(target, drafter, {2, 8}, 10, 1);
    SpecResult b = speculative_decode(target, drafter, {2, 8}, 10, 1);
    CHECK(a.tokens == b.tokens);
    for (const auto& r : a.rounds) {
        CHECK(r.proposed == 1);
        CHECK(r.accepted <= 1);
    }
}

TEST_CASE("uniform random drafter over V=16 is accepted at depth 1 about 1/16 of the time") {
    TargetModel target(spec_target_config(), 54);  // untrained: argmax independent of drafts
    UniformDrafter drafter(1234, 16);
    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < 550; ++i) prompts.push_back({i % 16, (3 * i + 1) % 16});
    AcceptanceReport rep = measure_acceptance(target, drafter, prompts, 20, 2);
    REQUIRE(rep.depth_attempts[0] >= 10000);
    double p = rep.alpha_per_depth[0];
    double sigma = std::sqrt((1.0 / 16) * (15.0 / 16) / static_cast<double>(rep.depth_attempts[0]));
    CHECK(std::abs(p - 1.0 / 16) < 5.0 * sigma + 1e-9);
}

TEST_CASE("report fields replay from the raw round log") {
    TargetModel target(spec_target_config(), 55);
    DraftModel draft(target, {}, 55);
    ModelDrafter drafter(draft);
    std::vector<std::vector<int>> prompts = {{1, 2}, {3, 4, 5}};
    AcceptanceReport rep = measure_acceptance(target, drafter, prompts, 16, 6);
    AcceptanceReport replay = AcceptanceReport::from_rounds(rep.round_log, rep.k);
    CHECK(rep.tau == replay.tau);
    CHECK(rep.tau_no_bonus == replay.tau_no_bonus);
    CHECK(rep.k_alpha == replay.k_alpha);
    CHECK(rep.tau >= 1.0);
    CHECK(rep.tau == doctest::Approx(rep.tau_no_bonus + 1.0));
    for (double a : rep.alpha_per_depth) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
    nlohmann::json j = rep.to_json();
    CHECK(j.at("tau") == rep.tau);
    CHECK(j.at("round_log").size() == rep.round_log.size());
}

TEST_CASE("speedup surrogate formula") {
    CHECK(estimate_speedup(11.0, 0.0, 10) == doctest::Approx(11.0));  // tau=k+1, free draft
    CHECK(estimate_speedup(1.0, 0.0, 10) == doctest::Approx(1.0));    // nothing accepted
    CHECK(estimate_speedup(3.77, 0.05, 10) == doctest::Approx(3.77 / 1.5));
    CHECK(estimate_speedup(3.77, 0.05, 10) == doctest::Approx(2.513).epsilon(1e-3));
    CHECK_THROWS_AS(estimate_speedup(0.5, 0.1, 10), InputError);
    CHECK_THROWS_AS(estimate_speedup(2.0, 1.5, 10), InputError);
}

TEST_CASE("context budget violations raise protocol errors") {
    TargetModel target(spec_target_config(), 56);
    DraftModel draft(target, {}, 56);
    ModelDrafter drafter(draft);
    std::vector<int> prompt = {1, 2, 3};
    CHECK_THROWS_AS(speculative_decode(target, drafter, prompt, 96, 10), ProtocolError);

    // Direct chain call over the budget.
    LayerFeatureStack stack;
    target.forward(prompt, &stack);
    DraftSession session(draft);
    session.append_committed(stack, prompt);
    CHECK_THROWS_AS(session.chain(200), ProtocolError);
}

TEST_CASE("empty prompt set is an input error") {
    TargetModel target(spec_target_config(), 57);
    DraftModel draft(target, {}, 57);
    ModelDrafter drafter(draft);
    std::vector<std::vector<int>> none;
    CHECK_THROWS_AS(measure_acceptance(target, drafter, none, 8, 2), InputError);
}
