#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "json.hpp"

#include "hyperlab/draft_net.hpp"
#include "hyperlab/target_lm.hpp"

namespace hyperlab {

struct RoundRecord {
    int proposed = 0;  // k for this round
    int accepted = 0;  // n
    int bonus = -1;    // token committed after the accepted prefix
};

struct AcceptanceReport {
    double tau = 0.0;           // mean (accepted + bonus) per round
    double tau_no_bonus = 0.0;  // mean accepted per round
    double k_alpha = 0.0;       // mean conditional per-depth acceptance, depths 1..k
    int k = 0;
    long rounds = 0;
    std::vector<long> depth_attempts;  // index d-1 = depth d
    std::vector<long> depth_accepts;
    std::vector<double> alpha_per_depth;
    std::vector<RoundRecord> round_log;

    nlohmann::json to_json() const;
    // Recomputes tau/alpha from a raw round log (the replay oracle).
    static AcceptanceReport from_rounds(const std::vector<RoundRecord>& rounds, int k);
};

// Proposal source. One instance serves one sequence at a time; begin() resets,
// observe() is invoked after every commit so the drafter can sync its state
// against the target session (tokens + features).
class Drafter {
public:
    virtual ~Drafter() = default;
    virtual void begin() = 0;
    virtual void observe(const TargetSession& target) = 0;
    virtual std::vector<int> draft(const TargetSession& target, int k) = 0;
};

// The real draft model behind the Drafter interface.
class ModelDrafter : public Drafter {
public:
    explicit ModelDrafter(const DraftModel& model) : model_(model) {}
    void begin() override { session_ = std::make_unique<DraftSession>(model_); }
    void observe(const TargetSession& target) override;
    std::vector<int> draft(const TargetSession& target, int k) override;

private:
    const DraftModel& model_;
    std::unique_ptr<DraftSession> session_;
};

// Greedy-verification decoding state. The committed sequence is by
// construction a prefix of the pure-target greedy decode.
class SpecSession {
public:
    SpecSession(const TargetModel& target, const std::vector<int>& prompt);

    // Batch-verifies proposals in one target forward, commits the accepted
    // prefix plus the bonus token, and returns the round record.
    RoundRecord verify_commit(std::span<const int> proposals);

    const std::vector<int>& committed() const { return committed_; }
    const TargetSession& target_session() const { return target_; }
    const std::vector<RoundRecord>& rounds() const { return rounds_; }
    int argmax_pending() const;

private:
    TargetSession target_;
    std::vector<int> committed_;
    std::vector<double> pending_;  // logits row predicting the next position
    std::vector<RoundRecord> rounds_;
};

struct SpecResult {
    std::vector<int> tokens;  // prompt + exactly new_tokens continuations
    std::vector<RoundRecord> rounds;
};

SpecResult speculative_decode(const TargetModel& target, Drafter& drafter,
                              const std::vector<int>& prompt, int new_tokens, int k);

AcceptanceReport measure_acceptance(const TargetModel& target, Drafter& drafter,
                                    const std::vector<std::vector<int>>& prompts, int new_tokens,
                                    int k);

// Tokens per unit of target-equivalent compute: tau / (1 + k*c), where c is
// the draft/target per-token cost ratio.
double estimate_speedup(double tau, double cost_ratio, int k);

}  // namespace hyperlab
