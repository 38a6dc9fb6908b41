#include "hyperlab/spec_decode.hpp"

#include <algorithm>
#include <cmath>

#include "hyperlab/errors.hpp"

namespace hyperlab {

using ad::Mat;

nlohmann::json AcceptanceReport::to_json() const {
    nlohmann::json rl = nlohmann::json::array();
    for (const auto& r : round_log) rl.push_back({{"k", r.proposed}, {"n", r.accepted}, {"bonus", r.bonus}});
    return {{"tau", tau},
            {"tau_no_bonus", tau_no_bonus},
            {"k_alpha", k_alpha},
            {"k", k},
            {"rounds", rounds},
            {"depth_attempts", depth_attempts},
            {"depth_accepts", depth_accepts},
            {"alpha_per_depth", alpha_per_depth},
            {"round_log", rl}};
}

AcceptanceReport AcceptanceReport::from_rounds(const std::vector<RoundRecord>& rounds, int k) {
    AcceptanceReport rep;
    rep.k = k;
    rep.rounds = static_cast<long>(rounds.size());
    rep.round_log = rounds;
    rep.depth_attempts.assign(static_cast<size_t>(k), 0);
    rep.depth_accepts.assign(static_cast<size_t>(k), 0);
    if (rounds.empty()) return rep;

    double commit_sum = 0.0, accept_sum = 0.0;
    for (const auto& r : rounds) {
        commit_sum += r.accepted + 1;
        accept_sum += r.accepted;
        // Depth d (1-based) is attempted when all shallower proposals were
        // accepted, i.e. for d <= min(n + 1, k_round).
        int attempted = std::min(r.accepted + 1, r.proposed);
        for (int d = 1; d <= attempted; ++d) rep.depth_attempts[static_cast<size_t>(d - 1)]++;
        for (int d = 1; d <= std::min(r.accepted, r.proposed); ++d)
            rep.depth_accepts[static_cast<size_t>(d - 1)]++;
    }
    rep.tau = commit_sum / static_cast<double>(rounds.size());
    rep.tau_no_bonus = accept_sum / static_cast<double>(rounds.size());

    rep.alpha_per_depth.resize(static_cast<size_t>(k), 0.0);
    double alpha_sum = 0.0;
    for (int d = 0; d < k; ++d) {
        double a = rep.depth_attempts[static_cast<size_t>(d)] > 0
                       ? static_cast<double>(rep.depth_accepts[static_cast<size_t>(d)]) /
                             static_cast<double>(rep.depth_attempts[static_cast<size_t>(d)])
                       : 0.0;
        rep.alpha_per_depth[static_cast<size_t>(d)] = a;
        alpha_sum += a;
    }
    rep.k_alpha = alpha_sum / static_cast<double>(k);
    return rep;
}

void ModelDrafter::observe(const TargetSession& target) {
    if (!session_) throw ProtocolError("drafter: observe before begin");
    session_->append_committed(target.features(), target.tokens());
}

std::vector<int> ModelDrafter::draft(const TargetSession& target, int k) {
    if (!session_) throw ProtocolError("drafter: draft before begin");
    (void)target;  // committed state was synced via observe()
    return session_->chain(k);
}

namespace {
int argmax(const std::vector<double>& v) {
    int best = 0;
    for (size_t j = 1; j < v.size(); ++j)
        if (v[j] > v[static_cast<size_t>(best)]) best = static_cast<int>(j);
    return best;
}
}  // namespace

SpecSession::SpecSession(const TargetModel& target, const std::vector<int>& prompt)
    : target_(target) {
    if (prompt.empty()) throw InputError("spec: empty prompt");
    Mat logits = target_.extend(prompt);
    committed_ = prompt;
    pending_.assign(logits.row(logits.rows - 1), logits.row(logits.rows - 1) + logits.cols);
}

int SpecSession::argmax_pending() const { return argmax(pending_); }

RoundRecord SpecSession::verify_commit(std::span<const int> proposals) {
    if (proposals.empty()) throw InputError("verify: no proposals");
    const int k = static_cast<int>(proposals.size());
    const int m = static_cast<int>(committed_.size());
    if (m + k + 1 > target_.model().config().max_seq)
        throw ProtocolError("verify: proposals exceed the context budget");

    // One batched forward over every proposed position.
    Mat logits = target_.extend(proposals);

    int n = 0;
    int expected = argmax(pending_);
    while (n < k && proposals[static_cast<size_t>(n)] == expected) {
        const double* row = logits.row(n);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j)
            if (row[j] > row[best]) best = j;
        expected = best;
        n++;
    }
    int bonus = expected;  // the target's own next token after the accepted prefix

    // Keep exactly the accepted slots, then commit the bonus token; its
    // forward pass also refreshes the pending row for the next round.
    target_.rollback(m + n);
    for (int i = 0; i < n; ++i) committed_.push_back(proposals[static_cast<size_t>(i)]);
    int one[1] = {bonus};
    Mat bonus_logits = target_.extend(std::span<const int>(one, 1));
    committed_.push_back(bonus);
    pending_.assign(bonus_logits.row(0), bonus_logits.row(0) + bonus_logits.cols);

    RoundRecord rec{k, n, bonus};
    rounds_.push_back(rec);
    return rec;
}

SpecResult speculative_decode(const TargetModel& target, Drafter& drafter,
                              const std::vector<int>& prompt, int new_tokens, int k) {
    if (k < 1) throw InputError("spec: k must be >= 1");
    if (new_tokens < 1) throw InputError("spec: need at least one new token");
    if (static_cast<int>(prompt.size()) + new_tokens + k + 1 > target.config().max_seq)
        throw ProtocolError("spec: prompt + new_tokens + k exceeds the context budget");

    SpecSession session(target, prompt);
    drafter.begin();
    drafter.observe(session.target_session());

    const size_t want = prompt.size() + static_cast<size_t>(new_tokens);
    while (session.committed().size() < want) {
        std::vector<int> proposals = drafter.draft(session.target_session(), k);
        session.verify_commit(proposals);
        drafter.observe(session.target_session());
    }

    SpecResult out;
    out.tokens = session.committed();
    out.tokens.resize(want);  // the last round may overshoot
    out.rounds = session.rounds();
    return out;
}

AcceptanceReport measure_acceptance(const TargetModel& target, Drafter& drafter,
                                    const std::vector<std::vector<int>>& prompts, int new_tokens,
                                    int k) {
    if (prompts.empty()) throw InputError("measure_acceptance: no prompts");
    std::vector<RoundRecord> all;
    for (const auto& prompt : prompts) {
        SpecResult r = speculative_decode(target, drafter, prompt, new_tokens, k);
        all.insert(all.end(), r.rounds.begin(), r.rounds.end());
    }
    return AcceptanceReport::from_rounds(all, k);
}

double estimate_speedup(double tau, double cost_ratio, int k) {
    if (tau < 1.0) throw InputError("estimate_speedup: tau must be >= 1");
    if (cost_ratio < 0.0 || cost_ratio > 1.0)
        throw InputError("estimate_speedup: cost ratio must lie in [0, 1]");
    if (k < 1) throw InputError("estimate_speedup: k must be >= 1");
    return tau / (1.0 + static_cast<double>(k) * cost_ratio);
}

}  // namespace hyperlab
