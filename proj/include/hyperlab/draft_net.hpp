#pragma once

#include <span>
#include <string>
#include <vector>

#include "hyperlab/target_lm.hpp"

namespace hyperlab {

// Draft architecture: learnable meta queries cross-attend over every target
// layer's features per token, a zero-initialized aggregation decoder layer
// with EAGLE-style low/mid/high residuals condenses them, and two draft
// decoder layers (copied from the target's last layers, sharing its frozen
// LM head) run the iterative chain decode.
struct DraftConfig {
    int num_draft_layers = 2;  // N
    int num_meta_queries = 3;  // Q; direct-residual wiring requires 3
    double lambda_ce = 0.1;
    bool zero_init = true;   // ablation flag: no_zero_init
    bool ce_loss = true;     // ablation flag: no_ce_loss
    int train_passes = 3;    // feature-recycling depth during training

    double effective_lambda() const { return ce_loss ? lambda_ce : 0.0; }
    nlohmann::json to_json() const;
    static DraftConfig from_json(const nlohmann::json& j);
};

class DraftModel {
public:
    DraftModel(const TargetModel& target, DraftConfig cfg, uint64_t init_seed);

    const DraftConfig& config() const { return cfg_; }
    const TargetConfig& target_config() const { return tcfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    // --- tape paths (training, oracles) ---
    // F_c [S x Q*D]: flattened cross-attention output + concat(low,mid,high).
    int aggregate_features_graph(ad::Graph& g, const LayerFeatureStack& stack) const;
    // F_in [S x D] = Dec(fc1(F_c)) with causal Dec.
    int intermediate_forward_graph(ad::Graph& g, int f_c) const;
    // Draft decoder stack over per-slot inputs fc2(concat(g_row, emb)) + pos.
    // `g_rows` is the feature input per slot (node id); returns the logits
    // node and, when requested, the pre-norm hidden rows (for recycling).
    int decode_stack_graph(ad::Graph& g, int g_rows, std::span<const int> tokens,
                           std::span<const int> tags, int start_pos,
                           int* hidden_node = nullptr) const;
    // Tail of the decode stack: draft blocks + frozen norm/head over given
    // per-slot inputs; the piece the target's pretrained layers initialize.
    int decoder_tail_graph(ad::Graph& g, int x_rows) const;

    // --- plain eval paths ---
    ad::Mat aggregate_features(const LayerFeatureStack& stack) const;
    ad::Mat intermediate_forward(const ad::Mat& f_c) const;

    const ad::Param& meta_queries() const { return *fq_; }
    std::vector<ad::Param*> zero_init_targets() const;  // the five zero-init projections

    void save(const std::string& path, uint64_t seed, const std::string& parent_hash,
              nlohmann::json metrics = {}) const;
    static DraftModel load(const std::string& path, const TargetModel& target);

private:
    friend class DraftSession;
    friend struct DraftTrainer;

    DraftConfig cfg_;
    TargetConfig tcfg_;
    ad::ParamStore params_;

    ad::Param* fq_ = nullptr;           // [Q x D]
    nn::Attention ca_;                  // queries f_q, keys/values f_i
    nn::DecoderBlock agg_dec_;          // aggregation decoder layer (independent of draft layers)
    nn::Linear fc1_;                    // Q*D -> D
    nn::Linear fc2_;                    // 2D -> D
    std::vector<nn::DecoderBlock> draft_blocks_;
    // Frozen copies of target components (embedding shared, head shared).
    std::vector<ad::Param*> emb_;
    ad::Param* pos_ = nullptr;
    nn::RmsNorm final_norm_;
    nn::Linear head_;
};

// Incremental decode state for one sequence: Dec cache over committed slots,
// draft-layer caches over committed + in-flight drafted slots.
class DraftSession {
public:
    explicit DraftSession(const DraftModel& model);

    // Feed newly committed slots [from, stack.seq) using true target features.
    void append_committed(const LayerFeatureStack& stack, std::span<const int> tokens,
                          std::span<const int> tags = {});
    // Greedy chain draft of k proposals; leaves drafted slots in the caches
    // until the next append/discard. Requires at least one committed slot.
    std::vector<int> chain(int k);
    // One chain step: extend with `token` (feature = previous slot's hidden),
    // returning the new slot's logits; exposed for the stepwise oracle.
    std::vector<double> chain_step(int token);
    // Logits of the last slot (committed or drafted), via frozen norm + head.
    std::vector<double> last_logits() const;
    void discard_drafted();

    int committed() const { return committed_; }
    int total_slots() const { return static_cast<int>(hidden_.size()); }

private:
    void push_slot(const std::vector<double>& g_row, int token, int tag);

    const DraftModel& model_;
    int committed_ = 0;
    // Per draft layer KV caches, [slot][dim]; hidden_ keeps each slot's output.
    std::vector<std::vector<double>> k_cache_, v_cache_;
    std::vector<std::vector<double>> hidden_;
    // Aggregation decoder incremental state (committed slots only).
    std::vector<double> agg_k_, agg_v_;
};

// Loss of the paper: forward KL(p_target || p_draft) plus lambda * CE against
// the target argmax (ties -> lowest index). Probabilities are validated and
// floored at 1e-12 before logs; `floored` reports whether the floor fired.
double draft_loss(const std::vector<double>& p_target, const std::vector<double>& p_draft,
                  double lambda, bool* floored = nullptr);

struct DraftTrainConfig {
    int steps = 1200;
    int batch = 2;
    double lr = 1e-3;
    double grad_clip = 1.0;
};

struct SelfAnswerData {
    std::vector<std::vector<int>> sequences;
    std::vector<std::vector<int>> tags;  // empty, or parallel to sequences
};

struct DraftTrainResult {
    double final_loss = 0.0;
    std::vector<double> loss_history;
    bool prob_floor_hit = false;
};

// Trains only the draft parameters; the target stays frozen (and untouched).
// Deterministic per seed; NaN loss aborts with the failing step index.
DraftTrainResult train_draft(DraftModel& draft, const TargetModel& target,
                             const SelfAnswerData& data, const DraftTrainConfig& tc, uint64_t seed);

}  // namespace hyperlab
