#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperlab/ad.hpp"
#include "hyperlab/corpus.hpp"
#include "hyperlab/nn.hpp"

namespace hyperlab {

struct TargetConfig {
    int num_layers = 6;  // L
    int dim = 64;        // D
    int heads = 4;
    int vocab = 256;     // V
    int max_seq = 128;   // longest supported sequence
    int mlp_hidden = 0;  // 0 -> 4*dim
    // Segment-tagged embedding tables; >1 emulates mixed-modality sequences.
    int num_segments = 1;
    // Residual feature taps; -1 -> {1, L/2, L-2}.
    int feat_low = -1, feat_mid = -1, feat_high = -1;

    int mlp() const { return mlp_hidden > 0 ? mlp_hidden : 4 * dim; }
    // Default taps are {1, L/2, L-2}; when those collide (L < 6) the spread
    // falls back to {0, L/2, L-1}.
    int low() const;
    int mid() const;
    int high() const;
    void validate() const;

    nlohmann::json to_json() const;
    static TargetConfig from_json(const nlohmann::json& j);
};

// Per-token hidden features across all target layers (row = layer output).
struct LayerFeatureStack {
    int seq = 0, layers = 0, dim = 0;
    int low = 0, mid = 0, high = 0;
    std::vector<double> data;  // [seq][layer][dim]

    LayerFeatureStack() = default;
    LayerFeatureStack(int s, int l, int d, int lo, int mi, int hi)
        : seq(s), layers(l), dim(d), low(lo), mid(mi), high(hi),
          data(static_cast<size_t>(s) * l * d, 0.0) {}

    double* row(int s, int l) { return data.data() + (static_cast<size_t>(s) * layers + l) * dim; }
    const double* row(int s, int l) const {
        return data.data() + (static_cast<size_t>(s) * layers + l) * dim;
    }
    // All-layer features of one token as an [L x D] matrix (cross-attn keys).
    ad::Mat token_features(int s) const;
    // concat(low, mid, high) for one token, the EAGLE-style residual.
    std::vector<double> residual_concat(int s) const;
    bool finite() const;
};

class TargetModel {
public:
    TargetModel(TargetConfig cfg, uint64_t init_seed);

    const TargetConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    // Plain (gradient-free) full forward. Tags select per-token embedding
    // tables; empty means segment 0 everywhere. Features are always computed
    // the same way; `features` only controls whether they are returned.
    ad::Mat forward(std::span<const int> tokens, LayerFeatureStack* features = nullptr,
                    std::span<const int> tags = {}) const;

    // Tape forward for training; returns the logits node.
    int forward_graph(ad::Graph& g, std::span<const int> tokens, std::span<const int> tags = {}) const;

    // Teacher-forced mean per-token perplexity.
    double perplexity(const std::vector<std::vector<int>>& sequences) const;

    // Components reused by the draft model.
    const nn::DecoderBlock& block(int i) const { return blocks_[static_cast<size_t>(i)]; }
    const ad::Param& token_table(int segment = 0) const;
    const ad::Param& pos_table() const { return *pos_; }
    const ad::Param& final_norm_gain() const { return *final_norm_.gain; }
    const ad::Param& head_weight() const { return *head_.W; }

    void save(const std::string& path, uint64_t seed, nlohmann::json metrics = {}) const;
    static TargetModel load(const std::string& path);

private:
    friend class TargetSession;
    void validate_tokens(std::span<const int> tokens, std::span<const int> tags) const;

    TargetConfig cfg_;
    ad::ParamStore params_;
    std::vector<ad::Param*> emb_;  // one table per segment
    ad::Param* pos_ = nullptr;
    std::vector<nn::DecoderBlock> blocks_;
    nn::RmsNorm final_norm_;
    nn::Linear head_;
};

// KV-cached incremental evaluator; one per decoding worker. extend() appends
// tokens and returns their logits rows; rollback() discards rejected slots.
class TargetSession {
public:
    explicit TargetSession(const TargetModel& model);

    // Returns [n x V] logits for the n appended slots.
    ad::Mat extend(std::span<const int> tokens, std::span<const int> tags = {});
    void rollback(int new_length);
    void reset();

    int length() const { return static_cast<int>(tokens_.size()); }
    const std::vector<int>& tokens() const { return tokens_; }
    const LayerFeatureStack& features() const { return features_; }
    const TargetModel& model() const { return model_; }

private:
    const TargetModel& model_;
    std::vector<int> tokens_;
    // Per layer: cached keys/values laid out [slot][dim], plus the
    // post-attention inputs needed nowhere (features keep layer outputs).
    std::vector<std::vector<double>> k_cache_, v_cache_;
    LayerFeatureStack features_;
};

// --- training & data generation -------------------------------------------

struct TargetTrainConfig {
    int steps = 1500;
    int batch = 4;
    double lr = 1.5e-3;
    double grad_clip = 1.0;
    double holdout_fraction = 0.1;  // held out for the perplexity gate
};

struct TargetTrainResult {
    double final_loss = 0.0;
    double holdout_perplexity = 0.0;
    double unigram_perplexity = 0.0;
};

// Deterministic per seed. Throws NumericError on non-finite loss (with the
// step index) and when the trained model fails to beat the unigram baseline.
TargetTrainResult train_target(TargetModel& model, const SyntheticCorpus& corpus,
                               const TargetTrainConfig& tc, uint64_t seed);

enum class DecodeMode { Greedy, Sampled };

// Greedy (or seeded-sampled) continuation of each prompt by `max_len` tokens.
std::vector<std::vector<int>> generate_self_answers(const TargetModel& model,
                                                    const std::vector<std::vector<int>>& prompts,
                                                    int max_len, uint64_t seed = 0,
                                                    DecodeMode mode = DecodeMode::Greedy);

// Pure-target greedy decode used as the speculative-decoding reference.
std::vector<int> greedy_decode(const TargetModel& model, const std::vector<int>& prompt,
                               int new_tokens);

}  // namespace hyperlab
