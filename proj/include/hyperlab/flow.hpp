#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperlab/ad.hpp"
#include "hyperlab/nn.hpp"

namespace hyperlab::flow {

using ad::Graph;
using ad::Mat;

// Time convention: t = 1 is pure noise (x_T), t = 0 is data (x_0);
// x_t = (1-t) x_0 + t x_T, and the regression target is v = x_T - x_0.

inline constexpr double kCfgLo = 0.4;
inline constexpr double kCfgHi = 1.0;

struct FlowPoint {
    std::array<double, 2> x{0.0, 0.0};
    double t = 0.0;
};

struct GuidanceCondition {
    int cls = 0;  // mode index; -1 = unconditional
    double w_text = 1.0;
    double w_img = 1.0;
    bool has_src = false;
    std::array<double, 2> src{0.0, 0.0};
    double cfg_lo = kCfgLo, cfg_hi = kCfgHi;

    void validate() const;
    bool editing() const { return has_src; }
};

// Row-wise conditioning of a batch. Null class = index `num_classes` in the
// embedding table; rows without a source point use a learned null vector and
// rows without an image scale use the fixed zero embedding.
struct CondBatch {
    std::vector<int> cls;
    Mat src;                    // [B x 2]
    std::vector<char> has_src;  // 0/1 per row
    std::vector<double> w_text;
    std::vector<double> w_img;
    std::vector<char> has_wimg;

    int size() const { return static_cast<int>(cls.size()); }
    static CondBatch make(int n, int cls_value);
    CondBatch null_class(int null_index) const;
    CondBatch null_src() const;
};

// --- synthetic datasets -------------------------------------------------------

struct DatasetConfig {
    std::string kind = "mixture";  // mixture | moons
    int modes = 8;
    double radius = 2.0;
    double sigma = 0.25;       // per-mode scale (also the reward bandwidth)
    double edit_blend = 0.5;   // edited point = blend*src + (1-blend)*center_c
    double edit_sigma = 0.15;

    nlohmann::json to_json() const;
    static DatasetConfig from_json(const nlohmann::json& j);
};

class Dataset2D {
public:
    explicit Dataset2D(DatasetConfig cfg);

    const DatasetConfig& config() const { return cfg_; }
    int num_classes() const;
    std::array<double, 2> mode_center(int c) const;

    // Generation rows: x0 ~ mode c, conditions carry c.
    void sample_generation(Rng& rng, int n, Mat& x0, CondBatch& cond) const;
    // Editing rows: a source point from a random mode, target mode c,
    // x0 = blend of the two plus noise; conditions carry (c, src).
    void sample_editing(Rng& rng, int n, Mat& x0, CondBatch& cond) const;
    // Marginal draws for held-out metric baselines.
    Mat held_out(uint64_t seed, int n) const;

private:
    DatasetConfig cfg_;
};

// --- velocity model -----------------------------------------------------------

struct FlowModelConfig {
    int hidden = 96;
    int trunk_layers = 3;
    int time_dim = 32;
    int cond_dim = 16;
    int src_dim = 16;
    int n_freq = 8;
    int num_classes = 8;
    bool scale_conditioned = false;  // stage-1+ students take (w_text, w_img)

    nlohmann::json to_json() const;
    static FlowModelConfig from_json(const nlohmann::json& j);
};

class FlowModel {
public:
    FlowModel(FlowModelConfig cfg, uint64_t init_seed);

    const FlowModelConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }
    int null_class() const { return cfg_.num_classes; }

    // Trunk activations; `taps` (optional) receives one node per trunk layer,
    // which is what the multi-head discriminator reads.
    int features_graph(Graph& g, int x, const std::vector<double>& ts, const CondBatch& cond,
                       std::vector<int>* taps = nullptr) const;
    int velocity_graph(Graph& g, int x, const std::vector<double>& ts, const CondBatch& cond) const;
    Mat velocity(const Mat& x, const std::vector<double>& ts, const CondBatch& cond) const;
    Mat velocity(const Mat& x, double t, const CondBatch& cond) const;

    // Copies every identically-named/shaped param from src (teacher -> student
    // init; the student's extra scale encoders keep their zero-init tails).
    void copy_common_params(const FlowModel& src);

private:
    FlowModelConfig cfg_;
    ad::ParamStore params_;
    nn::ScalarEncoder time_enc_, wtext_enc_, wimg_enc_;
    ad::Param* cls_table_ = nullptr;  // [num_classes+1 x cond_dim]
    nn::Linear src_lin_;
    ad::Param* src_null_ = nullptr;  // [1 x src_dim]
    std::vector<nn::Linear> trunk_;
    nn::Linear out_;
};

// --- ops ------------------------------------------------------------------------

Mat velocity_target(const Mat& x0, const Mat& xT);
double shift_time(double t, double s);

// Classifier-free guidance combination for the raw teacher. Generation mode
// uses two branches; editing mode uses the dual combination, enabled only for
// t inside [cfg_lo, cfg_hi] (outside, the fully conditional branch is used).
// Scale-1 terms short-circuit so the identity holds bit-exactly.
// `evals` (optional) accumulates the number of model forward passes.
Mat cfg_velocity(const FlowModel& model, const Mat& x, double t, const CondBatch& cond,
                 const GuidanceCondition& gc, long* evals = nullptr);

struct SamplerConfig {
    int nfe = 50;
    double shift = 3.0;
    std::string method = "euler";

    nlohmann::json to_json() const;
    static SamplerConfig from_json(const nlohmann::json& j);
    // Identity of the sampling RULE (method + shift + grid law), nfe excluded:
    // distilled students must keep the teacher's rule.
    std::string rule_hash() const;
    std::vector<double> time_grid() const;  // nfe+1 shifted times, 1 .. 0
};

struct FlowTrajectory {
    std::vector<Mat> states;     // nfe+1 entries of [B x 2]
    std::vector<double> times;   // strictly decreasing, 1 .. 0
    long model_evals = 0;        // underlying network forward passes
    int nfe() const { return static_cast<int>(times.size()) - 1; }
    FlowPoint point(int step, int row = 0) const;
};

using VelocityFn = std::function<Mat(const Mat& x, double t)>;

// Plain Euler integration from x_T (t=1) to t=0 on the shifted grid.
FlowTrajectory euler_sample(const VelocityFn& v, const Mat& x_T, const SamplerConfig& sc,
                            long* eval_counter = nullptr);

// Convenience sources.
VelocityFn teacher_cfg_source(const FlowModel& teacher, const CondBatch& cond,
                              const GuidanceCondition& gc, long* evals);
VelocityFn student_source(const FlowModel& student, const CondBatch& cond, long* evals);

// --- teacher training -----------------------------------------------------------

struct FlowTrainConfig {
    int steps = 4000;
    int batch = 96;
    double lr = 1.5e-3;
    double cond_dropout = 0.1;
    double edit_fraction = 0.35;  // fraction of each step drawn as editing rows
};

struct FlowTrainResult {
    double final_loss = 0.0;
    std::vector<double> loss_history;
};

FlowTrainResult train_teacher(FlowModel& model, const Dataset2D& data, const FlowTrainConfig& tc,
                              uint64_t seed);

// --- persistence ------------------------------------------------------------------

void save_flow(const std::string& path, const FlowModel& model, const std::string& stage,
               const DatasetConfig& data, const SamplerConfig& sampler, uint64_t seed,
               const std::string& parent_hash, nlohmann::json metrics = {});

struct LoadedFlow {
    FlowModel model;
    nlohmann::json manifest;
    DatasetConfig dataset;
    SamplerConfig sampler;
};

LoadedFlow load_flow(const std::string& path, const std::string& expected_stage = "");

}  // namespace hyperlab::flow
