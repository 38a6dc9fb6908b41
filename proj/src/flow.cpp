#include "hyperlab/flow.hpp"

#include <algorithm>
#include <cmath>

#include "hyperlab/checkpoint.hpp"
#include "hyperlab/errors.hpp"

namespace hyperlab::flow {

void GuidanceCondition::validate() const {
    if (w_text < 1.0) throw InputError("guidance: w_text must be >= 1");
    if (w_img < 1.0) throw InputError("guidance: w_img must be >= 1");
    if (!(0.0 <= cfg_lo && cfg_lo < cfg_hi && cfg_hi <= 1.0))
        throw InputError("guidance: need 0 <= lo < hi <= 1");
}

CondBatch CondBatch::make(int n, int cls_value) {
    CondBatch c;
    c.cls.assign(static_cast<size_t>(n), cls_value);
    c.src = Mat(n, 2);
    c.has_src.assign(static_cast<size_t>(n), 0);
    c.w_text.assign(static_cast<size_t>(n), 1.0);
    c.w_img.assign(static_cast<size_t>(n), 1.0);
    c.has_wimg.assign(static_cast<size_t>(n), 0);
    return c;
}

CondBatch CondBatch::null_class(int null_index) const {
    CondBatch c = *this;
    std::fill(c.cls.begin(), c.cls.end(), null_index);
    return c;
}

CondBatch CondBatch::null_src() const {
    CondBatch c = *this;
    std::fill(c.has_src.begin(), c.has_src.end(), 0);
    return c;
}

// --- datasets ---------------------------------------------------------------------

nlohmann::json DatasetConfig::to_json() const {
    return {{"kind", kind},           {"modes", modes},
            {"radius", radius},       {"sigma", sigma},
            {"edit_blend", edit_blend}, {"edit_sigma", edit_sigma}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
    DatasetConfig c;
    c.kind = j.at("kind");
    c.modes = j.at("modes");
    c.radius = j.at("radius");
    c.sigma = j.at("sigma");
    c.edit_blend = j.at("edit_blend");
    c.edit_sigma = j.at("edit_sigma");
    return c;
}

Dataset2D::Dataset2D(DatasetConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.kind != "mixture" && cfg_.kind != "moons")
        throw ConfigError("dataset: unknown kind " + cfg_.kind);
    if (cfg_.kind == "mixture" && cfg_.modes < 2) throw ConfigError("dataset: need >= 2 modes");
}

int Dataset2D::num_classes() const { return cfg_.kind == "moons" ? 2 : cfg_.modes; }

std::array<double, 2> Dataset2D::mode_center(int c) const {
    if (c < 0 || c >= num_classes()) throw InputError("dataset: unknown condition");
    if (cfg_.kind == "moons") {
        // Canonical two-moon centroids (as displaced half-circles).
        return c == 0 ? std::array<double, 2>{0.0, 0.5} : std::array<double, 2>{1.0, 0.0};
    }
    double a = 2.0 * 3.141592653589793 * c / cfg_.modes;
    return {cfg_.radius * std::cos(a), cfg_.radius * std::sin(a)};
}

void Dataset2D::sample_generation(Rng& rng, int n, Mat& x0, CondBatch& cond) const {
    x0 = Mat(n, 2);
    cond = CondBatch::make(n, 0);
    for (int i = 0; i < n; ++i) {
        int c = rng.uniform_int(num_classes());
        cond.cls[static_cast<size_t>(i)] = c;
        if (cfg_.kind == "moons") {
            double a = rng.uniform() * 3.141592653589793;
            double cx = c == 0 ? std::cos(a) : 1.0 - std::cos(a);
            double cy = c == 0 ? std::sin(a) : 0.5 - std::sin(a);
            x0.at(i, 0) = cx + rng.normal() * cfg_.sigma * 0.4;
            x0.at(i, 1) = cy + rng.normal() * cfg_.sigma * 0.4;
        } else {
            auto mu = mode_center(c);
            x0.at(i, 0) = mu[0] + rng.normal() * cfg_.sigma;
            x0.at(i, 1) = mu[1] + rng.normal() * cfg_.sigma;
        }
    }
}

void Dataset2D::sample_editing(Rng& rng, int n, Mat& x0, CondBatch& cond) const {
    if (cfg_.kind != "mixture") throw ConfigError("dataset: editing pairs need the mixture kind");
    x0 = Mat(n, 2);
    cond = CondBatch::make(n, 0);
    for (int i = 0; i < n; ++i) {
        int s = rng.uniform_int(num_classes());
        int c = rng.uniform_int(num_classes());
        auto ms = mode_center(s);
        auto mc = mode_center(c);
        double px = ms[0] + rng.normal() * cfg_.sigma;
        double py = ms[1] + rng.normal() * cfg_.sigma;
        cond.cls[static_cast<size_t>(i)] = c;
        cond.has_src[static_cast<size_t>(i)] = 1;
        cond.has_wimg[static_cast<size_t>(i)] = 1;
        cond.src.at(i, 0) = px;
        cond.src.at(i, 1) = py;
        x0.at(i, 0) = cfg_.edit_blend * px + (1.0 - cfg_.edit_blend) * mc[0] +
                      rng.normal() * cfg_.edit_sigma;
        x0.at(i, 1) = cfg_.edit_blend * py + (1.0 - cfg_.edit_blend) * mc[1] +
                      rng.normal() * cfg_.edit_sigma;
    }
}

Mat Dataset2D::held_out(uint64_t seed, int n) const {
    Rng rng = Rng(seed).stream("held-out");
    Mat x;
    CondBatch cond;
    sample_generation(rng, n, x, cond);
    return x;
}

// --- model ------------------------------------------------------------------------

nlohmann::json FlowModelConfig::to_json() const {
    return {{"hidden", hidden},
            {"trunk_layers", trunk_layers},
            {"time_dim", time_dim},
            {"cond_dim", cond_dim},
            {"src_dim", src_dim},
            {"n_freq", n_freq},
            {"num_classes", num_classes},
            {"scale_conditioned", scale_conditioned}};
}

FlowModelConfig FlowModelConfig::from_json(const nlohmann::json& j) {
    FlowModelConfig c;
    c.hidden = j.at("hidden");
    c.trunk_layers = j.at("trunk_layers");
    c.time_dim = j.at("time_dim");
    c.cond_dim = j.at("cond_dim");
    c.src_dim = j.at("src_dim");
    c.n_freq = j.at("n_freq");
    c.num_classes = j.at("num_classes");
    c.scale_conditioned = j.at("scale_conditioned");
    return c;
}

FlowModel::FlowModel(FlowModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg_.hidden <= 0 || cfg_.trunk_layers < 1) throw ConfigError("flow: bad trunk shape");
    Rng rng = Rng(init_seed).stream("flow-init");
    time_enc_ = nn::ScalarEncoder::create(params_, "time_enc", cfg_.n_freq, cfg_.time_dim,
                                          cfg_.time_dim, rng, false);
    // Scale encoders share the timestep encoder architecture; their last
    // layers start at zero so a fresh student equals its teacher exactly.
    wtext_enc_ = nn::ScalarEncoder::create(params_, "wtext_enc", cfg_.n_freq, cfg_.time_dim,
                                           cfg_.time_dim, rng, /*zero_out=*/true);
    wimg_enc_ = nn::ScalarEncoder::create(params_, "wimg_enc", cfg_.n_freq, cfg_.time_dim,
                                          cfg_.time_dim, rng, /*zero_out=*/true);
    cls_table_ = &params_.add("cls_table", ad::randn(rng, cfg_.num_classes + 1, cfg_.cond_dim, 0.3));
    src_lin_ = nn::Linear::create(params_, "src_lin", 2, cfg_.src_dim, rng, 0.5, true);
    src_null_ = &params_.add("src_null", ad::randn(rng, 1, cfg_.src_dim, 0.3));

    int in_dim = 2 + cfg_.time_dim + cfg_.cond_dim + cfg_.src_dim;
    for (int l = 0; l < cfg_.trunk_layers; ++l) {
        int fan_in = l == 0 ? in_dim : cfg_.hidden;
        trunk_.push_back(nn::Linear::create(params_, "trunk" + std::to_string(l), fan_in,
                                            cfg_.hidden, rng,
                                            1.0 / std::sqrt(static_cast<double>(fan_in)), true));
    }
    out_ = nn::Linear::create(params_, "out", cfg_.hidden, 2, rng,
                              0.5 / std::sqrt(static_cast<double>(cfg_.hidden)), true);
}

int FlowModel::features_graph(Graph& g, int x, const std::vector<double>& ts,
                              const CondBatch& cond, std::vector<int>* taps) const {
    ad::Tape& t = g.tape();
    const int B = t.val(x).rows;
    if (static_cast<int>(ts.size()) != B || cond.size() != B)
        throw InputError("flow: batch size mismatch");
    for (int c : cond.cls)
        if (c < 0 || c > cfg_.num_classes) throw InputError("flow: class index out of range");

    int time_feat = time_enc_.forward(g, ts);
    if (cfg_.scale_conditioned) {
        time_feat = t.add(time_feat, wtext_enc_.forward(g, cond.w_text));
        // Rows without an image scale keep the fixed zero embedding.
        Mat mask(B, 1);
        for (int i = 0; i < B; ++i) mask.at(i, 0) = cond.has_wimg[static_cast<size_t>(i)] ? 1.0 : 0.0;
        int wi = wimg_enc_.forward(g, cond.w_img);
        time_feat = t.add(time_feat, t.mul_colvec(wi, t.constant(mask)));
    }

    int cls = t.gather_rows(g.bind(*cls_table_), cond.cls);

    Mat keep(B, 1), drop(B, 1);
    for (int i = 0; i < B; ++i) {
        keep.at(i, 0) = cond.has_src[static_cast<size_t>(i)] ? 1.0 : 0.0;
        drop.at(i, 0) = 1.0 - keep.at(i, 0);
    }
    int src_feat = src_lin_.forward(g, t.constant(cond.src));
    src_feat = t.add(t.mul_colvec(src_feat, t.constant(keep)),
                     t.matmul(t.constant(drop), g.bind(*src_null_)));

    std::array<int, 4> parts = {x, time_feat, cls, src_feat};
    int h = t.concat_cols(std::span<const int>(parts.data(), parts.size()));
    for (const auto& lin : trunk_) {
        h = t.silu(lin.forward(g, h));
        if (taps) taps->push_back(h);
    }
    return h;
}

int FlowModel::velocity_graph(Graph& g, int x, const std::vector<double>& ts,
                              const CondBatch& cond) const {
    return out_.forward(g, features_graph(g, x, ts, cond));
}

Mat FlowModel::velocity(const Mat& x, const std::vector<double>& ts, const CondBatch& cond) const {
    Graph g(false);
    int node = velocity_graph(g, g.tape().constant(x), ts, cond);
    return g.tape().val(node);
}

Mat FlowModel::velocity(const Mat& x, double t, const CondBatch& cond) const {
    return velocity(x, std::vector<double>(static_cast<size_t>(x.rows), t), cond);
}

void FlowModel::copy_common_params(const FlowModel& src) {
    for (const ad::Param* p : src.params_.all())
        if (params_.contains(p->name) && params_.at(p->name).value.size() == p->value.size())
            params_.at(p->name).value = p->value;
}

// --- ops ----------------------------------------------------------------------------

Mat velocity_target(const Mat& x0, const Mat& xT) {
    if (x0.rows != xT.rows || x0.cols != xT.cols) throw InputError("velocity_target: shape mismatch");
    if (!x0.finite() || !xT.finite()) throw InputError("velocity_target: non-finite input");
    Mat v = xT;
    for (size_t i = 0; i < v.v.size(); ++i) v.v[i] -= x0.v[i];
    return v;
}

double shift_time(double t, double s) {
    if (s < 1.0) throw ConfigError("shift_time: shift must be >= 1");
    if (t < 0.0 || t > 1.0) throw InputError("shift_time: t must lie in [0, 1]");
    return s * t / (1.0 + (s - 1.0) * t);
}

Mat cfg_velocity(const FlowModel& model, const Mat& x, double t, const CondBatch& cond,
                 const GuidanceCondition& gc, long* evals) {
    gc.validate();
    auto eval = [&](const CondBatch& c) {
        if (evals) (*evals)++;
        return model.velocity(x, t, c);
    };
    auto axpy = [](Mat& acc, double a, const Mat& u, const Mat& w) {
        for (size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += a * (u.v[i] - w.v[i]);
    };

    const int null_cls = model.null_class();
    if (!gc.editing()) {
        // Generation: v = v(null) + w_text (v(c) - v(null)); exact at w = 1.
        if (gc.w_text == 1.0) return eval(cond);
        Mat vc = eval(cond);
        Mat vn = eval(cond.null_class(null_cls));
        Mat out = vn;
        axpy(out, gc.w_text, vc, vn);
        return out;
    }

    for (char h : cond.has_src)
        if (!h) throw InputError("cfg_velocity: editing mode requires a source condition");

    // Dual guidance only inside the CFG interval; outside it the fully
    // conditional branch applies.
    bool inside = t >= gc.cfg_lo && t <= gc.cfg_hi;
    if (!inside || (gc.w_text == 1.0 && gc.w_img == 1.0)) return eval(cond);

    Mat v_full = eval(cond);                       // v(c, src)
    Mat v_src = eval(cond.null_class(null_cls));   // v(null, src)
    Mat out;
    if (gc.w_img == 1.0) {
        out = v_src;
    } else {
        Mat v_none = eval(cond.null_class(null_cls).null_src());  // v(null, null)
        out = v_none;
        axpy(out, gc.w_img, v_src, v_none);
    }
    axpy(out, gc.w_text, v_full, v_src);
    return out;
}

nlohmann::json SamplerConfig::to_json() const {
    return {{"nfe", nfe}, {"shift", shift}, {"method", method}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
    SamplerConfig c;
    c.nfe = j.at("nfe");
    c.shift = j.at("shift");
    c.method = j.at("method");
    return c;
}

std::string SamplerConfig::rule_hash() const {
    std::string desc = method + "|shift-warped-uniform|" + std::to_string(shift);
    return hex64(fnv1a64(desc));
}

std::vector<double> SamplerConfig::time_grid() const {
    if (nfe < 1) throw ConfigError("sampler: nfe must be >= 1");
    std::vector<double> grid(static_cast<size_t>(nfe) + 1);
    for (int i = 0; i <= nfe; ++i)
        grid[static_cast<size_t>(i)] =
            shift_time(1.0 - static_cast<double>(i) / nfe, shift);
    grid.front() = 1.0;
    grid.back() = 0.0;
    return grid;
}

FlowPoint FlowTrajectory::point(int step, int row) const {
    FlowPoint p;
    p.t = times[static_cast<size_t>(step)];
    p.x = {states[static_cast<size_t>(step)].at(row, 0), states[static_cast<size_t>(step)].at(row, 1)};
    return p;
}

FlowTrajectory euler_sample(const VelocityFn& v, const Mat& x_T, const SamplerConfig& sc,
                            long* eval_counter) {
    if (sc.method != "euler") throw ConfigError("sampler: only the euler method exists");
    FlowTrajectory traj;
    traj.times = sc.time_grid();
    traj.states.reserve(traj.times.size());
    traj.states.push_back(x_T);
    long evals = 0;
    Mat x = x_T;
    for (size_t i = 0; i + 1 < traj.times.size(); ++i) {
        double t = traj.times[i];
        double dt = traj.times[i] - traj.times[i + 1];
        Mat vel = v(x, t);
        evals++;
        for (size_t j = 0; j < x.v.size(); ++j) {
            x.v[j] -= dt * vel.v[j];
            if (!std::isfinite(x.v[j]))
                throw NumericError("euler_sample: non-finite state", static_cast<long>(i));
        }
        traj.states.push_back(x);
    }
    traj.model_evals = eval_counter ? *eval_counter : evals;
    return traj;
}

VelocityFn teacher_cfg_source(const FlowModel& teacher, const CondBatch& cond,
                              const GuidanceCondition& gc, long* evals) {
    return [&teacher, cond, gc, evals](const Mat& x, double t) {
        return cfg_velocity(teacher, x, t, cond, gc, evals);
    };
}

VelocityFn student_source(const FlowModel& student, const CondBatch& cond, long* evals) {
    return [&student, cond, evals](const Mat& x, double t) {
        if (evals) (*evals)++;
        return student.velocity(x, t, cond);
    };
}

// --- teacher training -----------------------------------------------------------------

FlowTrainResult train_teacher(FlowModel& model, const Dataset2D& data, const FlowTrainConfig& tc,
                              uint64_t seed) {
    Rng rng = Rng(seed).stream("teacher-train");
    ad::Adam opt({.lr = tc.lr});
    FlowTrainResult result;
    result.loss_history.reserve(static_cast<size_t>(tc.steps));

    const bool mixture = data.config().kind == "mixture";
    for (int step = 0; step < tc.steps; ++step) {
        Graph g(true);
        ad::Tape& t = g.tape();
        int total = -1;
        int parts = 0;
        for (int mode = 0; mode < 2; ++mode) {
            bool editing = mode == 1;
            if (editing && !mixture) continue;
            int n = editing ? static_cast<int>(tc.batch * tc.edit_fraction)
                            : tc.batch - static_cast<int>(tc.batch * (mixture ? tc.edit_fraction : 0.0));
            if (n <= 0) continue;

            Mat x0;
            CondBatch cond;
            if (editing) data.sample_editing(rng, n, x0, cond);
            else data.sample_generation(rng, n, x0, cond);

            // Null-condition dropout so CFG branches exist at sampling time.
            for (int i = 0; i < n; ++i) {
                if (rng.uniform() < tc.cond_dropout) cond.cls[static_cast<size_t>(i)] = model.null_class();
                if (editing && rng.uniform() < tc.cond_dropout) cond.has_src[static_cast<size_t>(i)] = 0;
            }

            Mat xT(n, 2);
            for (auto& v : xT.v) v = rng.normal();
            std::vector<double> ts(static_cast<size_t>(n));
            Mat xt(n, 2);
            for (int i = 0; i < n; ++i) {
                ts[static_cast<size_t>(i)] = rng.uniform();
                for (int d = 0; d < 2; ++d)
                    xt.at(i, d) = (1.0 - ts[static_cast<size_t>(i)]) * x0.at(i, d) +
                                  ts[static_cast<size_t>(i)] * xT.at(i, d);
            }
            Mat neg_target = velocity_target(xT, x0);  // x0 - xT = -(x_T - x_0)
            int pred = model.velocity_graph(g, t.constant(xt), ts, cond);
            int loss = t.scale(t.sum_sq(t.add_const(pred, neg_target)), 1.0 / (2.0 * n));
            total = parts == 0 ? loss : t.add(total, loss);
            parts++;
        }
        double loss_val = t.val(total).v[0];
        if (!std::isfinite(loss_val)) throw NumericError("train_teacher: non-finite loss", step);
        g.backward(total);
        opt.step(model.params());
        result.loss_history.push_back(loss_val);
    }
    result.final_loss = result.loss_history.empty() ? 0.0 : result.loss_history.back();
    return result;
}

// --- persistence ------------------------------------------------------------------------

void save_flow(const std::string& path, const FlowModel& model, const std::string& stage,
               const DatasetConfig& data, const SamplerConfig& sampler, uint64_t seed,
               const std::string& parent_hash, nlohmann::json metrics) {
    nlohmann::json m;
    m["stage"] = stage;
    m["config"] = model.config().to_json();
    m["dataset"] = data.to_json();
    m["sampler"] = sampler.to_json();
    m["sampler_rule"] = sampler.rule_hash();
    m["seed"] = seed;
    m["parent_hash"] = parent_hash;
    if (!metrics.is_null()) m["metrics"] = metrics;
    std::vector<const ad::Param*> tensors;
    for (const ad::Param* p : model.params().all()) tensors.push_back(p);
    ckpt::save(path, std::move(m), tensors);
}

LoadedFlow load_flow(const std::string& path, const std::string& expected_stage) {
    ckpt::Loaded file = ckpt::load(path);
    if (!expected_stage.empty() && file.stage() != expected_stage)
        throw LineageError("expected stage '" + expected_stage + "', got '" + file.stage() +
                           "' from " + path);
    LoadedFlow out{FlowModel(FlowModelConfig::from_json(file.manifest.at("config")), 0),
                   file.manifest, DatasetConfig::from_json(file.manifest.at("dataset")),
                   SamplerConfig::from_json(file.manifest.at("sampler"))};
    ckpt::load_into(file, out.model.params());
    return out;
}

}  // namespace hyperlab::flow
