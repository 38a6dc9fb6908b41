#include "doctest.h"

#include <cmath>

#include "hyperlab/errors.hpp"
#include "hyperlab/eval_metrics.hpp"
#include "hyperlab/flow.hpp"

using namespace hyperlab;
using namespace hyperlab::flow;
using ad::Graph;
using ad::Mat;

namespace {

FlowModelConfig tiny_flow_config() {
    FlowModelConfig c;
    c.hidden = 24;
    c.trunk_layers = 2;
    c.time_dim = 12;
    c.cond_dim = 8;
    c.src_dim = 8;
    c.n_freq = 4;
    c.num_classes = 8;
    return c;
}

Mat noise(uint64_t seed, int n) {
    Rng rng(seed);
    Mat x(n, 2);
    for (auto& v : x.v) v = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("velocity target algebra") {
    Mat x0(1, 2), xT(1, 2);
    CHECK(velocity_target(x0, xT).v == std::vector<double>{0.0, 0.0});

    xT.at(0, 0) = 1.0;
    xT.at(0, 1) = 1.0;
    Mat v = velocity_target(x0, xT);
    CHECK(v.at(0, 0) == 1.0);
    CHECK(v.at(0, 1) == 1.0);

    // Reconstruction identity x0 = x_t - t*v for random t.
    Rng rng(61);
    for (int trial = 0; trial < 100; ++trial) {
        double t = rng.uniform();
        Mat a(1, 2), b(1, 2);
        for (auto& z : a.v) z = rng.normal();
        for (auto& z : b.v) z = rng.normal();
        Mat vt = velocity_target(a, b);
        for (int d = 0; d < 2; ++d) {
            double xt = (1.0 - t) * a.at(0, d) + t * b.at(0, d);
            CHECK(xt - t * vt.at(0, d) == doctest::Approx(a.at(0, d)).epsilon(1e-12));
        }
    }
}

TEST_CASE("shift_time formula, fixed points, and validation") {
    CHECK(shift_time(0.37, 1.0) == 0.37);  // s = 1 is the identity, bit-exact
    CHECK(shift_time(0.0, 3.0) == 0.0);
    CHECK(shift_time(1.0, 3.0) == 1.0);
    CHECK(shift_time(0.5, 3.0) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK_THROWS_AS(shift_time(0.5, 0.9), ConfigError);
    CHECK_THROWS_AS(shift_time(1.5, 2.0), InputError);

    // Monotone bijection on [0, 1].
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
        double t = i / 100.0;
        double s = shift_time(t, 3.0);
        CHECK(s > prev);
        CHECK(s >= t);  // pushes times toward the noise end
        prev = s;
    }
}

TEST_CASE("cfg scale-1 identity is bit-exact; w=2 matches hand combination") {
    FlowModel model(tiny_flow_config(), 62);
    Mat x = noise(63, 5);
    CondBatch cond = CondBatch::make(5, 3);

    GuidanceCondition g1;
    g1.cls = 3;
    g1.w_text = 1.0;
    Mat v1 = cfg_velocity(model, x, 0.6, cond, g1);
    Mat vc = model.velocity(x, 0.6, cond);
    CHECK(v1.v == vc.v);

    GuidanceCondition g2 = g1;
    g2.w_text = 2.0;
    long evals = 0;
    Mat v2 = cfg_velocity(model, x, 0.6, cond, g2, &evals);
    CHECK(evals == 2);
    Mat vn = model.velocity(x, 0.6, cond.null_class(model.null_class()));
    for (size_t i = 0; i < v2.v.size(); ++i)
        CHECK(v2.v[i] == doctest::Approx(2.0 * vc.v[i] - vn.v[i]).epsilon(1e-12));
}

TEST_CASE("editing guidance gates on the cfg interval") {
    FlowModel model(tiny_flow_config(), 64);
    Mat x = noise(65, 4);
    CondBatch cond = CondBatch::make(4, 2);
    for (int i = 0; i < 4; ++i) {
        cond.has_src[static_cast<size_t>(i)] = 1;
        cond.has_wimg[static_cast<size_t>(i)] = 1;
        cond.src.at(i, 0) = 0.5 * i;
        cond.src.at(i, 1) = -0.25 * i;
    }
    GuidanceCondition gc;
    gc.cls = 2;
    gc.has_src = true;
    gc.w_text = 3.0;
    gc.w_img = 1.8;

    // Outside the interval: single fully-conditional branch.
    long evals = 0;
    Mat v_out = cfg_velocity(model, x, 0.2, cond, gc, &evals);
    CHECK(evals == 1);
    CHECK(v_out.v == model.velocity(x, 0.2, cond).v);

    // Inside: dual combination, three branches.
    evals = 0;
    Mat v_in = cfg_velocity(model, x, 0.7, cond, gc, &evals);
    CHECK(evals == 3);
    Mat v_full = model.velocity(x, 0.7, cond);
    Mat v_src = model.velocity(x, 0.7, cond.null_class(model.null_class()));
    Mat v_none = model.velocity(x, 0.7, cond.null_class(model.null_class()).null_src());
    for (size_t i = 0; i < v_in.v.size(); ++i) {
        double want = v_none.v[i] + gc.w_img * (v_src.v[i] - v_none.v[i]) +
                      gc.w_text * (v_full.v[i] - v_src.v[i]);
        CHECK(v_in.v[i] == doctest::Approx(want).epsilon(1e-12));
    }

    // Both scales at 1 collapse to the conditional branch even inside.
    GuidanceCondition unit = gc;
    unit.w_text = unit.w_img = 1.0;
    evals = 0;
    Mat v_unit = cfg_velocity(model, x, 0.7, cond, unit, &evals);
    CHECK(evals == 1);
    CHECK(v_unit.v == v_full.v);

    // Editing without a source condition is an input error.
    CondBatch no_src = cond.null_src();
    CHECK_THROWS_AS(cfg_velocity(model, x, 0.7, no_src, gc), InputError);
}

TEST_CASE("euler sampler: constant field, shapes, shifted grid") {
    SamplerConfig sc;
    sc.nfe = 6;
    sc.shift = 3.0;
    Mat xT = noise(66, 3);

    // Constant velocity xT integrates to (numerically) exactly zero.
    VelocityFn const_field = [&](const Mat&, double) { return xT; };
    FlowTrajectory traj = euler_sample(const_field, xT, sc);
    CHECK(traj.states.size() == 7);
    CHECK(traj.times.size() == 7);
    CHECK(traj.times.front() == 1.0);
    CHECK(traj.times.back() == 0.0);
    for (size_t i = 1; i < traj.times.size(); ++i) CHECK(traj.times[i] < traj.times[i - 1]);
    for (double v : traj.states.back().v) CHECK(std::abs(v) < 1e-12);

    // Power-of-two uniform grids hit zero exactly.
    SamplerConfig exact;
    exact.nfe = 4;
    exact.shift = 1.0;
    FlowTrajectory tr2 = euler_sample(const_field, xT, exact);
    for (double v : tr2.states.back().v) CHECK(v == 0.0);

    // Shifted grid warps the uniform fractions.
    for (int i = 0; i <= 6; ++i)
        CHECK(traj.times[static_cast<size_t>(i)] ==
              doctest::Approx(shift_time(1.0 - i / 6.0, 3.0)).epsilon(1e-12));
}

TEST_CASE("euler error on an affine field halves with the step size") {
    // dx/dt = a*x + b (per coordinate), integrated from t=1 down to 0.
    double a = 0.8, b = -0.3;
    VelocityFn field = [&](const Mat& x, double) {
        Mat v = x;
        for (auto& z : v.v) z = a * z + b;
        return v;
    };
    Mat x1(1, 2);
    x1.at(0, 0) = 1.2;
    x1.at(0, 1) = -0.7;
    // Exact: x(0) = (x(1) + b/a) e^{-a} - b/a.
    auto exact = [&](double x) { return (x + b / a) * std::exp(-a) - b / a; };

    auto endpoint_err = [&](int nfe) {
        SamplerConfig sc;
        sc.nfe = nfe;
        sc.shift = 1.0;
        FlowTrajectory tr = euler_sample(field, x1, sc);
        double e = 0.0;
        for (int d = 0; d < 2; ++d)
            e = std::max(e, std::abs(tr.states.back().at(0, d) - exact(x1.at(0, d))));
        return e;
    };
    double e32 = endpoint_err(32), e64 = endpoint_err(64);
    double ratio = e32 / e64;
    CHECK(ratio > 1.7);
    CHECK(ratio < 2.4);
}

TEST_CASE("self-convergence: 50 vs 400 step endpoints agree on a smooth model") {
    FlowModel model(tiny_flow_config(), 67);  // untrained but smooth
    CondBatch cond = CondBatch::make(4, 1);
    Mat xT = noise(68, 4);
    long evals = 0;
    VelocityFn src = student_source(model, cond, &evals);
    SamplerConfig c50{50, 3.0, "euler"};
    SamplerConfig c400{400, 3.0, "euler"};
    Mat e50 = euler_sample(src, xT, c50).states.back();
    Mat e400 = euler_sample(src, xT, c400).states.back();
    double diff = 0.0;
    for (size_t i = 0; i < e50.v.size(); ++i) diff = std::max(diff, std::abs(e50.v[i] - e400.v[i]));
    CHECK(diff < 0.05);
}

TEST_CASE("flow model gradient check on a sub-1k-parameter config") {
    FlowModelConfig c;
    c.hidden = 8;
    c.trunk_layers = 2;
    c.time_dim = 6;
    c.cond_dim = 4;
    c.src_dim = 4;
    c.n_freq = 3;
    c.num_classes = 3;
    c.scale_conditioned = true;
    FlowModel model(c, 69);
    CHECK(model.params().num_scalars() <= 1000);

    Mat x = noise(70, 3);
    CondBatch cond = CondBatch::make(3, 1);
    cond.has_src = {1, 0, 1};
    cond.src.at(0, 0) = 0.3;
    cond.src.at(2, 1) = -0.8;
    cond.w_text = {2.0, 3.5, 1.0};
    cond.w_img = {1.5, 1.0, 2.0};
    cond.has_wimg = {1, 0, 1};
    std::vector<double> ts = {0.2, 0.9, 0.55};
    Mat target(3, 2);
    target.at(0, 0) = 0.4;
    target.at(1, 1) = -0.2;

    auto f = [&] {
        Graph g(true);
        int pred = model.velocity_graph(g, g.tape().constant(x), ts, cond);
        int loss = g.tape().scale(g.tape().sum_sq(g.tape().add_const(pred, target)), 0.5);
        g.backward(loss);
        return g.tape().val(loss).v[0];
    };
    CHECK(ad::finite_diff_max_rel_err(model.params(), f) < 1e-4);
}

TEST_CASE("teacher training learns the mixture: loss windows fall, energy distance beats noise") {
    DatasetConfig dc;
    Dataset2D data(dc);
    FlowModelConfig mc = tiny_flow_config();
    mc.hidden = 48;
    FlowModel model(mc, 71);

    FlowTrainConfig tc;
    tc.steps = 1500;
    tc.batch = 64;
    FlowTrainResult r = train_teacher(model, data, tc, 71);

    auto window = [&](int from, int len) {
        double s = 0.0;
        for (int i = from; i < from + len; ++i) s += r.loss_history[static_cast<size_t>(i)];
        return s / len;
    };
    CHECK(window(1000, 500) < window(0, 500));

    // Unconditional 50-step samples vs held-out data, against a noise baseline.
    const int n = 800;
    CondBatch cond = CondBatch::make(n, model.null_class());
    Mat xT = noise(72, n);
    SamplerConfig sc{50, 3.0, "euler"};
    Mat samples = euler_sample(student_source(model, cond, nullptr), xT, sc).states.back();
    Mat held = data.held_out(73, n);
    double d_model = energy_distance(samples, held);
    double d_noise = energy_distance(noise(74, n), held);
    CHECK(d_model < 0.1 * d_noise);
}

TEST_CASE("teacher checkpoint round-trips with sampler and dataset configs") {
    FlowModel model(tiny_flow_config(), 75);
    DatasetConfig dc;
    SamplerConfig sc{50, 3.0, "euler"};
    std::string path = (std::filesystem::temp_directory_path() / "hl_teacher.ckpt").string();
    save_flow(path, model, "teacher", dc, sc, 75, "");
    LoadedFlow back = load_flow(path, "teacher");
    CHECK(back.sampler.nfe == 50);
    CHECK(back.sampler.rule_hash() == sc.rule_hash());
    CHECK(back.dataset.modes == 8);
    CHECK_THROWS_AS(load_flow(path, "cfg"), LineageError);
    std::remove(path.c_str());
}

TEST_CASE("metric estimators: zero on identity, symmetry, separation, permutation invariance") {
    Mat a = noise(76, 128);
    Mat b = noise(77, 128);
    CHECK(energy_distance(a, a) == 0.0);
    CHECK(energy_distance(a, b) == energy_distance(b, a));  // bit-exact symmetry
    CHECK(energy_distance(a, b) >= 0.0);

    // Two unit Gaussians offset by (10, 0) are far; same-distribution pairs are близ zero.
    Mat far = noise(78, 128);
    for (int i = 0; i < far.rows; ++i) far.at(i, 0) += 10.0;
    CHECK(energy_distance(a, far) > 20.0 * std::abs(energy_distance(a, b)));

    // Permutation invariance (reverse row order).
    Mat rev(a.rows, 2);
    for (int i = 0; i < a.rows; ++i)
        for (int d = 0; d < 2; ++d) rev.at(i, d) = a.at(a.rows - 1 - i, d);
    CHECK(energy_distance(rev, b) == doctest::Approx(energy_distance(a, b)).epsilon(1e-12));

    CHECK(sliced_wasserstein(a, a, 32, 5) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(sliced_wasserstein(a, far, 32, 5) == doctest::Approx(10.0).epsilon(0.1));
    Mat tiny(1, 2);
    CHECK_THROWS_AS(energy_distance(tiny, b), InputError);
}

TEST_CASE("nfe accounting reproduces the 100 and 132 eval baselines") {
    SamplerConfig sc{50, 3.0, "euler"};
    CHECK(trajectory_nfe(sc, /*editing=*/false, /*distilled=*/false) == 100);
    CHECK(trajectory_nfe(sc, /*editing=*/true, /*distilled=*/false) == 132);
    SamplerConfig s6{6, 3.0, "euler"};
    CHECK(trajectory_nfe(s6, false, /*distilled=*/true) == 6);
    CHECK(format_speedup(speedup_ratio(100, 6)) == "16.67");
    CHECK(format_speedup(speedup_ratio(132, 6)) == "22.00");
    CHECK(speedup_ratio(6, 6) == 1.0);
}

TEST_CASE("adherence score: exact centers, uniform modes, errors") {
    Dataset2D data(DatasetConfig{});
    Mat at_center(16, 2);
    auto mu = data.mode_center(3);
    for (int i = 0; i < 16; ++i) {
        at_center.at(i, 0) = mu[0];
        at_center.at(i, 1) = mu[1];
    }
    CHECK(adherence_score(at_center, 3, data) == 1.0);

    // Uniform draws across the 8 symmetric modes hit each class ~1/8.
    Rng rng(79);
    Mat uniform_modes(16000, 2);
    for (int i = 0; i < uniform_modes.rows; ++i) {
        auto c = data.mode_center(rng.uniform_int(8));
        uniform_modes.at(i, 0) = c[0] + rng.normal() * 0.05;
        uniform_modes.at(i, 1) = c[1] + rng.normal() * 0.05;
    }
    double frac = adherence_score(uniform_modes, 0, data);
    CHECK(std::abs(frac - 0.125) < 0.02);

    Mat empty(0, 2);
    CHECK_THROWS_AS(adherence_score(empty, 0, data), InputError);
    CHECK_THROWS_AS(adherence_score(at_center, 11, data), InputError);
}
