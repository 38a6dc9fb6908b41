#include "hyperlab/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "hyperlab/errors.hpp"

namespace hyperlab {

using ad::Mat;

namespace {

double mean_cross_distance(const Mat& a, const Mat& b) {
    double acc = 0.0;
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* bj = b.row(j);
            double sq = 0.0;
            for (int d = 0; d < a.cols; ++d) {
                double diff = ai[d] - bj[d];
                sq += diff * diff;
            }
            acc += std::sqrt(sq);
        }
    }
    return acc / (static_cast<double>(a.rows) * static_cast<double>(b.rows));
}

}  // namespace

double energy_distance(const Mat& a, const Mat& b) {
    if (a.rows < 2 || b.rows < 2) throw InputError("energy_distance: need at least 2 samples per side");
    if (a.cols != b.cols) throw InputError("energy_distance: dimension mismatch");
    return 2.0 * mean_cross_distance(a, b) - mean_cross_distance(a, a) - mean_cross_distance(b, b);
}

double sliced_wasserstein(const Mat& a, const Mat& b, int projections, uint64_t seed) {
    if (a.rows < 2 || b.rows < 2) throw InputError("sliced_wasserstein: need at least 2 samples");
    if (a.cols != b.cols) throw InputError("sliced_wasserstein: dimension mismatch");
    if (projections < 1) throw InputError("sliced_wasserstein: need >= 1 projection");

    Rng rng = Rng(seed).stream("sw-projections");
    const int q = std::max(a.rows, b.rows);
    std::vector<double> pa(static_cast<size_t>(a.rows)), pb(static_cast<size_t>(b.rows));
    double total = 0.0;
    for (int p = 0; p < projections; ++p) {
        std::vector<double> dir(static_cast<size_t>(a.cols));
        double norm = 0.0;
        for (auto& d : dir) {
            d = rng.normal();
            norm += d * d;
        }
        norm = std::sqrt(norm);
        for (auto& d : dir) d /= norm;

        for (int i = 0; i < a.rows; ++i) {
            double s = 0.0;
            for (int d = 0; d < a.cols; ++d) s += a.at(i, d) * dir[static_cast<size_t>(d)];
            pa[static_cast<size_t>(i)] = s;
        }
        for (int i = 0; i < b.rows; ++i) {
            double s = 0.0;
            for (int d = 0; d < b.cols; ++d) s += b.at(i, d) * dir[static_cast<size_t>(d)];
            pb[static_cast<size_t>(i)] = s;
        }
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());

        // Common quantile grid with linear interpolation between order stats.
        auto quantile = [](const std::vector<double>& v, double u) {
            double pos = u * (static_cast<double>(v.size()) - 1.0);
            size_t lo = static_cast<size_t>(pos);
            size_t hi = std::min(lo + 1, v.size() - 1);
            double frac = pos - static_cast<double>(lo);
            return v[lo] * (1.0 - frac) + v[hi] * frac;
        };
        double acc = 0.0;
        for (int i = 0; i < q; ++i) {
            double u = (static_cast<double>(i) + 0.5) / q;
            double diff = quantile(pa, u) - quantile(pb, u);
            acc += diff * diff;
        }
        total += acc / q;
    }
    return std::sqrt(total / projections);
}

double adherence_score(const Mat& samples, int cls, const flow::Dataset2D& data) {
    if (samples.rows == 0) throw InputError("adherence_score: empty sample set");
    if (cls < 0 || cls >= data.num_classes()) throw InputError("adherence_score: unknown condition");
    long hits = 0;
    for (int i = 0; i < samples.rows; ++i) {
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < data.num_classes(); ++c) {
            auto mu = data.mode_center(c);
            double dx = samples.at(i, 0) - mu[0];
            double dy = samples.at(i, 1) - mu[1];
            double d = dx * dx + dy * dy;
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (best == cls) hits++;
    }
    return static_cast<double>(hits) / samples.rows;
}

long trajectory_nfe(const flow::SamplerConfig& sampler, bool editing, bool distilled,
                    double cfg_lo, double cfg_hi) {
    if (distilled) return sampler.nfe;
    std::vector<double> grid = sampler.time_grid();
    long evals = 0;
    for (size_t i = 0; i + 1 < grid.size(); ++i) {
        double t = grid[i];
        if (!editing) evals += 2;
        else evals += (t >= cfg_lo && t <= cfg_hi) ? 3 : 1;
    }
    return evals;
}

double speedup_ratio(double baseline_nfe, double distilled_nfe) {
    if (baseline_nfe <= 0.0 || distilled_nfe <= 0.0)
        throw InputError("speedup_ratio: NFE counts must be positive");
    return baseline_nfe / distilled_nfe;
}

std::string format_speedup(double ratio) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", ratio);
    return buf;
}

}  // namespace hyperlab
