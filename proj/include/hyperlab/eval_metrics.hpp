#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "hyperlab/ad.hpp"
#include "hyperlab/flow.hpp"

namespace hyperlab {

// Energy distance between two empirical samples (V-statistic form:
// 2 E|a-b| - E|a-a'| - E|b-b'| over all ordered pairs). Zero for identical
// samples, symmetric, permutation-invariant.
double energy_distance(const ad::Mat& a, const ad::Mat& b);

// Sliced 2-Wasserstein with `projections` seeded random directions;
// 1-D transport through sorted (interpolated) quantiles.
double sliced_wasserstein(const ad::Mat& a, const ad::Mat& b, int projections = 64,
                          uint64_t seed = 0);

// Fraction of samples whose nearest mode center belongs to condition c.
double adherence_score(const ad::Mat& samples, int cls, const flow::Dataset2D& data);

// Function evaluations of one sampled trajectory under the classifier-free
// guidance rule: generation runs 2 evals per step; editing runs 3 inside the
// CFG interval and 1 outside; a distilled (scale-embedded) model runs 1.
long trajectory_nfe(const flow::SamplerConfig& sampler, bool editing, bool distilled,
                    double cfg_lo = flow::kCfgLo, double cfg_hi = flow::kCfgHi);

// baseline_nfe / distilled_nfe, e.g. 100 -> 6 gives 16.67x.
double speedup_ratio(double baseline_nfe, double distilled_nfe);
std::string format_speedup(double ratio);  // two decimals, "16.67"

}  // namespace hyperlab
