#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hyperlab/ad.hpp"

namespace hyperlab::nn {

using ad::Graph;
using ad::Mat;
using ad::Param;
using ad::ParamStore;

// y = x*W (+ b). W is [in x out].
struct Linear {
    Param* W = nullptr;
    Param* b = nullptr;  // optional

    static Linear create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                         double scale, bool bias);
    static Linear create_zero(ParamStore& ps, const std::string& name, int in, int out, bool bias);
    int forward(Graph& g, int x) const;
    void zero_init();
    void random_init(Rng& rng, double scale);
};

struct RmsNorm {
    Param* gain = nullptr;
    static RmsNorm create(ParamStore& ps, const std::string& name, int dim);
    int forward(Graph& g, int x) const;
};

// Multi-head attention; causal when a mask is supplied. Queries may come from
// a different sequence than keys/values (cross-attention).
struct Attention {
    Linear wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;

    static Attention create(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng,
                            bool zero_out_proj);
    // q_in [Sq x D], kv_in [Skv x D]; mask nullptr or [Sq x Skv] additive.
    int forward(Graph& g, int q_in, int kv_in, const Mat* mask) const;
};

struct Mlp {
    Linear fc_in, fc_out;
    static Mlp create(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng,
                      bool zero_out_proj);
    int forward(Graph& g, int x) const;
};

// Pre-norm decoder block: x += attn(norm(x)); x += mlp(norm(x)).
// With zeroed output projections the block is exactly the identity.
struct DecoderBlock {
    RmsNorm norm1, norm2;
    Attention attn;
    Mlp mlp;

    static DecoderBlock create(ParamStore& ps, const std::string& name, int dim, int heads,
                               int mlp_hidden, Rng& rng, bool zero_out_proj = false);
    int forward(Graph& g, int x, const Mat* mask) const;
    std::vector<Param*> params() const;
};

// Additive causal mask: 0 on/below diagonal, -1e30 above. For incremental
// decode, `offset` shifts the query rows to absolute positions.
Mat causal_mask(int s_q, int s_kv, int offset);

// Sinusoidal feature row for a scalar (time or guidance scale): [sin, cos]
// pairs over a geometric frequency ladder, 2*n_freq wide.
std::vector<double> sinusoidal_features(double t, int n_freq);
Mat sinusoidal_rows(const std::vector<double>& ts, int n_freq);

// Two-layer encoder on sinusoidal features; the shared architecture for
// timestep and guidance-scale conditioning.
struct ScalarEncoder {
    Linear l1, l2;
    int n_freq = 8;
    static ScalarEncoder create(ParamStore& ps, const std::string& name, int n_freq, int hidden,
                                int out, Rng& rng, bool zero_out);
    int forward(Graph& g, const std::vector<double>& values) const;
};

void copy_param(const Param& src, Param& dst);

}  // namespace hyperlab::nn
