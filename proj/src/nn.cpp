#include "hyperlab/nn.hpp"

#include <cmath>

#include "hyperlab/errors.hpp"

namespace hyperlab::nn {

Linear Linear::create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                      double scale, bool bias) {
    Linear l;
    l.W = &ps.add(name + ".w", ad::randn(rng, in, out, scale));
    if (bias) l.b = &ps.add(name + ".b", ad::zeros(1, out));
    return l;
}

Linear Linear::create_zero(ParamStore& ps, const std::string& name, int in, int out, bool bias) {
    Linear l;
    l.W = &ps.add(name + ".w", ad::zeros(in, out));
    if (bias) l.b = &ps.add(name + ".b", ad::zeros(1, out));
    return l;
}

int Linear::forward(Graph& g, int x) const {
    int y = g.tape().matmul(x, g.bind(*W));
    if (b) y = g.tape().add_rowvec(y, g.bind(*b));
    return y;
}

void Linear::zero_init() {
    std::fill(W->value.v.begin(), W->value.v.end(), 0.0);
    if (b) std::fill(b->value.v.begin(), b->value.v.end(), 0.0);
}

void Linear::random_init(Rng& rng, double scale) {
    for (auto& x : W->value.v) x = rng.normal() * scale;
    if (b)
        for (auto& x : b->value.v) x = 0.0;
}

RmsNorm RmsNorm::create(ParamStore& ps, const std::string& name, int dim) {
    RmsNorm n;
    n.gain = &ps.add(name + ".gain", ad::full(1, dim, 1.0));
    return n;
}

int RmsNorm::forward(Graph& g, int x) const {
    return g.tape().mul_rowvec(g.tape().rmsnorm_rows(x), g.bind(*gain));
}

Attention Attention::create(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng,
                            bool zero_out_proj) {
    if (dim % heads != 0) throw ConfigError("attention: dim must be divisible by heads");
    Attention a;
    a.dim = dim;
    a.heads = heads;
    double scale = 0.6 / std::sqrt(static_cast<double>(dim));
    a.wq = Linear::create(ps, name + ".q", dim, dim, rng, scale, false);
    a.wk = Linear::create(ps, name + ".k", dim, dim, rng, scale, false);
    a.wv = Linear::create(ps, name + ".v", dim, dim, rng, scale, false);
    a.wo = zero_out_proj ? Linear::create_zero(ps, name + ".o", dim, dim, false)
                         : Linear::create(ps, name + ".o", dim, dim, rng, scale, false);
    return a;
}

int Attention::forward(Graph& g, int q_in, int kv_in, const Mat* mask) const {
    ad::Tape& t = g.tape();
    int q = wq.forward(g, q_in);
    int k = wk.forward(g, kv_in);
    int v = wv.forward(g, kv_in);
    const int dh = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<int> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        int qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        int kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        int vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        int scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt);
        if (mask) scores = t.add_const(scores, *mask);
        int probs = t.softmax_rows(scores);
        outs.push_back(t.matmul(probs, vh));
    }
    int merged = heads == 1 ? outs[0] : t.concat_cols(std::span<const int>(outs.data(), outs.size()));
    return wo.forward(g, merged);
}

Mlp Mlp::create(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng,
                bool zero_out_proj) {
    Mlp m;
    double s1 = 0.6 / std::sqrt(static_cast<double>(dim));
    double s2 = 0.6 / std::sqrt(static_cast<double>(hidden));
    m.fc_in = Linear::create(ps, name + ".in", dim, hidden, rng, s1, false);
    m.fc_out = zero_out_proj ? Linear::create_zero(ps, name + ".out", hidden, dim, false)
                             : Linear::create(ps, name + ".out", hidden, dim, rng, s2, false);
    return m;
}

int Mlp::forward(Graph& g, int x) const { return fc_out.forward(g, g.tape().silu(fc_in.forward(g, x))); }

DecoderBlock DecoderBlock::create(ParamStore& ps, const std::string& name, int dim, int heads,
                                  int mlp_hidden, Rng& rng, bool zero_out_proj) {
    DecoderBlock b;
    b.norm1 = RmsNorm::create(ps, name + ".norm1", dim);
    b.norm2 = RmsNorm::create(ps, name + ".norm2", dim);
    b.attn = Attention::create(ps, name + ".attn", dim, heads, rng, zero_out_proj);
    b.mlp = Mlp::create(ps, name + ".mlp", dim, mlp_hidden, rng, zero_out_proj);
    return b;
}

int DecoderBlock::forward(Graph& g, int x, const Mat* mask) const {
    ad::Tape& t = g.tape();
    int h = norm1.forward(g, x);
    x = t.add(x, attn.forward(g, h, h, mask));
    x = t.add(x, mlp.forward(g, norm2.forward(g, x)));
    return x;
}

std::vector<Param*> DecoderBlock::params() const {
    std::vector<Param*> out = {norm1.gain, norm2.gain, attn.wq.W, attn.wk.W, attn.wv.W,
                               attn.wo.W,  mlp.fc_in.W, mlp.fc_out.W};
    return out;
}

Mat causal_mask(int s_q, int s_kv, int offset) {
    Mat m(s_q, s_kv);
    for (int i = 0; i < s_q; ++i)
        for (int j = 0; j < s_kv; ++j)
            if (j > i + offset) m.at(i, j) = -1e30;
    return m;
}

std::vector<double> sinusoidal_features(double t, int n_freq) {
    std::vector<double> out(static_cast<size_t>(2 * n_freq));
    double w = 6.283185307179586;  // 2*pi, doubled per rung
    for (int i = 0; i < n_freq; ++i) {
        out[static_cast<size_t>(2 * i)] = std::sin(t * w);
        out[static_cast<size_t>(2 * i + 1)] = std::cos(t * w);
        w *= 2.0;
    }
    return out;
}

Mat sinusoidal_rows(const std::vector<double>& ts, int n_freq) {
    Mat m(static_cast<int>(ts.size()), 2 * n_freq);
    for (size_t i = 0; i < ts.size(); ++i) {
        auto f = sinusoidal_features(ts[i], n_freq);
        std::copy(f.begin(), f.end(), m.row(static_cast<int>(i)));
    }
    return m;
}

ScalarEncoder ScalarEncoder::create(ParamStore& ps, const std::string& name, int n_freq, int hidden,
                                    int out, Rng& rng, bool zero_out) {
    ScalarEncoder e;
    e.n_freq = n_freq;
    double s = 0.6 / std::sqrt(static_cast<double>(2 * n_freq));
    e.l1 = Linear::create(ps, name + ".l1", 2 * n_freq, hidden, rng, s, true);
    e.l2 = zero_out ? Linear::create_zero(ps, name + ".l2", hidden, out, true)
                    : Linear::create(ps, name + ".l2", hidden, out, rng,
                                     0.6 / std::sqrt(static_cast<double>(hidden)), true);
    return e;
}

int ScalarEncoder::forward(Graph& g, const std::vector<double>& values) const {
    int feats = g.tape().constant(sinusoidal_rows(values, n_freq));
    return l2.forward(g, g.tape().silu(l1.forward(g, feats)));
}

void copy_param(const Param& src, Param& dst) {
    if (src.value.rows != dst.value.rows || src.value.cols != dst.value.cols)
        throw ConfigError("copy_param: shape mismatch for " + src.name);
    dst.value = src.value;
}

}  // namespace hyperlab::nn
