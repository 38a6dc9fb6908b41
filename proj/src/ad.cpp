#include "hyperlab/ad.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "hyperlab/errors.hpp"

namespace hyperlab::ad {

Mat::Mat(int r, int c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {
    if (v.size() != static_cast<size_t>(r) * static_cast<size_t>(c))
        throw InputError("Mat: data size does not match shape");
}

bool Mat::finite() const {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

Mat zeros(int r, int c) { return Mat(r, c); }

Mat full(int r, int c, double value) {
    Mat m(r, c);
    std::fill(m.v.begin(), m.v.end(), value);
    return m;
}

Mat randn(Rng& rng, int r, int c, double scale) {
    Mat m(r, c);
    for (auto& x : m.v) x = rng.normal() * scale;
    return m;
}

Mat row_from(const std::vector<double>& v) {
    Mat m(1, static_cast<int>(v.size()));
    m.v = v;
    return m;
}

Mat col_from(const std::vector<double>& v) {
    Mat m(static_cast<int>(v.size()), 1);
    m.v = v;
    return m;
}

void gemm_nn(const Mat& a, const Mat& b, Mat& c) {
    // c[MxN] += a[MxK] * b[KxN], ikj order for contiguous b/c rows
    const int M = a.rows, K = a.cols, N = b.cols;
    for (int i = 0; i < M; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (int k = 0; k < K; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row(k);
            for (int j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

void gemm_nt(const Mat& a, const Mat& b, Mat& c) {
    // c[MxN] += a[MxK] * b[NxK]^T, dot-product form
    const int M = a.rows, K = a.cols, N = b.rows;
    for (int i = 0; i < M; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (int j = 0; j < N; ++j) {
            const double* bj = b.row(j);
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += ai[k] * bj[k];
            ci[j] += acc;
        }
    }
}

void gemm_tn(const Mat& a, const Mat& b, Mat& c) {
    // c[MxN] += a[KxM]^T * b[KxN]
    const int M = a.cols, K = a.rows, N = b.cols;
    for (int k = 0; k < K; ++k) {
        const double* ak = a.row(k);
        const double* bk = b.row(k);
        for (int i = 0; i < M; ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            double* ci = c.row(i);
            for (int j = 0; j < N; ++j) ci[j] += aki * bk[j];
        }
    }
}

int Tape::push(Mat val, bool needs_grad, std::function<void()> back) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = Mat(n.val.rows, n.val.cols);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::input(Mat m, bool needs_grad) { return push(std::move(m), needs_grad, {}); }

int Tape::scalar(double s) { return constant(full(1, 1, s)); }

namespace {
void check_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw InputError(std::string(op) + ": shape mismatch " + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
}
void axpy(Mat& dst, const Mat& src) {
    for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}
}  // namespace

int Tape::add(int a, int b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check_same_shape(A, B, "add");
    Mat out = A;
    axpy(out, B);
    bool ng = needs_grad(a) || needs_grad(b);
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, a, b, id] {
        const Mat& g = grad(id);
        if (needs_grad(a)) axpy(grad_mut(a), g);
        if (needs_grad(b)) axpy(grad_mut(b), g);
    };
    return id;
}

int Tape::sub(int a, int b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check_same_shape(A, B, "sub");
    Mat out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= B.v[i];
    bool ng = needs_grad(a) || needs_grad(b);
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, a, b, id] {
        const Mat& g = grad(id);
        if (needs_grad(a)) axpy(grad_mut(a), g);
        if (needs_grad(b)) {
            Mat& gb = grad_mut(b);
            for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] -= g.v[i];
        }
    };
    return id;
}

int Tape::mul(int a, int b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check_same_shape(A, B, "mul");
    Mat out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
    bool ng = needs_grad(a) || needs_grad(b);
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, a, b, id] {
        const Mat& g = grad(id);
        if (needs_grad(a)) {
            Mat& ga = grad_mut(a);
            const Mat& B2 = val(b);
            for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i] * B2.v[i];
        }
        if (needs_grad(b)) {
            Mat& gb = grad_mut(b);
            const Mat& A2 = val(a);
            for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += g.v[i] * A2.v[i];
        }
    };
    return id;
}

int Tape::scale(int a, double s) {
    Mat out = val(a);
    for (auto& x : out.v) x *= s;
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, s, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += s * g.v[i];
    };
    return id;
}

int Tape::add_scalar(int a, double s) {
    Mat out = val(a);
    for (auto& x : out.v) x += s;
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (needs_grad(a)) axpy(grad_mut(a), grad(id));
    };
    return id;
}

int Tape::matmul(int a, int b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.cols != B.rows) throw InputError("matmul: inner dims differ");
    Mat out(A.rows, B.cols);
    gemm_nn(A, B, out);
    bool ng = needs_grad(a) || needs_grad(b);
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, a, b, id] {
        const Mat& g = grad(id);
        if (needs_grad(a)) gemm_nt(g, val(b), grad_mut(a));   // dA += g * B^T
        if (needs_grad(b)) gemm_tn(val(a), g, grad_mut(b));   // dB += A^T * g
    };
    return id;
}

int Tape::transpose(int a) {
    const Mat& A = val(a);
    Mat out(A.cols, A.rows);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) out.at(j, i) = A.at(i, j);
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        Mat& ga = grad_mut(a);
        for (int i = 0; i < ga.rows; ++i)
            for (int j = 0; j < ga.cols; ++j) ga.at(i, j) += g.at(j, i);
    };
    return id;
}

int Tape::add_rowvec(int a, int r) {
    const Mat& A = val(a);
    const Mat& R = val(r);
    if (R.rows != 1 || R.cols != A.cols) throw InputError("add_rowvec: bad row vector shape");
    Mat out = A;
    for (int i = 0; i < A.rows; ++i) {
        double* oi = out.row(i);
        for (int j = 0; j < A.cols; ++j) oi[j] += R.v[static_cast<size_t>(j)];
    }
    bool ng = needs_grad(a) || needs_grad(r);
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, a, r, id] {
        const Mat& g = grad(id);
        if (needs_grad(a)) axpy(grad_mut(a), g);
        if (needs_grad(r)) {
            Mat& gr = grad_mut(r);
            for (int i = 0; i < g.rows; ++i) {
                const double* gi = g.row(i);
                for (int j = 0; j < g.cols; ++j) gr.v[static_cast<size_t>(j)] += gi[j];
            }
        }
    };
    return id;
}

int Tape::mul_rowvec(int a, int r) {
    const Mat& A = val(a);
    const Mat& R = val(r);
    if (R.rows != 1 || R.cols != A.cols) throw InputError("mul_rowvec: bad row vector shape");
    Mat out = A;
    for (int i = 0; i < A.rows; ++i) {
        double* oi = out.row(i);
        for (int j = 0; j < A.cols; ++j) oi[j] *= R.v[static_cast<size_t>(j)];
    }
    bool ng = needs_grad(a) || needs_grad(r);
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, a, r, id] {
        const Mat& g = grad(id);
        if (needs_grad(a)) {
            Mat& ga = grad_mut(a);
            const Mat& R2 = val(r);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) ga.at(i, j) += g.at(i, j) * R2.v[static_cast<size_t>(j)];
        }
        if (needs_grad(r)) {
            Mat& gr = grad_mut(r);
            const Mat& A2 = val(a);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gr.v[static_cast<size_t>(j)] += g.at(i, j) * A2.at(i, j);
        }
    };
    return id;
}

int Tape::mul_colvec(int a, int c) {
    const Mat& A = val(a);
    const Mat& C = val(c);
    if (C.cols != 1 || C.rows != A.rows) throw InputError("mul_colvec: bad col vector shape");
    Mat out = A;
    for (int i = 0; i < A.rows; ++i) {
        double s = C.v[static_cast<size_t>(i)];
        double* oi = out.row(i);
        for (int j = 0; j < A.cols; ++j) oi[j] *= s;
    }
    bool ng = needs_grad(a) || needs_grad(c);
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, a, c, id] {
        const Mat& g = grad(id);
        if (needs_grad(a)) {
            Mat& ga = grad_mut(a);
            const Mat& C2 = val(c);
            for (int i = 0; i < g.rows; ++i) {
                double s = C2.v[static_cast<size_t>(i)];
                for (int j = 0; j < g.cols; ++j) ga.at(i, j) += g.at(i, j) * s;
            }
        }
        if (needs_grad(c)) {
            Mat& gc = grad_mut(c);
            const Mat& A2 = val(a);
            for (int i = 0; i < g.rows; ++i) {
                double acc = 0.0;
                for (int j = 0; j < g.cols; ++j) acc += g.at(i, j) * A2.at(i, j);
                gc.v[static_cast<size_t>(i)] += acc;
            }
        }
    };
    return id;
}

int Tape::add_const(int a, const Mat& m) {
    const Mat& A = val(a);
    check_same_shape(A, m, "add_const");
    Mat out = A;
    axpy(out, m);
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (needs_grad(a)) axpy(grad_mut(a), grad(id));
    };
    return id;
}

int Tape::reshape(int a, int rows, int cols) {
    const Mat& A = val(a);
    if (static_cast<size_t>(rows) * static_cast<size_t>(cols) != A.size())
        throw InputError("reshape: element count mismatch");
    Mat out(rows, cols, A.v);
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i];
    };
    return id;
}

int Tape::concat_cols(int a, int b) {
    int parts[2] = {a, b};
    return concat_cols(std::span<const int>(parts, 2));
}

int Tape::concat_cols(std::span<const int> parts) {
    if (parts.empty()) throw InputError("concat_cols: empty");
    int rows = val(parts[0]).rows;
    int cols = 0;
    bool ng = false;
    for (int p : parts) {
        if (val(p).rows != rows) throw InputError("concat_cols: row mismatch");
        cols += val(p).cols;
        ng = ng || needs_grad(p);
    }
    Mat out(rows, cols);
    int off = 0;
    for (int p : parts) {
        const Mat& P = val(p);
        for (int i = 0; i < rows; ++i)
            std::copy(P.row(i), P.row(i) + P.cols, out.row(i) + off);
        off += P.cols;
    }
    std::vector<int> ps(parts.begin(), parts.end());
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, ps, id] {
        const Mat& g = grad(id);
        int off2 = 0;
        for (int p : ps) {
            Mat& gp = grad_mut(p);
            const int pc = val(p).cols;
            if (needs_grad(p)) {
                for (int i = 0; i < g.rows; ++i) {
                    const double* gi = g.row(i) + off2;
                    double* gpi = gp.row(i);
                    for (int j = 0; j < pc; ++j) gpi[j] += gi[j];
                }
            }
            off2 += pc;
        }
    };
    return id;
}

int Tape::slice_cols(int a, int c0, int c1) {
    const Mat& A = val(a);
    if (c0 < 0 || c1 > A.cols || c0 >= c1) throw InputError("slice_cols: bad range");
    Mat out(A.rows, c1 - c0);
    for (int i = 0; i < A.rows; ++i) std::copy(A.row(i) + c0, A.row(i) + c1, out.row(i));
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, c0, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        Mat& ga = grad_mut(a);
        for (int i = 0; i < g.rows; ++i) {
            const double* gi = g.row(i);
            double* gai = ga.row(i) + c0;
            for (int j = 0; j < g.cols; ++j) gai[j] += gi[j];
        }
    };
    return id;
}

int Tape::concat_rows(std::span<const int> parts) {
    if (parts.empty()) throw InputError("concat_rows: empty");
    int cols = val(parts[0]).cols;
    int rows = 0;
    bool ng = false;
    for (int p : parts) {
        if (val(p).cols != cols) throw InputError("concat_rows: col mismatch");
        rows += val(p).rows;
        ng = ng || needs_grad(p);
    }
    Mat out(rows, cols);
    int off = 0;
    for (int p : parts) {
        const Mat& P = val(p);
        std::copy(P.v.begin(), P.v.end(), out.v.begin() + static_cast<size_t>(off) * cols);
        off += P.rows;
    }
    std::vector<int> ps(parts.begin(), parts.end());
    int id = push(std::move(out), ng, {});
    nodes_.back().back = [this, ps, id] {
        const Mat& g = grad(id);
        int off2 = 0;
        for (int p : ps) {
            const int pr = val(p).rows;
            if (needs_grad(p)) {
                Mat& gp = grad_mut(p);
                for (size_t i = 0; i < gp.v.size(); ++i)
                    gp.v[i] += g.v[static_cast<size_t>(off2) * g.cols + i];
            }
            off2 += pr;
        }
    };
    return id;
}

int Tape::slice_rows(int a, int r0, int r1) {
    const Mat& A = val(a);
    if (r0 < 0 || r1 > A.rows || r0 >= r1) throw InputError("slice_rows: bad range");
    Mat out(r1 - r0, A.cols);
    std::copy(A.row(r0), A.row(r0) + out.v.size(), out.v.begin());
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, r0, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < g.v.size(); ++i)
            ga.v[static_cast<size_t>(r0) * ga.cols + i] += g.v[i];
    };
    return id;
}

int Tape::silu(int a) {
    const Mat& A = val(a);
    Mat out = A;
    for (auto& x : out.v) x = x / (1.0 + std::exp(-x));
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& A2 = val(a);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) {
            double x = A2.v[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            ga.v[i] += g.v[i] * (s + x * s * (1.0 - s));
        }
    };
    return id;
}

int Tape::relu(int a) {
    Mat out = val(a);
    for (auto& x : out.v) x = x > 0.0 ? x : 0.0;
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& A2 = val(a);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i)
            if (A2.v[i] > 0.0) ga.v[i] += g.v[i];
    };
    return id;
}

int Tape::tanh_(int a) {
    Mat out = val(a);
    for (auto& x : out.v) x = std::tanh(x);
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& Y = val(id);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i] * (1.0 - Y.v[i] * Y.v[i]);
    };
    return id;
}

int Tape::cos_(int a) {
    Mat out = val(a);
    for (auto& x : out.v) x = std::cos(x);
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& A2 = val(a);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] -= g.v[i] * std::sin(A2.v[i]);
    };
    return id;
}

int Tape::exp_(int a) {
    Mat out = val(a);
    for (auto& x : out.v) x = std::exp(x);
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& Y = val(id);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g.v[i] * Y.v[i];
    };
    return id;
}

int Tape::softplus(int a) {
    Mat out = val(a);
    for (auto& x : out.v) x = x > 30.0 ? x : std::log1p(std::exp(x));
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& A2 = val(a);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i)
            ga.v[i] += g.v[i] / (1.0 + std::exp(-A2.v[i]));
    };
    return id;
}

int Tape::softmax_rows(int a) {
    const Mat& A = val(a);
    Mat out(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
        const double* xi = A.row(i);
        double* oi = out.row(i);
        double mx = xi[0];
        for (int j = 1; j < A.cols; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int j = 0; j < A.cols; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            z += oi[j];
        }
        for (int j = 0; j < A.cols; ++j) oi[j] /= z;
    }
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& P = val(id);
        Mat& ga = grad_mut(a);
        for (int i = 0; i < P.rows; ++i) {
            const double* pi = P.row(i);
            const double* gi = g.row(i);
            double dot = 0.0;
            for (int j = 0; j < P.cols; ++j) dot += pi[j] * gi[j];
            double* gai = ga.row(i);
            for (int j = 0; j < P.cols; ++j) gai[j] += pi[j] * (gi[j] - dot);
        }
    };
    return id;
}

int Tape::log_softmax_rows(int a) {
    const Mat& A = val(a);
    Mat out(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
        const double* xi = A.row(i);
        double* oi = out.row(i);
        double mx = xi[0];
        for (int j = 1; j < A.cols; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int j = 0; j < A.cols; ++j) z += std::exp(xi[j] - mx);
        double lz = std::log(z) + mx;
        for (int j = 0; j < A.cols; ++j) oi[j] = xi[j] - lz;
    }
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& LP = val(id);
        Mat& ga = grad_mut(a);
        for (int i = 0; i < LP.rows; ++i) {
            const double* lpi = LP.row(i);
            const double* gi = g.row(i);
            double gsum = 0.0;
            for (int j = 0; j < LP.cols; ++j) gsum += gi[j];
            double* gai = ga.row(i);
            for (int j = 0; j < LP.cols; ++j) gai[j] += gi[j] - std::exp(lpi[j]) * gsum;
        }
    };
    return id;
}

int Tape::rmsnorm_rows(int a, double eps) {
    const Mat& A = val(a);
    Mat out(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
        const double* xi = A.row(i);
        double ms = 0.0;
        for (int j = 0; j < A.cols; ++j) ms += xi[j] * xi[j];
        ms = ms / A.cols + eps;
        double r = 1.0 / std::sqrt(ms);
        double* oi = out.row(i);
        for (int j = 0; j < A.cols; ++j) oi[j] = xi[j] * r;
    }
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, eps, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& X = val(a);
        Mat& ga = grad_mut(a);
        const int C = X.cols;
        for (int i = 0; i < X.rows; ++i) {
            const double* xi = X.row(i);
            const double* gi = g.row(i);
            double ms = 0.0, gx = 0.0;
            for (int j = 0; j < C; ++j) ms += xi[j] * xi[j];
            ms = ms / C + eps;
            double r = 1.0 / std::sqrt(ms);
            for (int j = 0; j < C; ++j) gx += gi[j] * xi[j];
            // d/dx_j [x_j * r] with r = (mean(x^2)+eps)^{-1/2}
            double r3_over_c = r * r * r / C;
            double* gai = ga.row(i);
            for (int j = 0; j < C; ++j) gai[j] += gi[j] * r - gx * r3_over_c * xi[j];
        }
    };
    return id;
}

int Tape::gather_rows(int table, std::vector<int> idx) {
    const Mat& T = val(table);
    for (int i : idx)
        if (i < 0 || i >= T.rows) throw InputError("gather_rows: index out of range");
    Mat out(static_cast<int>(idx.size()), T.cols);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(T.row(idx[r]), T.row(idx[r]) + T.cols, out.row(static_cast<int>(r)));
    int id = push(std::move(out), needs_grad(table), {});
    nodes_.back().back = [this, table, idx = std::move(idx), id] {
        if (!needs_grad(table)) return;
        const Mat& g = grad(id);
        Mat& gt = grad_mut(table);
        for (size_t r = 0; r < idx.size(); ++r) {
            const double* gi = g.row(static_cast<int>(r));
            double* ti = gt.row(idx[r]);
            for (int j = 0; j < g.cols; ++j) ti[j] += gi[j];
        }
    };
    return id;
}

int Tape::sum_all(int a) {
    const Mat& A = val(a);
    double s = 0.0;
    for (double x : A.v) s += x;
    int id = push(full(1, 1, s), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        double g = grad(id).v[0];
        Mat& ga = grad_mut(a);
        for (auto& x : ga.v) x += g;
    };
    return id;
}

int Tape::mean_all(int a) {
    const Mat& A = val(a);
    double n = static_cast<double>(A.size());
    double s = 0.0;
    for (double x : A.v) s += x;
    int id = push(full(1, 1, s / n), needs_grad(a), {});
    nodes_.back().back = [this, a, n, id] {
        if (!needs_grad(a)) return;
        double g = grad(id).v[0] / n;
        Mat& ga = grad_mut(a);
        for (auto& x : ga.v) x += g;
    };
    return id;
}

int Tape::sum_sq(int a) {
    const Mat& A = val(a);
    double s = 0.0;
    for (double x : A.v) s += x * x;
    int id = push(full(1, 1, s), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        double g = grad(id).v[0];
        const Mat& A2 = val(a);
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += 2.0 * g * A2.v[i];
    };
    return id;
}

int Tape::dot_const(int a, Mat w) {
    const Mat& A = val(a);
    check_same_shape(A, w, "dot_const");
    double s = 0.0;
    for (size_t i = 0; i < A.v.size(); ++i) s += A.v[i] * w.v[i];
    int id = push(full(1, 1, s), needs_grad(a), {});
    nodes_.back().back = [this, a, w = std::move(w), id] {
        if (!needs_grad(a)) return;
        double g = grad(id).v[0];
        Mat& ga = grad_mut(a);
        for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += g * w.v[i];
    };
    return id;
}

int Tape::mean_sq_rows(int a) {
    const Mat& A = val(a);
    Mat out(A.rows, 1);
    for (int i = 0; i < A.rows; ++i) {
        const double* xi = A.row(i);
        double s = 0.0;
        for (int j = 0; j < A.cols; ++j) s += xi[j] * xi[j];
        out.v[static_cast<size_t>(i)] = s / A.cols;
    }
    int id = push(std::move(out), needs_grad(a), {});
    nodes_.back().back = [this, a, id] {
        if (!needs_grad(a)) return;
        const Mat& g = grad(id);
        const Mat& A2 = val(a);
        Mat& ga = grad_mut(a);
        for (int i = 0; i < A2.rows; ++i) {
            double gi = 2.0 * g.v[static_cast<size_t>(i)] / A2.cols;
            for (int j = 0; j < A2.cols; ++j) ga.at(i, j) += gi * A2.at(i, j);
        }
    };
    return id;
}

int Tape::nll_rows(int logp, const std::vector<int>& targets, const std::vector<int>& rows) {
    const Mat& LP = val(logp);
    if (rows.empty()) throw InputError("nll_rows: no rows selected");
    double s = 0.0;
    for (int r : rows) {
        if (r < 0 || r >= LP.rows) throw InputError("nll_rows: row out of range");
        int t = targets[static_cast<size_t>(r)];
        if (t < 0 || t >= LP.cols) throw InputError("nll_rows: target out of range");
        s -= LP.at(r, t);
    }
    double inv_n = 1.0 / static_cast<double>(rows.size());
    int id = push(full(1, 1, s * inv_n), needs_grad(logp), {});
    nodes_.back().back = [this, logp, targets, rows, inv_n, id] {
        if (!needs_grad(logp)) return;
        double g = grad(id).v[0] * inv_n;
        Mat& glp = grad_mut(logp);
        for (int r : rows) glp.at(r, targets[static_cast<size_t>(r)]) -= g;
    };
    return id;
}

void Tape::backward(int loss_id) {
    Node& loss = nodes_[static_cast<size_t>(loss_id)];
    if (loss.val.size() != 1) throw InputError("backward: loss must be a scalar node");
    if (!loss.needs_grad) return;  // nothing reachable requires gradients
    loss.grad.v[0] = 1.0;
    for (int i = loss_id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.needs_grad && n.back) n.back();
    }
}

Param& ParamStore::add(const std::string& name, Mat init) {
    if (contains(name)) throw ConfigError("ParamStore: duplicate param " + name);
    params_.push_back(std::make_unique<Param>(name, std::move(init)));
    return *params_.back();
}

Param& ParamStore::at(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return *p;
    throw ConfigError("ParamStore: unknown param " + name);
}

const Param& ParamStore::at(const std::string& name) const {
    for (auto& p : params_)
        if (p->name == name) return *p;
    throw ConfigError("ParamStore: unknown param " + name);
}

bool ParamStore::contains(const std::string& name) const {
    for (auto& p : params_)
        if (p->name == name) return true;
    return false;
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Param*> ParamStore::all() const {
    std::vector<const Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

size_t ParamStore::num_scalars() const {
    size_t n = 0;
    for (auto& p : params_) n += p->value.size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& p : params_) p->zero_grad();
}

int Graph::bind(Param& p) {
    bool ng = train_ && p.trainable;
    int id = tape_.input(p.value, ng);
    if (ng) bound_.emplace_back(&p, id);
    return id;
}

int Graph::bind_frozen(const Param& p) { return tape_.input(p.value, false); }

void Graph::backward(int loss_id) {
    tape_.backward(loss_id);
    for (auto& [p, id] : bound_) {
        const Mat& g = tape_.grad(id);
        for (size_t i = 0; i < g.v.size(); ++i) p->grad.v[i] += g.v[i];
    }
}

void Adam::step(ParamStore& params) {
    t_++;
    if (cfg_.grad_clip > 0.0) {
        double sq = 0.0;
        for (Param* p : params.all())
            if (p->trainable)
                for (double g : p->grad.v) sq += g * g;
        double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) {
            double s = cfg_.grad_clip / norm;
            for (Param* p : params.all())
                if (p->trainable)
                    for (double& g : p->grad.v) g *= s;
        }
    }
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Param* p : params.all()) {
        if (p->trainable) {
            for (size_t i = 0; i < p->value.v.size(); ++i) {
                double g = p->grad.v[i];
                p->adam_m.v[i] = cfg_.beta1 * p->adam_m.v[i] + (1.0 - cfg_.beta1) * g;
                p->adam_v.v[i] = cfg_.beta2 * p->adam_v.v[i] + (1.0 - cfg_.beta2) * g * g;
                double mhat = p->adam_m.v[i] / bc1;
                double vhat = p->adam_v.v[i] / bc2;
                p->value.v[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
        p->zero_grad();
    }
}

double finite_diff_max_rel_err(ParamStore& params, const std::function<double()>& f, double h) {
    params.zero_grads();
    (void)f();  // populate analytic grads
    std::vector<Mat> analytic;
    for (Param* p : params.all()) analytic.push_back(p->grad);

    double max_rel = 0.0;
    auto ps = params.all();
    for (size_t pi = 0; pi < ps.size(); ++pi) {
        Param* p = ps[pi];
        if (!p->trainable) continue;
        for (size_t i = 0; i < p->value.v.size(); ++i) {
            double orig = p->value.v[i];
            p->value.v[i] = orig + h;
            params.zero_grads();
            double fp = f();
            p->value.v[i] = orig - h;
            params.zero_grads();
            double fm = f();
            p->value.v[i] = orig;
            double num = (fp - fm) / (2.0 * h);
            double ana = analytic[pi].v[i];
            double denom = std::max({std::abs(num), std::abs(ana), 1e-8});
            max_rel = std::max(max_rel, std::abs(num - ana) / denom);
        }
    }
    params.zero_grads();
    return max_rel;
}

}  // namespace hyperlab::ad
