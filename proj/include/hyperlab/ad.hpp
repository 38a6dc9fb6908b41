#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hyperlab/rng.hpp"

namespace hyperlab::ad {

// Dense row-major matrix of doubles. Everything in the lab is small enough
// that a single 2-D type covers vectors (1xN), batches (BxD) and weights.
struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}
    Mat(int r, int c, std::vector<double> data);

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return v.size(); }
    bool finite() const;
};

Mat zeros(int r, int c);
Mat full(int r, int c, double value);
Mat randn(Rng& rng, int r, int c, double scale);
Mat row_from(const std::vector<double>& v);
Mat col_from(const std::vector<double>& v);

// gemm kernels on raw buffers (C += op(A)*op(B)); shared by forward ops and
// their adjoints.
void gemm_nn(const Mat& a, const Mat& b, Mat& c);
void gemm_nt(const Mat& a, const Mat& b, Mat& c);
void gemm_tn(const Mat& a, const Mat& b, Mat& c);

// Reverse-mode tape. Nodes are created by op calls and hold both value and
// (lazily used) gradient storage; backward() replays adjoint closures in
// reverse creation order. One Tape per training step.
class Tape {
public:
    Tape() = default;
    // Adjoint closures capture `this`; pin the tape in place.
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int input(Mat m, bool needs_grad);
    int constant(Mat m) { return input(std::move(m), false); }
    int scalar(double s);

    const Mat& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Mat& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // --- arithmetic ---
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);                 // hadamard
    int scale(int a, double s);
    int add_scalar(int a, double s);
    int matmul(int a, int b);
    int transpose(int a);
    int add_rowvec(int a, int r);          // a[RxC] + r[1xC]
    int mul_rowvec(int a, int r);          // a[RxC] * r[1xC]
    int mul_colvec(int a, int c);          // a[RxC] * c[Rx1]
    int add_const(int a, const Mat& m);    // constant offset (e.g. causal mask)

    // --- shape ---
    int reshape(int a, int rows, int cols);  // row-major relabel, same element count
    int concat_cols(int a, int b);
    int concat_cols(std::span<const int> parts);
    int slice_cols(int a, int c0, int c1);
    int concat_rows(std::span<const int> parts);
    int slice_rows(int a, int r0, int r1);

    // --- nonlinearities ---
    int silu(int a);
    int relu(int a);
    int tanh_(int a);
    int cos_(int a);
    int exp_(int a);
    int softplus(int a);
    int softmax_rows(int a);
    int log_softmax_rows(int a);
    int rmsnorm_rows(int a, double eps = 1e-6);

    // --- gathers / reductions ---
    int gather_rows(int table, std::vector<int> idx);
    int sum_all(int a);                              // 1x1
    int mean_all(int a);                             // 1x1
    int sum_sq(int a);                               // 1x1: sum of squares
    int dot_const(int a, Mat w);                     // 1x1: sum(a .* w)
    int mean_sq_rows(int a);                         // Rx1: per-row mean square
    // Mean over `rows` of -logp[row, target[row]]; the cross-entropy core.
    int nll_rows(int logp, const std::vector<int>& targets, const std::vector<int>& rows);

    // Seeds d(loss)=1 and accumulates gradients into every needs_grad node.
    void backward(int loss_id);

private:
    struct Node {
        Mat val;
        Mat grad;
        bool needs_grad = false;
        std::function<void()> back;  // adjoint; empty for leaves
    };

    int push(Mat val, bool needs_grad, std::function<void()> back);
    Mat& grad_mut(int id) { return nodes_[static_cast<size_t>(id)].grad; }

    std::vector<Node> nodes_;
};

// A learnable (or frozen) tensor living outside any tape. Gradients
// accumulate across Graph::backward calls until the optimizer consumes them.
struct Param {
    std::string name;
    Mat value;
    Mat grad;
    Mat adam_m, adam_v;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Mat v)
        : name(std::move(n)),
          value(std::move(v)),
          grad(value.rows, value.cols),
          adam_m(value.rows, value.cols),
          adam_v(value.rows, value.cols) {}
    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }
};

// Insertion-ordered parameter registry; the order defines both optimizer
// iteration and checkpoint tensor layout.
class ParamStore {
public:
    Param& add(const std::string& name, Mat init);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::vector<Param*> all();
    std::vector<const Param*> all() const;
    size_t num_scalars() const;
    void zero_grads();

private:
    std::vector<std::unique_ptr<Param>> params_;
};

// Binds Params into a Tape and routes tape gradients back into Param::grad.
class Graph {
public:
    explicit Graph(bool train = true) : train_(train) {}

    Tape& tape() { return tape_; }
    bool training() const { return train_; }

    int bind(Param& p);               // honors p.trainable && training mode
    int bind_frozen(const Param& p);  // always constant
    void backward(int loss_id);       // tape backward + param grad accumulation

private:
    Tape tape_;
    bool train_;
    std::vector<std::pair<Param*, int>> bound_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // 0 = off; else clip global L2 norm
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    // Applies one update to every trainable param and clears all grads.
    void step(ParamStore& params);
    long steps_taken() const { return t_; }
    AdamConfig& config() { return cfg_; }

private:
    AdamConfig cfg_;
    long t_ = 0;
};

// Central finite differences of f() w.r.t. every trainable scalar in params;
// returns the max relative error vs the accumulated analytic grads.
// `f` must populate Param::grad (via Graph::backward) and return the loss.
double finite_diff_max_rel_err(ParamStore& params, const std::function<double()>& f, double h = 1e-5);

}  // namespace hyperlab::ad
