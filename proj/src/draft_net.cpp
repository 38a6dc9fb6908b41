#include "hyperlab/draft_net.hpp"

#include <algorithm>
#include <cmath>

#include "hyperlab/checkpoint.hpp"
#include "hyperlab/errors.hpp"

namespace hyperlab {

using ad::Graph;
using ad::Mat;

nlohmann::json DraftConfig::to_json() const {
    return {{"num_draft_layers", num_draft_layers},
            {"num_meta_queries", num_meta_queries},
            {"lambda_ce", lambda_ce},
            {"zero_init", zero_init},
            {"ce_loss", ce_loss},
            {"train_passes", train_passes}};
}

DraftConfig DraftConfig::from_json(const nlohmann::json& j) {
    DraftConfig c;
    c.num_draft_layers = j.at("num_draft_layers");
    c.num_meta_queries = j.at("num_meta_queries");
    c.lambda_ce = j.at("lambda_ce");
    c.zero_init = j.at("zero_init");
    c.ce_loss = j.at("ce_loss");
    c.train_passes = j.value("train_passes", 3);
    return c;
}

DraftModel::DraftModel(const TargetModel& target, DraftConfig cfg, uint64_t init_seed)
    : cfg_(cfg), tcfg_(target.config()) {
    if (cfg_.num_draft_layers < 1) throw ConfigError("draft: need at least one decoder layer");
    if (cfg_.num_meta_queries != 3)
        throw ConfigError("draft: direct-residual wiring requires Q = 3 (Q*D must equal 3D)");
    if (cfg_.lambda_ce < 0.0) throw ConfigError("draft: lambda must be nonnegative");
    if (cfg_.num_draft_layers >= tcfg_.num_layers)
        throw ConfigError("draft: N must be smaller than the target depth");

    const int D = tcfg_.dim;
    const int Q = cfg_.num_meta_queries;
    Rng rng = Rng(init_seed).stream("draft-init");

    fq_ = &params_.add("fq", ad::randn(rng, Q, D, 0.02));
    ca_ = nn::Attention::create(params_, "ca", D, tcfg_.heads, rng, /*zero_out_proj=*/true);
    agg_dec_ = nn::DecoderBlock::create(params_, "agg_dec", D, tcfg_.heads, tcfg_.mlp(), rng,
                                        /*zero_out_proj=*/true);
    fc1_ = nn::Linear::create_zero(params_, "fc1", Q * D, D, /*bias=*/true);
    fc2_ = nn::Linear::create_zero(params_, "fc2", 2 * D, D, /*bias=*/true);

    // Draft decoder layers start as copies of the target's last N layers.
    for (int n = 0; n < cfg_.num_draft_layers; ++n) {
        auto blk = nn::DecoderBlock::create(params_, "draft" + std::to_string(n), D, tcfg_.heads,
                                            tcfg_.mlp(), rng);
        const nn::DecoderBlock& src = target.block(tcfg_.num_layers - cfg_.num_draft_layers + n);
        auto sp = src.params();
        auto dp = blk.params();
        for (size_t i = 0; i < sp.size(); ++i) nn::copy_param(*sp[i], *dp[i]);
        draft_blocks_.push_back(blk);
    }

    // Shared frozen target components.
    for (int s = 0; s < tcfg_.num_segments; ++s) {
        ad::Param& e = params_.add("emb.seg" + std::to_string(s), target.token_table(s).value);
        e.trainable = false;
        emb_.push_back(&e);
    }
    pos_ = &params_.add("pos", target.pos_table().value);
    pos_->trainable = false;
    final_norm_ = nn::RmsNorm::create(params_, "final_norm", D);
    nn::copy_param(target.final_norm_gain(), *final_norm_.gain);
    final_norm_.gain->trainable = false;
    head_ = nn::Linear::create_zero(params_, "head", D, tcfg_.vocab, false);
    nn::copy_param(target.head_weight(), *head_.W);
    head_.W->trainable = false;

    if (!cfg_.zero_init) {
        Rng alt = Rng(init_seed).stream("draft-nonzero-init");
        ca_.wo.random_init(alt, 0.6 / std::sqrt(static_cast<double>(D)));
        agg_dec_.attn.wo.random_init(alt, 0.6 / std::sqrt(static_cast<double>(D)));
        agg_dec_.mlp.fc_out.random_init(alt, 0.6 / std::sqrt(static_cast<double>(tcfg_.mlp())));
        fc1_.random_init(alt, 0.6 / std::sqrt(static_cast<double>(Q * D)));
        fc2_.random_init(alt, 0.6 / std::sqrt(static_cast<double>(2 * D)));
    }
}

std::vector<ad::Param*> DraftModel::zero_init_targets() const {
    return {ca_.wo.W, agg_dec_.attn.wo.W, agg_dec_.mlp.fc_out.W, fc1_.W, fc2_.W};
}

int DraftModel::aggregate_features_graph(Graph& g, const LayerFeatureStack& stack) const {
    if (!stack.finite()) throw InputError("aggregate_features: non-finite feature stack");
    if (stack.dim != tcfg_.dim || stack.layers != tcfg_.num_layers)
        throw InputError("aggregate_features: stack does not match target shape");
    const int Q = cfg_.num_meta_queries;
    if (fc1_.W->value.rows != Q * stack.dim)
        throw ConfigError("aggregate_features: Q*D does not match fc1 input width");

    ad::Tape& t = g.tape();
    int fq = g.bind(*fq_);
    // One cross-attention per token: queries f_q, keys/values the token's
    // [L x D] layer stack; flattened output + EAGLE residual concat.
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(stack.seq));
    Mat residual(stack.seq, 3 * stack.dim);
    for (int s = 0; s < stack.seq; ++s) {
        int fi = t.constant(stack.token_features(s));
        int ca = ca_.forward(g, fq, fi, nullptr);            // [Q x D]
        rows.push_back(t.reshape(ca, 1, Q * stack.dim));     // flatten
        auto res = stack.residual_concat(s);
        std::copy(res.begin(), res.end(), residual.row(s));
    }
    int f_c = t.concat_rows(std::span<const int>(rows.data(), rows.size()));
    return t.add_const(f_c, residual);
}

int DraftModel::intermediate_forward_graph(Graph& g, int f_c) const {
    const int S = g.tape().val(f_c).rows;
    Mat mask = nn::causal_mask(S, S, 0);
    int x = fc1_.forward(g, f_c);
    return agg_dec_.forward(g, x, &mask);
}

int DraftModel::decode_stack_graph(Graph& g, int g_rows, std::span<const int> tokens,
                                   std::span<const int> tags, int start_pos,
                                   int* hidden_node) const {
    ad::Tape& t = g.tape();
    const int S = static_cast<int>(tokens.size());
    const int D = tcfg_.dim;
    if (t.val(g_rows).rows != S) throw InputError("decode_stack: feature/token length mismatch");
    if (start_pos + S > tcfg_.max_seq) throw InputError("decode_stack: exceeds max_seq");

    Mat emb_rows(S, D), pos_rows(S, D);
    for (int i = 0; i < S; ++i) {
        int tag = tags.empty() ? 0 : tags[static_cast<size_t>(i)];
        const Mat& table = emb_[static_cast<size_t>(tag)]->value;
        std::copy(table.row(tokens[static_cast<size_t>(i)]), table.row(tokens[static_cast<size_t>(i)]) + D,
                  emb_rows.row(i));
        std::copy(pos_->value.row(start_pos + i), pos_->value.row(start_pos + i) + D, pos_rows.row(i));
    }
    int x = fc2_.forward(g, t.concat_cols(g_rows, t.constant(emb_rows)));
    x = t.add_const(x, pos_rows);

    Mat mask = nn::causal_mask(S, S, 0);
    for (const auto& blk : draft_blocks_) x = blk.forward(g, x, &mask);
    if (hidden_node) *hidden_node = x;
    x = t.mul_rowvec(t.rmsnorm_rows(x), g.bind_frozen(*final_norm_.gain));
    return t.matmul(x, g.bind_frozen(*head_.W));
}

int DraftModel::decoder_tail_graph(Graph& g, int x_rows) const {
    ad::Tape& t = g.tape();
    const int S = t.val(x_rows).rows;
    Mat mask = nn::causal_mask(S, S, 0);
    int x = x_rows;
    for (const auto& blk : draft_blocks_) x = blk.forward(g, x, &mask);
    x = t.mul_rowvec(t.rmsnorm_rows(x), g.bind_frozen(*final_norm_.gain));
    return t.matmul(x, g.bind_frozen(*head_.W));
}

Mat DraftModel::aggregate_features(const LayerFeatureStack& stack) const {
    Graph g(false);
    int f_c = aggregate_features_graph(g, stack);
    return g.tape().val(f_c);
}

Mat DraftModel::intermediate_forward(const Mat& f_c) const {
    Graph g(false);
    int node = intermediate_forward_graph(g, g.tape().constant(f_c));
    return g.tape().val(node);
}

void DraftModel::save(const std::string& path, uint64_t seed, const std::string& parent_hash,
                      nlohmann::json metrics) const {
    nlohmann::json m;
    m["stage"] = "draft";
    m["config"] = cfg_.to_json();
    m["target_config"] = tcfg_.to_json();
    m["seed"] = seed;
    m["parent_hash"] = parent_hash;
    m["flags"] = {{"no_zero_init", !cfg_.zero_init}, {"no_ce_loss", !cfg_.ce_loss}};
    if (!metrics.is_null()) m["metrics"] = metrics;
    std::vector<const ad::Param*> tensors;
    for (const ad::Param* p : params_.all()) tensors.push_back(p);
    ckpt::save(path, std::move(m), tensors);
}

DraftModel DraftModel::load(const std::string& path, const TargetModel& target) {
    ckpt::Loaded file = ckpt::load(path);
    if (file.stage() != "draft")
        throw LineageError("expected a draft checkpoint, got stage '" + file.stage() + "'");
    DraftModel model(target, DraftConfig::from_json(file.manifest.at("config")), 0);
    ckpt::load_into(file, model.params_);
    return model;
}

// --- incremental decode ------------------------------------------------------

DraftSession::DraftSession(const DraftModel& model) : model_(model) {
    k_cache_.resize(static_cast<size_t>(model.cfg_.num_draft_layers));
    v_cache_.resize(static_cast<size_t>(model.cfg_.num_draft_layers));
}

namespace {

inline void vec_mat(const double* x, const Mat& w, double* out) {
    std::fill(out, out + w.cols, 0.0);
    for (int k = 0; k < w.rows; ++k) {
        double xk = x[k];
        if (xk == 0.0) continue;
        const double* wk = w.row(k);
        for (int j = 0; j < w.cols; ++j) out[j] += xk * wk[j];
    }
}

inline void rmsnorm_row(const double* x, const double* gain, int n, double* out, double eps = 1e-6) {
    double ms = 0.0;
    for (int j = 0; j < n; ++j) ms += x[j] * x[j];
    double r = 1.0 / std::sqrt(ms / n + eps);
    for (int j = 0; j < n; ++j) out[j] = x[j] * r * gain[j];
}

// One incremental pre-norm decoder-block slot; appends this slot's k/v.
void block_step(const nn::DecoderBlock& blk, int heads, std::vector<double>& x,
                std::vector<double>& kc, std::vector<double>& vc) {
    const int D = static_cast<int>(x.size());
    const int dh = D / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const int pos = static_cast<int>(kc.size()) / D;

    std::vector<double> h(static_cast<size_t>(D)), q(static_cast<size_t>(D)), tmp(static_cast<size_t>(D));
    rmsnorm_row(x.data(), blk.norm1.gain->value.v.data(), D, h.data());
    vec_mat(h.data(), blk.attn.wq.W->value, q.data());
    kc.resize(static_cast<size_t>(pos + 1) * D);
    vc.resize(static_cast<size_t>(pos + 1) * D);
    vec_mat(h.data(), blk.attn.wk.W->value, kc.data() + static_cast<size_t>(pos) * D);
    vec_mat(h.data(), blk.attn.wv.W->value, vc.data() + static_cast<size_t>(pos) * D);

    std::vector<double> scores(static_cast<size_t>(pos + 1));
    for (int hd = 0; hd < heads; ++hd) {
        const int off = hd * dh;
        double mx = -1e300;
        for (int j = 0; j <= pos; ++j) {
            const double* kj = kc.data() + static_cast<size_t>(j) * D + off;
            double s = 0.0;
            for (int d = 0; d < dh; ++d) s += q[static_cast<size_t>(off + d)] * kj[d];
            s *= inv_sqrt;
            scores[static_cast<size_t>(j)] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (int j = 0; j <= pos; ++j) {
            scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
            z += scores[static_cast<size_t>(j)];
        }
        for (int d = 0; d < dh; ++d) tmp[static_cast<size_t>(off + d)] = 0.0;
        for (int j = 0; j <= pos; ++j) {
            double w = scores[static_cast<size_t>(j)] / z;
            const double* vj = vc.data() + static_cast<size_t>(j) * D + off;
            for (int d = 0; d < dh; ++d) tmp[static_cast<size_t>(off + d)] += w * vj[d];
        }
    }
    std::vector<double> att(static_cast<size_t>(D));
    vec_mat(tmp.data(), blk.attn.wo.W->value, att.data());
    for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] += att[static_cast<size_t>(j)];

    rmsnorm_row(x.data(), blk.norm2.gain->value.v.data(), D, h.data());
    std::vector<double> mh(static_cast<size_t>(blk.mlp.fc_in.W->value.cols));
    vec_mat(h.data(), blk.mlp.fc_in.W->value, mh.data());
    for (auto& m : mh) m = m / (1.0 + std::exp(-m));
    vec_mat(mh.data(), blk.mlp.fc_out.W->value, tmp.data());
    for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
}

inline void linear_row(const double* x, const nn::Linear& l, double* out) {
    vec_mat(x, l.W->value, out);
    if (l.b)
        for (int j = 0; j < l.W->value.cols; ++j) out[j] += l.b->value.v[static_cast<size_t>(j)];
}

}  // namespace

void DraftSession::push_slot(const std::vector<double>& g_row, int token, int tag) {
    const int D = model_.tcfg_.dim;
    const int pos = total_slots();
    if (pos >= model_.tcfg_.max_seq) throw ProtocolError("draft: position exceeds context budget");
    if (token < 0 || token >= model_.tcfg_.vocab) throw InputError("draft: token out of vocab");

    std::vector<double> in(static_cast<size_t>(2 * D));
    std::copy(g_row.begin(), g_row.end(), in.begin());
    const Mat& table = model_.emb_[static_cast<size_t>(tag)]->value;
    std::copy(table.row(token), table.row(token) + D, in.begin() + D);

    std::vector<double> x(static_cast<size_t>(D));
    linear_row(in.data(), model_.fc2_, x.data());
    const double* p = model_.pos_->value.row(pos);
    for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] += p[j];

    for (size_t l = 0; l < model_.draft_blocks_.size(); ++l)
        block_step(model_.draft_blocks_[l], model_.tcfg_.heads, x, k_cache_[l], v_cache_[l]);
    hidden_.push_back(std::move(x));
}

void DraftSession::append_committed(const LayerFeatureStack& stack, std::span<const int> tokens,
                                    std::span<const int> tags) {
    discard_drafted();
    if (stack.seq != static_cast<int>(tokens.size()))
        throw ProtocolError("draft: feature stack and token count differ");
    if (stack.seq < committed_) throw ProtocolError("draft: stack shorter than committed prefix");

    const int D = model_.tcfg_.dim;
    const int Q = model_.cfg_.num_meta_queries;
    std::vector<double> f_c(static_cast<size_t>(Q) * D), f1(static_cast<size_t>(D));
    for (int s = committed_; s < stack.seq; ++s) {
        // Cross-attention aggregation + residual, then fc1, then the
        // aggregation decoder layer (incremental, causal over committed slots).
        Graph g(false);
        ad::Tape& t = g.tape();
        int fq = t.constant(model_.fq_->value);
        int fi = t.constant(stack.token_features(s));
        int ca = model_.ca_.forward(g, fq, fi, nullptr);
        const Mat& ca_out = t.val(ca);  // [Q x D], flatten row-major
        auto res = stack.residual_concat(s);
        for (size_t i = 0; i < f_c.size(); ++i) f_c[i] = ca_out.v[i] + res[i];

        linear_row(f_c.data(), model_.fc1_, f1.data());
        std::vector<double> f_in = f1;
        block_step(model_.agg_dec_, model_.tcfg_.heads, f_in, agg_k_, agg_v_);

        push_slot(f_in, tokens[static_cast<size_t>(s)], tags.empty() ? 0 : tags[static_cast<size_t>(s)]);
        committed_++;
    }
}

std::vector<double> DraftSession::last_logits() const {
    if (hidden_.empty()) throw ProtocolError("draft: no slots yet");
    const int D = model_.tcfg_.dim;
    std::vector<double> n(static_cast<size_t>(D));
    rmsnorm_row(hidden_.back().data(), model_.final_norm_.gain->value.v.data(), D, n.data());
    std::vector<double> logits(static_cast<size_t>(model_.tcfg_.vocab));
    vec_mat(n.data(), model_.head_.W->value, logits.data());
    return logits;
}

std::vector<double> DraftSession::chain_step(int token) {
    if (hidden_.empty()) throw ProtocolError("draft: chain_step before any committed slot");
    push_slot(hidden_[hidden_.size() - 1], token, 0);
    return last_logits();
}

std::vector<int> DraftSession::chain(int k) {
    if (k < 1) throw InputError("draft: k must be >= 1");
    if (committed_ < 1) throw ProtocolError("draft: chain before any committed slot");
    if (committed_ + k > model_.tcfg_.max_seq)
        throw ProtocolError("draft: k exceeds the context budget");
    std::vector<int> proposals;
    proposals.reserve(static_cast<size_t>(k));
    std::vector<double> logits = last_logits();
    for (int i = 0; i < k; ++i) {
        int best = 0;
        for (int j = 1; j < static_cast<int>(logits.size()); ++j)
            if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
        proposals.push_back(best);
        if (i + 1 < k) logits = chain_step(best);
    }
    return proposals;
}

void DraftSession::discard_drafted() {
    const int D = model_.tcfg_.dim;
    hidden_.resize(static_cast<size_t>(committed_));
    for (size_t l = 0; l < k_cache_.size(); ++l) {
        k_cache_[l].resize(static_cast<size_t>(committed_) * D);
        v_cache_[l].resize(static_cast<size_t>(committed_) * D);
    }
}

// --- loss ---------------------------------------------------------------------

double draft_loss(const std::vector<double>& p_target, const std::vector<double>& p_draft,
                  double lambda, bool* floored) {
    if (p_target.size() != p_draft.size() || p_target.empty())
        throw InputError("draft_loss: distribution sizes differ");
    if (lambda < 0.0) throw InputError("draft_loss: lambda must be nonnegative");
    auto validate = [](const std::vector<double>& p, const char* who) {
        double sum = 0.0;
        for (double x : p) {
            if (x < 0.0) throw InputError(std::string("draft_loss: ") + who + " has negative mass");
            sum += x;
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw InputError(std::string("draft_loss: ") + who + " does not sum to 1");
    };
    validate(p_target, "p_target");
    validate(p_draft, "p_draft");

    constexpr double kFloor = 1e-12;
    bool hit = false;
    double kl = 0.0;
    int amax = 0;
    for (size_t v = 0; v < p_target.size(); ++v) {
        if (p_target[v] > p_target[static_cast<size_t>(amax)]) amax = static_cast<int>(v);
        if (p_target[v] > 0.0) {
            double q = p_draft[v];
            if (q < kFloor) {
                q = kFloor;
                hit = true;
            }
            kl += p_target[v] * (std::log(p_target[v]) - std::log(q));
        }
    }
    double q_amax = p_draft[static_cast<size_t>(amax)];
    if (q_amax < kFloor) {
        q_amax = kFloor;
        hit = true;
    }
    if (floored) *floored = hit;
    return kl + lambda * (-std::log(q_amax));
}

// --- training -------------------------------------------------------------------

namespace {

struct PreparedSeq {
    std::vector<int> tokens;
    std::vector<int> tags;
    LayerFeatureStack stack;
    Mat probs;                        // [S x V] target distributions
    std::vector<int> amax;            // target argmax per row (lowest-index ties)
    std::vector<double> neg_entropy;  // sum p*log p per row
};

PreparedSeq prepare_sequence(const TargetModel& target, const std::vector<int>& tokens,
                             const std::vector<int>& tags) {
    PreparedSeq out;
    out.tokens = tokens;
    out.tags = tags;
    Mat logits = target.forward(tokens, &out.stack, tags);
    const int V = logits.cols;
    out.probs = Mat(logits.rows, V);
    out.amax.resize(static_cast<size_t>(logits.rows));
    out.neg_entropy.resize(static_cast<size_t>(logits.rows));
    for (int i = 0; i < logits.rows; ++i) {
        const double* row = logits.row(i);
        double mx = row[0];
        int am = 0;
        for (int j = 1; j < V; ++j)
            if (row[j] > mx) {
                mx = row[j];
                am = j;
            }
        double z = 0.0;
        double* p = out.probs.row(i);
        for (int j = 0; j < V; ++j) {
            p[j] = std::exp(row[j] - mx);
            z += p[j];
        }
        double ne = 0.0;
        for (int j = 0; j < V; ++j) {
            p[j] /= z;
            if (p[j] > 0.0) ne += p[j] * std::log(p[j]);
        }
        out.amax[static_cast<size_t>(i)] = am;
        out.neg_entropy[static_cast<size_t>(i)] = ne;
    }
    return out;
}

// Eq.-style loss on tape: mean over `rows` of KL(p_t || p_d) + lambda*CE.
int sequence_loss(Graph& g, int logits, const PreparedSeq& seq, const std::vector<int>& rows,
                  double lambda) {
    ad::Tape& t = g.tape();
    const Mat& L = t.val(logits);
    Mat w(L.rows, L.cols);
    double constant = 0.0;
    double inv_n = 1.0 / static_cast<double>(rows.size());
    for (int r : rows) {
        const double* p = seq.probs.row(r);
        double* wr = w.row(r);
        for (int j = 0; j < L.cols; ++j) wr[j] = -p[j] * inv_n;
        wr[seq.amax[static_cast<size_t>(r)]] -= lambda * inv_n;
        constant += seq.neg_entropy[static_cast<size_t>(r)] * inv_n;
    }
    int logp = t.log_softmax_rows(logits);
    return t.add_scalar(t.dot_const(logp, std::move(w)), constant);
}

}  // namespace

DraftTrainResult train_draft(DraftModel& draft, const TargetModel& target,
                             const SelfAnswerData& data, const DraftTrainConfig& tc, uint64_t seed) {
    if (data.sequences.empty()) throw InputError("train_draft: no training sequences");
    if (!data.tags.empty() && data.tags.size() != data.sequences.size())
        throw InputError("train_draft: tags/sequences mismatch");

    // The target is frozen: all expensive context (features, distributions)
    // is computed once up front.
    std::vector<PreparedSeq> prepared;
    prepared.reserve(data.sequences.size());
    for (size_t i = 0; i < data.sequences.size(); ++i) {
        if (data.sequences[i].size() < 3) throw InputError("train_draft: sequence too short");
        prepared.push_back(prepare_sequence(target, data.sequences[i],
                                            data.tags.empty() ? std::vector<int>{} : data.tags[i]));
    }

    const double lambda = draft.config().effective_lambda();
    const int passes = std::max(1, draft.config().train_passes);
    Rng batch_rng = Rng(seed).stream("draft-batches");
    ad::Adam opt({.lr = tc.lr, .grad_clip = tc.grad_clip});
    DraftTrainResult result;
    result.loss_history.reserve(static_cast<size_t>(tc.steps));

    for (int step = 0; step < tc.steps; ++step) {
        double step_loss = 0.0;
        for (int b = 0; b < tc.batch; ++b) {
            const PreparedSeq& seq =
                prepared[static_cast<size_t>(batch_rng.uniform_int(static_cast<int>(prepared.size())))];
            const int S = static_cast<int>(seq.tokens.size());
            const int D = target.config().dim;

            Graph g(true);
            ad::Tape& t = g.tape();
            int f_c = draft.aggregate_features_graph(g, seq.stack);
            int f_in = draft.intermediate_forward_graph(g, f_c);

            // Pass 1 uses true intermediate features at every slot.
            int hidden = -1;
            int logits = draft.decode_stack_graph(g, f_in, seq.tokens, seq.tags, 0, &hidden);
            std::vector<int> rows;
            for (int r = 0; r + 1 < S; ++r) rows.push_back(r);
            int total = sequence_loss(g, logits, seq, rows, lambda);

            // Passes r >= 2 recycle the previous pass's hidden states
            // (detached) as feature inputs, shifted one slot right, matching
            // how chain decoding consumes the draft's own outputs.
            // Copies: tape storage reallocates as later passes add nodes.
            Mat h_prev = t.val(hidden);
            Mat f_in_vals = t.val(f_in);
            for (int pass = 2; pass <= passes; ++pass) {
                Mat g_rows(S, D);
                for (int j = 0; j < S; ++j) {
                    const double* src = j < pass - 1 ? f_in_vals.row(j) : h_prev.row(j - 1);
                    std::copy(src, src + D, g_rows.row(j));
                }
                int hr = -1;
                int logits_r =
                    draft.decode_stack_graph(g, t.constant(std::move(g_rows)), seq.tokens,
                                             seq.tags, 0, &hr);
                std::vector<int> rows_r;
                for (int r = pass - 1; r + 1 < S; ++r) rows_r.push_back(r);
                if (rows_r.empty()) break;  // sequence shorter than the recycle depth
                total = t.add(total, sequence_loss(g, logits_r, seq, rows_r, lambda));
                h_prev = t.val(hr);
            }

            total = t.scale(total, 1.0 / static_cast<double>(passes));
            g.backward(total);
            step_loss += t.val(total).v[0];
        }
        result.loss_history.push_back(step_loss / tc.batch);
        if (!std::isfinite(result.loss_history.back()))
            throw NumericError("train_draft: non-finite loss", step);
        opt.step(draft.params());
    }
    result.final_loss = result.loss_history.empty() ? 0.0 : result.loss_history.back();
    return result;
}

}  // namespace hyperlab
