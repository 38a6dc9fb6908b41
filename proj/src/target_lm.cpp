#include "hyperlab/target_lm.hpp"

#include <algorithm>
#include <cmath>

#include "hyperlab/checkpoint.hpp"
#include "hyperlab/errors.hpp"

namespace hyperlab {

using ad::Graph;
using ad::Mat;

namespace {
bool default_taps_collide(int L) { return !(1 < L / 2 && L / 2 < L - 2); }
}  // namespace

int TargetConfig::low() const {
    if (feat_low >= 0) return feat_low;
    return default_taps_collide(num_layers) ? 0 : 1;
}

int TargetConfig::mid() const {
    if (feat_mid >= 0) return feat_mid;
    return num_layers / 2;
}

int TargetConfig::high() const {
    if (feat_high >= 0) return feat_high;
    return default_taps_collide(num_layers) ? num_layers - 1 : num_layers - 2;
}

void TargetConfig::validate() const {
    if (num_layers < 3) throw ConfigError("target: need at least 3 layers for low/mid/high taps");
    if (dim <= 0 || heads <= 0 || vocab <= 0 || max_seq <= 0 || num_segments <= 0)
        throw ConfigError("target: all dimensions must be positive");
    if (dim % heads != 0) throw ConfigError("target: dim must be divisible by heads");
    int lo = low(), mi = mid(), hi = high();
    if (!(lo < mi && mi < hi) || lo < 0 || hi >= num_layers)
        throw ConfigError("target: feature taps must satisfy 0 <= low < mid < high < L");
}

nlohmann::json TargetConfig::to_json() const {
    return {{"num_layers", num_layers}, {"dim", dim},         {"heads", heads},
            {"vocab", vocab},           {"max_seq", max_seq}, {"mlp_hidden", mlp_hidden},
            {"num_segments", num_segments}, {"feat_low", feat_low}, {"feat_mid", feat_mid},
            {"feat_high", feat_high}};
}

TargetConfig TargetConfig::from_json(const nlohmann::json& j) {
    TargetConfig c;
    c.num_layers = j.at("num_layers");
    c.dim = j.at("dim");
    c.heads = j.at("heads");
    c.vocab = j.at("vocab");
    c.max_seq = j.at("max_seq");
    c.mlp_hidden = j.value("mlp_hidden", 0);
    c.num_segments = j.value("num_segments", 1);
    c.feat_low = j.value("feat_low", -1);
    c.feat_mid = j.value("feat_mid", -1);
    c.feat_high = j.value("feat_high", -1);
    return c;
}

Mat LayerFeatureStack::token_features(int s) const {
    Mat m(layers, dim);
    std::copy(row(s, 0), row(s, 0) + static_cast<size_t>(layers) * dim, m.v.begin());
    return m;
}

std::vector<double> LayerFeatureStack::residual_concat(int s) const {
    std::vector<double> out(static_cast<size_t>(3) * dim);
    std::copy(row(s, low), row(s, low) + dim, out.begin());
    std::copy(row(s, mid), row(s, mid) + dim, out.begin() + dim);
    std::copy(row(s, high), row(s, high) + dim, out.begin() + 2 * dim);
    return out;
}

bool LayerFeatureStack::finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

TargetModel::TargetModel(TargetConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng(init_seed).stream("target-init");
    for (int s = 0; s < cfg_.num_segments; ++s)
        emb_.push_back(&params_.add("emb.seg" + std::to_string(s),
                                    ad::randn(rng, cfg_.vocab, cfg_.dim, 0.02)));
    pos_ = &params_.add("pos", ad::randn(rng, cfg_.max_seq, cfg_.dim, 0.02));
    for (int l = 0; l < cfg_.num_layers; ++l)
        blocks_.push_back(nn::DecoderBlock::create(params_, "layer" + std::to_string(l), cfg_.dim,
                                                   cfg_.heads, cfg_.mlp(), rng));
    final_norm_ = nn::RmsNorm::create(params_, "final_norm", cfg_.dim);
    head_ = nn::Linear::create(params_, "head", cfg_.dim, cfg_.vocab, rng,
                               0.6 / std::sqrt(static_cast<double>(cfg_.dim)), false);
}

const ad::Param& TargetModel::token_table(int segment) const {
    if (segment < 0 || segment >= static_cast<int>(emb_.size()))
        throw InputError("target: bad segment index");
    return *emb_[static_cast<size_t>(segment)];
}

void TargetModel::validate_tokens(std::span<const int> tokens, std::span<const int> tags) const {
    if (static_cast<int>(tokens.size()) > cfg_.max_seq)
        throw InputError("target: sequence exceeds max_seq");
    for (int t : tokens)
        if (t < 0 || t >= cfg_.vocab) throw InputError("target: token id out of vocab");
    if (!tags.empty()) {
        if (tags.size() != tokens.size()) throw InputError("target: tags length mismatch");
        for (int s : tags)
            if (s < 0 || s >= cfg_.num_segments) throw InputError("target: bad segment tag");
    }
}

Mat TargetModel::forward(std::span<const int> tokens, LayerFeatureStack* features,
                         std::span<const int> tags) const {
    TargetSession session(*this);
    Mat logits = session.extend(tokens, tags);
    if (features) *features = session.features();
    return logits;
}

int TargetModel::forward_graph(Graph& g, std::span<const int> tokens,
                               std::span<const int> tags) const {
    validate_tokens(tokens, tags);
    if (tokens.empty()) throw InputError("target: empty sequence");
    ad::Tape& t = g.tape();
    const int S = static_cast<int>(tokens.size());

    // Combined embedding table so mixed-segment rows stay one gather.
    int table;
    std::vector<int> idx(tokens.begin(), tokens.end());
    if (cfg_.num_segments == 1) {
        table = g.bind(*emb_[0]);
    } else {
        std::vector<int> parts;
        for (auto* e : emb_) parts.push_back(g.bind(*e));
        table = t.concat_rows(std::span<const int>(parts.data(), parts.size()));
        for (int i = 0; i < S; ++i)
            if (!tags.empty()) idx[static_cast<size_t>(i)] += tags[static_cast<size_t>(i)] * cfg_.vocab;
    }
    int x = t.gather_rows(table, idx);
    x = t.add(x, t.slice_rows(g.bind(*pos_), 0, S));

    Mat mask = nn::causal_mask(S, S, 0);
    for (const auto& b : blocks_) x = b.forward(g, x, &mask);
    x = final_norm_.forward(g, x);
    return head_.forward(g, x);
}

double TargetModel::perplexity(const std::vector<std::vector<int>>& sequences) const {
    double nll = 0.0;
    long count = 0;
    for (const auto& seq : sequences) {
        if (seq.size() < 2) continue;
        Mat logits = forward(seq);
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
            const double* row = logits.row(static_cast<int>(i));
            double mx = row[0];
            for (int j = 1; j < cfg_.vocab; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < cfg_.vocab; ++j) z += std::exp(row[j] - mx);
            nll -= row[seq[i + 1]] - mx - std::log(z);
            count++;
        }
    }
    if (count == 0) throw InputError("perplexity: no scored tokens");
    return std::exp(nll / static_cast<double>(count));
}

void TargetModel::save(const std::string& path, uint64_t seed, nlohmann::json metrics) const {
    nlohmann::json m;
    m["stage"] = "target";
    m["config"] = cfg_.to_json();
    m["seed"] = seed;
    m["parent_hash"] = "";
    if (!metrics.is_null()) m["metrics"] = metrics;
    std::vector<const ad::Param*> tensors;
    for (const ad::Param* p : params_.all()) tensors.push_back(p);
    ckpt::save(path, std::move(m), tensors);
}

TargetModel TargetModel::load(const std::string& path) {
    ckpt::Loaded file = ckpt::load(path);
    if (file.stage() != "target")
        throw LineageError("expected a target checkpoint, got stage '" + file.stage() + "'");
    TargetModel model(TargetConfig::from_json(file.manifest.at("config")), 0);
    ckpt::load_into(file, model.params_);
    return model;
}

// --- incremental evaluator ---------------------------------------------------

TargetSession::TargetSession(const TargetModel& model) : model_(model) {
    const TargetConfig& c = model.cfg_;
    k_cache_.resize(static_cast<size_t>(c.num_layers));
    v_cache_.resize(static_cast<size_t>(c.num_layers));
    features_ = LayerFeatureStack(0, c.num_layers, c.dim, c.low(), c.mid(), c.high());
}

void TargetSession::reset() {
    tokens_.clear();
    for (auto& k : k_cache_) k.clear();
    for (auto& v : v_cache_) v.clear();
    features_.seq = 0;
    features_.data.clear();
}

void TargetSession::rollback(int new_length) {
    if (new_length < 0 || new_length > length()) throw ProtocolError("rollback: bad length");
    const TargetConfig& c = model_.cfg_;
    tokens_.resize(static_cast<size_t>(new_length));
    for (int l = 0; l < c.num_layers; ++l) {
        k_cache_[static_cast<size_t>(l)].resize(static_cast<size_t>(new_length) * c.dim);
        v_cache_[static_cast<size_t>(l)].resize(static_cast<size_t>(new_length) * c.dim);
    }
    features_.seq = new_length;
    features_.data.resize(static_cast<size_t>(new_length) * c.num_layers * c.dim);
}

namespace {

// out[j] += x[k] * W[k][j]; accumulation order matches the tape's gemm so the
// two forward paths agree to the last bit.
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

}  // namespace

Mat TargetSession::extend(std::span<const int> tokens, std::span<const int> tags) {
    const TargetConfig& c = model_.cfg_;
    if (tokens.empty()) throw InputError("extend: no tokens");
    model_.validate_tokens(tokens, tags);
    if (length() + static_cast<int>(tokens.size()) > c.max_seq)
        throw InputError("extend: sequence exceeds max_seq");

    const int D = c.dim, H = c.heads, dh = D / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat logits(static_cast<int>(tokens.size()), c.vocab);

    std::vector<double> x(static_cast<size_t>(D)), h(static_cast<size_t>(D));
    std::vector<double> q(static_cast<size_t>(D)), att(static_cast<size_t>(D)), tmp(static_cast<size_t>(D));
    std::vector<double> mlp_h(static_cast<size_t>(c.mlp()));
    std::vector<double> scores;

    for (size_t n = 0; n < tokens.size(); ++n) {
        const int pos = length();
        const int tok = tokens[n];
        const int tag = tags.empty() ? 0 : tags[n];
        const Mat& table = model_.emb_[static_cast<size_t>(tag)]->value;
        const double* e = table.row(tok);
        const double* p = model_.pos_->value.row(pos);
        for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] = e[j] + p[j];

        features_.seq = pos + 1;
        features_.data.resize(static_cast<size_t>(pos + 1) * c.num_layers * D);

        for (int l = 0; l < c.num_layers; ++l) {
            const nn::DecoderBlock& blk = model_.blocks_[static_cast<size_t>(l)];
            auto& kc = k_cache_[static_cast<size_t>(l)];
            auto& vc = v_cache_[static_cast<size_t>(l)];

            rmsnorm_row(x.data(), blk.norm1.gain->value.v.data(), D, h.data());
            vec_mat(h.data(), blk.attn.wq.W->value, q.data());
            kc.resize(static_cast<size_t>(pos + 1) * D);
            vc.resize(static_cast<size_t>(pos + 1) * D);
            vec_mat(h.data(), blk.attn.wk.W->value, kc.data() + static_cast<size_t>(pos) * D);
            vec_mat(h.data(), blk.attn.wv.W->value, vc.data() + static_cast<size_t>(pos) * D);

            scores.resize(static_cast<size_t>(pos + 1));
            for (int hd = 0; hd < H; ++hd) {
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
            vec_mat(tmp.data(), blk.attn.wo.W->value, att.data());
            for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] += att[static_cast<size_t>(j)];

            rmsnorm_row(x.data(), blk.norm2.gain->value.v.data(), D, h.data());
            vec_mat(h.data(), blk.mlp.fc_in.W->value, mlp_h.data());
            for (auto& m : mlp_h) m = m / (1.0 + std::exp(-m));
            vec_mat(mlp_h.data(), blk.mlp.fc_out.W->value, tmp.data());
            for (int j = 0; j < D; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];

            std::copy(x.begin(), x.end(), features_.row(pos, l));
        }

        rmsnorm_row(x.data(), model_.final_norm_.gain->value.v.data(), D, h.data());
        vec_mat(h.data(), model_.head_.W->value, logits.row(static_cast<int>(n)));
        tokens_.push_back(tok);
    }
    return logits;
}

namespace {

int argmax_row(const double* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

}  // namespace

TargetTrainResult train_target(TargetModel& model, const SyntheticCorpus& corpus,
                               const TargetTrainConfig& tc, uint64_t seed) {
    if (corpus.sequences.empty()) throw InputError("train_target: empty corpus");
    const TargetConfig& c = model.config();
    if (corpus.vocab > c.vocab) throw InputError("train_target: corpus vocab exceeds model vocab");

    // Deterministic split: shuffle a copy of the index set, hold out the tail.
    Rng split_rng = Rng(seed).stream("target-split");
    std::vector<size_t> order(corpus.sequences.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<size_t>(split_rng.uniform_int(static_cast<int>(i) + 1))]);
    size_t holdout_n = std::max<size_t>(1, static_cast<size_t>(static_cast<double>(order.size()) *
                                                               tc.holdout_fraction));
    if (holdout_n >= order.size()) holdout_n = order.size() / 2;
    std::vector<std::vector<int>> train_set, holdout_set;
    for (size_t i = 0; i < order.size(); ++i) {
        const auto& seq = corpus.sequences[order[i]];
        if (i + holdout_n >= order.size()) holdout_set.push_back(seq);
        else train_set.push_back(seq);
    }
    if (train_set.empty()) throw InputError("train_target: corpus too small to split");

    Rng batch_rng = Rng(seed).stream("target-batches");
    ad::Adam opt({.lr = tc.lr, .grad_clip = tc.grad_clip});
    double final_loss = 0.0;
    for (int step = 0; step < tc.steps; ++step) {
        Graph g(true);
        std::vector<int> losses;
        for (int b = 0; b < tc.batch; ++b) {
            const auto& seq = train_set[static_cast<size_t>(batch_rng.uniform_int(
                static_cast<int>(train_set.size())))];
            int logits = model.forward_graph(g, seq);
            int logp = g.tape().log_softmax_rows(logits);
            std::vector<int> targets(seq.size(), 0), rows;
            for (size_t i = 0; i + 1 < seq.size(); ++i) {
                targets[i] = seq[i + 1];
                rows.push_back(static_cast<int>(i));
            }
            losses.push_back(g.tape().nll_rows(logp, targets, rows));
        }
        int total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = g.tape().add(total, losses[static_cast<size_t>(i)]);
        total = g.tape().scale(total, 1.0 / static_cast<double>(losses.size()));
        double loss = g.tape().val(total).v[0];
        if (!std::isfinite(loss)) throw NumericError("train_target: non-finite loss", step);
        g.backward(total);
        opt.step(model.params());
        final_loss = loss;
    }

    TargetTrainResult result;
    result.final_loss = final_loss;
    result.holdout_perplexity = model.perplexity(holdout_set);

    // Unigram baseline from training-set counts, scored on the same holdout.
    SyntheticCorpus train_corpus;
    train_corpus.vocab = corpus.vocab;
    train_corpus.sequences = train_set;
    std::vector<double> uni = train_corpus.unigram_probs();
    double nll = 0.0;
    long count = 0;
    for (const auto& seq : holdout_set)
        for (size_t i = 1; i < seq.size(); ++i) {
            nll -= std::log(uni[static_cast<size_t>(seq[i])]);
            count++;
        }
    result.unigram_perplexity = std::exp(nll / static_cast<double>(count));

    if (result.holdout_perplexity >= result.unigram_perplexity)
        throw NumericError("train_target: model did not beat the unigram baseline (ppl " +
                           std::to_string(result.holdout_perplexity) + " vs " +
                           std::to_string(result.unigram_perplexity) + ")");
    return result;
}

std::vector<std::vector<int>> generate_self_answers(const TargetModel& model,
                                                    const std::vector<std::vector<int>>& prompts,
                                                    int max_len, uint64_t seed, DecodeMode mode) {
    if (max_len < 0) throw InputError("generate_self_answers: negative max_len");
    std::vector<std::vector<int>> out;
    out.reserve(prompts.size());
    Rng root(seed);
    for (size_t pi = 0; pi < prompts.size(); ++pi) {
        const auto& prompt = prompts[pi];
        if (prompt.empty()) throw InputError("generate_self_answers: empty prompt");
        std::vector<int> seq = prompt;
        if (max_len == 0) {
            out.push_back(std::move(seq));
            continue;
        }
        Rng stream = root.stream(static_cast<uint64_t>(pi));  // one RNG stream per sequence
        TargetSession session(model);
        const int V = model.config().vocab;
        Mat logits = session.extend(prompt);
        std::vector<double> row(logits.row(logits.rows - 1), logits.row(logits.rows - 1) + V);
        std::vector<double> probs;
        for (int step = 0; step < max_len; ++step) {
            int next;
            if (mode == DecodeMode::Greedy) {
                next = argmax_row(row.data(), V);
            } else {
                probs = row;
                double mx = *std::max_element(probs.begin(), probs.end());
                for (auto& p : probs) p = std::exp(p - mx);
                next = stream.categorical(probs);
            }
            seq.push_back(next);
            if (static_cast<int>(seq.size()) >= model.config().max_seq) break;
            int one[1] = {next};
            Mat step_logits = session.extend(std::span<const int>(one, 1));
            row.assign(step_logits.row(0), step_logits.row(0) + V);
        }
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<int> greedy_decode(const TargetModel& model, const std::vector<int>& prompt,
                               int new_tokens) {
    auto out = generate_self_answers(model, {prompt}, new_tokens);
    return out[0];
}

}  // namespace hyperlab
