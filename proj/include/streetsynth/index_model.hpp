#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "streetsynth/geo.hpp"
#include "streetsynth/matrix.hpp"
#include "streetsynth/util.hpp"

namespace streetsynth {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// The token vocabulary is the codebook plus BOS and PAD. seq_len is the
// window cell count (16x16 -> 256 in the pipeline); smaller values exist for
// tests.
struct ModelConfig {
    int codebook_size = 512;
    int embed_dim = 64;
    int heads = 8;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int seq_len = 256;
    int ffn_dim = 0;  // 0 -> 4 * embed_dim
    int cell_ctx_dim = 16;
    int pixel_ctx_dim = 512;
    std::uint64_t seed = 1;

    int vocab() const { return codebook_size + 2; }
    int bos_id() const { return codebook_size; }
    int pad_id() const { return codebook_size + 1; }
    int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * embed_dim; }
    int head_dim() const { return embed_dim / heads; }
    int window_cells() const {
        const int w = static_cast<int>(std::lround(std::sqrt(static_cast<double>(seq_len))));
        return w;
    }

    void validate() const {
        if (embed_dim % heads != 0)
            throw ConfigMismatch("embed_dim must be divisible by heads");
        if (codebook_size < 1 || seq_len < 1 || encoder_layers < 0 || decoder_layers < 1)
            throw ConfigMismatch("invalid model configuration");
    }

    nlohmann::json to_json() const {
        return {{"codebook_size", codebook_size}, {"embed_dim", embed_dim},
                {"heads", heads},                 {"encoder_layers", encoder_layers},
                {"decoder_layers", decoder_layers},{"seq_len", seq_len},
                {"ffn_dim", ffn_dim},             {"cell_ctx_dim", cell_ctx_dim},
                {"pixel_ctx_dim", pixel_ctx_dim}, {"seed", seed}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.codebook_size = j.at("codebook_size").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.heads = j.at("heads").get<int>();
        c.encoder_layers = j.at("encoder_layers").get<int>();
        c.decoder_layers = j.at("decoder_layers").get<int>();
        c.seq_len = j.at("seq_len").get<int>();
        c.ffn_dim = j.at("ffn_dim").get<int>();
        c.cell_ctx_dim = j.at("cell_ctx_dim").get<int>();
        c.pixel_ctx_dim = j.at("pixel_ctx_dim").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.validate();
        return c;
    }
};

// Conditioning for one window: per cell a density vector (cell context) and
// the flattened P1-distance and land-water patches (pixel context).
struct ConditionWindow {
    Matrix cc;  // cells x cell_ctx_dim
    Matrix cp;  // cells x pixel_ctx_dim
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct NamedTensor {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
};

namespace detail {

struct AttnW {
    NamedTensor *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};
struct LnW {
    NamedTensor *g, *b;
};
struct FfnW {
    NamedTensor *w1, *b1, *w2, *b2;
};
struct EncLayerW {
    LnW ln1;
    AttnW attn;
    LnW ln2;
    FfnW ffn;
};
struct DecLayerW {
    LnW ln1;
    AttnW self_attn;
    LnW ln2;
    AttnW cross_attn;
    LnW ln3;
    FfnW ffn;
};

}  // namespace detail

// All weights of the encoder-decoder model. Tensor order in `store` is the
// serialization order.
class TransformerParams {
public:
    ModelConfig config;

    explicit TransformerParams(const ModelConfig& cfg) : config(cfg) {
        cfg.validate();
        build();
        init_weights();
    }

    std::vector<NamedTensor>& tensors() { return store_; }
    const std::vector<NamedTensor>& tensors() const { return store_; }

    void zero_grads() {
        for (auto& t : store_) t.grad.zero();
    }

    // One Adam update over every tensor; t is the 1-based step.
    void adam_step(long t, double lr, double beta1, double beta2, double eps) {
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& ten : store_) {
            for (std::size_t i = 0; i < ten.value.a.size(); ++i) {
                const double g = ten.grad.a[i];
                ten.adam_m.a[i] = beta1 * ten.adam_m.a[i] + (1.0 - beta1) * g;
                ten.adam_v.a[i] = beta2 * ten.adam_v.a[i] + (1.0 - beta2) * g * g;
                const double mhat = ten.adam_m.a[i] / bc1;
                const double vhat = ten.adam_v.a[i] / bc2;
                ten.value.a[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    // Named access used by the forward/backward passes.
    NamedTensor* tok_embed;
    NamedTensor* pos_embed;
    NamedTensor *cc_w, *cc_b, *cp_w, *cp_b, *merge_w, *merge_b;
    std::vector<detail::EncLayerW> enc;
    detail::LnW enc_final;
    std::vector<detail::DecLayerW> dec;
    detail::LnW dec_final;
    NamedTensor *out_w, *out_b;

private:
    std::vector<NamedTensor> store_;

    NamedTensor* add(const std::string& name, int rows, int cols) {
        store_.push_back({name, Matrix(rows, cols), Matrix(rows, cols), Matrix(rows, cols),
                          Matrix(rows, cols)});
        return &store_.back();
    }
    detail::AttnW add_attn(const std::string& prefix, int d) {
        return {add(prefix + ".wq", d, d), add(prefix + ".bq", 1, d),
                add(prefix + ".wk", d, d), add(prefix + ".bk", 1, d),
                add(prefix + ".wv", d, d), add(prefix + ".bv", 1, d),
                add(prefix + ".wo", d, d), add(prefix + ".bo", 1, d)};
    }
    detail::LnW add_ln(const std::string& prefix, int d) {
        return {add(prefix + ".g", 1, d), add(prefix + ".b", 1, d)};
    }
    detail::FfnW add_ffn(const std::string& prefix, int d, int f) {
        return {add(prefix + ".w1", d, f), add(prefix + ".b1", 1, f),
                add(prefix + ".w2", f, d), add(prefix + ".b2", 1, d)};
    }

    void build() {
        // Tensor counts are fixed by the config; pointers stay valid because
        // the total is reserved up front.
        const int d = config.embed_dim, f = config.ffn();
        const std::size_t total = 8u + 1u +
                                  static_cast<std::size_t>(config.encoder_layers) * 16u + 2u +
                                  static_cast<std::size_t>(config.decoder_layers) * 26u + 2u + 2u;
        store_.reserve(total + 1);
        tok_embed = add("tok_embed", config.vocab(), d);
        pos_embed = add("pos_embed", config.seq_len, d);
        cc_w = add("ctx.cell.w", config.cell_ctx_dim, d);
        cc_b = add("ctx.cell.b", 1, d);
        cp_w = add("ctx.pixel.w", config.pixel_ctx_dim, d);
        cp_b = add("ctx.pixel.b", 1, d);
        merge_w = add("ctx.merge.w", 2 * d, d);
        merge_b = add("ctx.merge.b", 1, d);
        for (int l = 0; l < config.encoder_layers; ++l) {
            const std::string p = "enc." + std::to_string(l);
            detail::EncLayerW lw;
            lw.ln1 = add_ln(p + ".ln1", d);
            lw.attn = add_attn(p + ".attn", d);
            lw.ln2 = add_ln(p + ".ln2", d);
            lw.ffn = add_ffn(p + ".ffn", d, f);
            enc.push_back(lw);
        }
        enc_final = add_ln("enc.final_ln", d);
        for (int l = 0; l < config.decoder_layers; ++l) {
            const std::string p = "dec." + std::to_string(l);
            detail::DecLayerW lw;
            lw.ln1 = add_ln(p + ".ln1", d);
            lw.self_attn = add_attn(p + ".self", d);
            lw.ln2 = add_ln(p + ".ln2", d);
            lw.cross_attn = add_attn(p + ".cross", d);
            lw.ln3 = add_ln(p + ".ln3", d);
            lw.ffn = add_ffn(p + ".ffn", d, f);
            dec.push_back(lw);
        }
        dec_final = add_ln("dec.final_ln", d);
        out_w = add("out.w", d, config.vocab());
        out_b = add("out.b", 1, config.vocab());
    }

    void init_weights() {
        Rng rng(config.seed);
        for (auto& t : store_) {
            const std::string leaf = t.name.substr(t.name.rfind('.') + 1);
            if (leaf == "g") {
                std::fill(t.value.a.begin(), t.value.a.end(), 1.0);  // layer-norm gain
            } else if (leaf[0] == 'b' || t.name.rfind("out.", 0) == 0) {
                // Biases zero; the zero output head makes the untrained model
                // emit uniform logits (initial loss exactly ln(vocab)).
                t.value.zero();
            } else {
                for (auto& v : t.value.a) v = 0.02 * rng.gaussian();
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Forward / backward primitives
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kLnEps = 1e-5;

struct LnCache {
    Matrix x;       // input
    Matrix x_hat;   // normalized
    std::vector<double> inv_std;
};

inline void layernorm_forward(const Matrix& x, const LnW& w, Matrix& y, LnCache* cache) {
    const int n = x.rows, d = x.cols;
    y.resize(n, d);
    if (cache) {
        cache->x = x;
        cache->x_hat.resize(n, d);
        cache->inv_std.assign(n, 0.0);
    }
    for (int i = 0; i < n; ++i) {
        const double* xi = x.row(i);
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xi[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        double* yi = y.row(i);
        for (int j = 0; j < d; ++j) {
            const double xh = (xi[j] - mean) * inv;
            if (cache) cache->x_hat(i, j) = xh;
            yi[j] = xh * w.g->value(0, j) + w.b->value(0, j);
        }
        if (cache) cache->inv_std[i] = inv;
    }
}

inline void layernorm_backward(const LnCache& cache, const LnW& w, const Matrix& dy, Matrix& dx) {
    const int n = dy.rows, d = dy.cols;
    dx.resize(n, d);
    for (int i = 0; i < n; ++i) {
        const double inv = cache.inv_std[i];
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dxh = dy(i, j) * w.g->value(0, j);
            m1 += dxh;
            m2 += dxh * cache.x_hat(i, j);
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) {
            const double dxh = dy(i, j) * w.g->value(0, j);
            dx(i, j) = (dxh - m1 - cache.x_hat(i, j) * m2) * inv;
            w.g->grad(0, j) += dy(i, j) * cache.x_hat(i, j);
            w.b->grad(0, j) += dy(i, j);
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

struct FfnCache {
    Matrix x;    // input
    Matrix pre;  // pre-activation
    Matrix act;  // post-activation
};

inline void ffn_forward(const Matrix& x, const FfnW& w, Matrix& y, FfnCache* cache) {
    Matrix pre;
    linear_forward(x, w.w1->value, w.b1->value, pre);
    Matrix act(pre.rows, pre.cols);
    for (std::size_t i = 0; i < pre.a.size(); ++i) act.a[i] = gelu(pre.a[i]);
    linear_forward(act, w.w2->value, w.b2->value, y);
    if (cache) {
        cache->x = x;
        cache->pre = std::move(pre);
        cache->act = std::move(act);
    }
}

inline void ffn_backward(const FfnCache& cache, const FfnW& w, const Matrix& dy, Matrix& dx) {
    Matrix dact;
    linear_backward(cache.act, w.w2->value, dy, w.w2->grad, w.b2->grad, dact);
    for (std::size_t i = 0; i < dact.a.size(); ++i) dact.a[i] *= gelu_grad(cache.pre.a[i]);
    linear_backward(cache.x, w.w1->value, dact, w.w1->grad, w.b1->grad, dx);
}

// Numerically stable row softmax; -inf entries come out exactly 0.
inline void softmax_rows(Matrix& m) {
    for (int i = 0; i < m.rows; ++i) {
        double* row = m.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < m.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            row[j] = std::isinf(row[j]) && row[j] < 0 ? 0.0 : std::exp(row[j] - mx);
            sum += row[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < m.cols; ++j) row[j] *= inv;
    }
}

struct AttnCache {
    Matrix q_in, kv_in;
    Matrix q, k, v;               // n x d, m x d, m x d
    std::vector<Matrix> weights;  // per head n x m attention rows
    Matrix concat;                // n x d
};

// Multi-head attention; causal masks query i from keys j > i.
inline void attention_forward(const AttnW& w, const Matrix& q_in, const Matrix& kv_in,
                              bool causal, int heads, Matrix& y, AttnCache* cache) {
    const int d = q_in.cols;
    const int dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix q, k, v;
    linear_forward(q_in, w.wq->value, w.bq->value, q);
    linear_forward(kv_in, w.wk->value, w.bk->value, k);
    linear_forward(kv_in, w.wv->value, w.bv->value, v);
    const int n = q.rows, m = k.rows;

    Matrix concat(n, d);
    std::vector<Matrix> weights(static_cast<std::size_t>(heads));
    Matrix qh(n, dh), kh(m, dh), vh(m, dh), scores;
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < n; ++i)
            std::copy_n(q.row(i) + h * dh, dh, qh.row(i));
        for (int i = 0; i < m; ++i) {
            std::copy_n(k.row(i) + h * dh, dh, kh.row(i));
            std::copy_n(v.row(i) + h * dh, dh, vh.row(i));
        }
        matmul_nt(qh, kh, scores);
        for (std::size_t i = 0; i < scores.a.size(); ++i) scores.a[i] *= scale;
        if (causal) {
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < m; ++j)
                    scores(i, j) = -std::numeric_limits<double>::infinity();
        }
        softmax_rows(scores);
        Matrix out;
        matmul(scores, vh, out);
        for (int i = 0; i < n; ++i)
            std::copy_n(out.row(i), dh, concat.row(i) + h * dh);
        weights[h] = std::move(scores);
        scores = Matrix();
    }
    linear_forward(concat, w.wo->value, w.bo->value, y);
    if (cache) {
        cache->q_in = q_in;
        cache->kv_in = kv_in;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->weights = std::move(weights);
        cache->concat = std::move(concat);
    }
}

// dq_in is written; dkv_in is accumulated (self-attention passes the same
// matrix for both and cross-attention accumulates into the memory gradient).
inline void attention_backward(const AttnW& w, const AttnCache& cache, const Matrix& dy,
                               int heads, Matrix& dq_in, Matrix& dkv_in_acc) {
    const int d = cache.q.cols;
    const int dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int n = cache.q.rows, m = cache.k.rows;

    Matrix dconcat;
    linear_backward(cache.concat, w.wo->value, dy, w.wo->grad, w.bo->grad, dconcat);

    Matrix dq(n, d), dk(m, d), dv(m, d);
    Matrix qh(n, dh), kh(m, dh), vh(m, dh);
    Matrix dout_h(n, dh), dweights, dscores(n, m);
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < n; ++i) {
            std::copy_n(cache.q.row(i) + h * dh, dh, qh.row(i));
            std::copy_n(dconcat.row(i) + h * dh, dh, dout_h.row(i));
        }
        for (int i = 0; i < m; ++i) {
            std::copy_n(cache.k.row(i) + h * dh, dh, kh.row(i));
            std::copy_n(cache.v.row(i) + h * dh, dh, vh.row(i));
        }
        const Matrix& wts = cache.weights[h];
        // dV_h = wts^T * dout
        Matrix dvh(m, dh);
        matmul_tn_acc(wts, dout_h, dvh);
        // dweights = dout * V_h^T
        matmul_nt(dout_h, vh, dweights);
        // Softmax backward per row; masked entries have weight 0 so their
        // score gradient vanishes.
        for (int i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < m; ++j) dot += dweights(i, j) * wts(i, j);
            for (int j = 0; j < m; ++j)
                dscores(i, j) = wts(i, j) * (dweights(i, j) - dot) * scale;
        }
        // dQ_h = dscores * K_h ; dK_h = dscores^T * Q_h
        Matrix dqh;
        matmul(dscores, kh, dqh);
        Matrix dkh(m, dh);
        matmul_tn_acc(dscores, qh, dkh);
        for (int i = 0; i < n; ++i)
            std::copy_n(dqh.row(i), dh, dq.row(i) + h * dh);
        for (int i = 0; i < m; ++i) {
            std::copy_n(dkh.row(i), dh, dk.row(i) + h * dh);
            std::copy_n(dvh.row(i), dh, dv.row(i) + h * dh);
        }
    }

    linear_backward(cache.q_in, w.wq->value, dq, w.wq->grad, w.bq->grad, dq_in);
    Matrix dkv_tmp;
    linear_backward(cache.kv_in, w.wk->value, dk, w.wk->grad, w.bk->grad, dkv_tmp);
    add_inplace(dkv_in_acc, dkv_tmp);
    linear_backward(cache.kv_in, w.wv->value, dv, w.wv->grad, w.bv->grad, dkv_tmp);
    add_inplace(dkv_in_acc, dkv_tmp);
}

struct EncLayerCache {
    LnCache ln1;
    AttnCache attn;
    LnCache ln2;
    FfnCache ffn;
};

struct EncoderCache {
    Matrix cc, cp;          // inputs
    Matrix cc_proj, cp_proj, merged_in;
    std::vector<EncLayerCache> layers;
    LnCache final_ln;
};

struct DecLayerCache {
    LnCache ln1;
    AttnCache self_attn;
    LnCache ln2;
    AttnCache cross_attn;
    LnCache ln3;
    FfnCache ffn;
};

struct DecoderCache {
    std::vector<int> input_ids;
    Matrix memory;
    std::vector<DecLayerCache> layers;
    LnCache final_ln;
    Matrix final_hidden;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder / decoder passes
// ---------------------------------------------------------------------------

// Per-cell context embedding (independent linear projections, concatenated,
// re-projected, plus the shared positional embedding), then bidirectional
// self-attention layers. Returns the context memory consumed by the decoder's
// cross-attention.
inline Matrix encode_context(const ConditionWindow& window, const TransformerParams& params,
                             detail::EncoderCache* cache = nullptr) {
    const ModelConfig& cfg = params.config;
    const int n = window.cc.rows;
    if (window.cp.rows != n || window.cc.cols != cfg.cell_ctx_dim ||
        window.cp.cols != cfg.pixel_ctx_dim || n > cfg.seq_len)
        throw ShapeMismatch("encode_context: window shape does not match config");
    const int d = cfg.embed_dim;

    Matrix cc_proj, cp_proj;
    linear_forward(window.cc, params.cc_w->value, params.cc_b->value, cc_proj);
    linear_forward(window.cp, params.cp_w->value, params.cp_b->value, cp_proj);
    Matrix merged_in(n, 2 * d);
    for (int i = 0; i < n; ++i) {
        std::copy_n(cc_proj.row(i), d, merged_in.row(i));
        std::copy_n(cp_proj.row(i), d, merged_in.row(i) + d);
    }
    Matrix x;
    linear_forward(merged_in, params.merge_w->value, params.merge_b->value, x);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) += params.pos_embed->value(i, j);

    if (cache) {
        cache->cc = window.cc;
        cache->cp = window.cp;
        cache->cc_proj = cc_proj;
        cache->cp_proj = cp_proj;
        cache->merged_in = merged_in;
        cache->layers.resize(params.enc.size());
    }

    Matrix normed, sub;
    for (std::size_t l = 0; l < params.enc.size(); ++l) {
        const auto& lw = params.enc[l];
        detail::EncLayerCache* lc = cache ? &cache->layers[l] : nullptr;
        detail::layernorm_forward(x, lw.ln1, normed, lc ? &lc->ln1 : nullptr);
        detail::attention_forward(lw.attn, normed, normed, /*causal=*/false, cfg.heads, sub,
                                  lc ? &lc->attn : nullptr);
        add_inplace(x, sub);
        detail::layernorm_forward(x, lw.ln2, normed, lc ? &lc->ln2 : nullptr);
        detail::ffn_forward(normed, lw.ffn, sub, lc ? &lc->ffn : nullptr);
        add_inplace(x, sub);
    }
    Matrix memory;
    detail::layernorm_forward(x, params.enc_final, memory, cache ? &cache->final_ln : nullptr);
    return memory;
}

// Causal decoder over the BOS-shifted token sequence with cross-attention
// into the context memory. Returns n x vocab logits; row i depends only on
// tokens before position i and the memory.
inline Matrix forward(std::span<const int> tokens, const Matrix& memory,
                      const TransformerParams& params, detail::DecoderCache* cache = nullptr) {
    const ModelConfig& cfg = params.config;
    const int n = static_cast<int>(tokens.size());
    if (n < 1 || n > cfg.seq_len) throw ShapeMismatch("forward: sequence length out of range");
    if (memory.cols != cfg.embed_dim) throw ShapeMismatch("forward: memory width mismatch");
    const int d = cfg.embed_dim;

    // Shift right: input i is the previous token, BOS first.
    std::vector<int> ids(static_cast<std::size_t>(n));
    ids[0] = cfg.bos_id();
    for (int i = 1; i < n; ++i) ids[i] = tokens[i - 1];
    for (int i = 0; i < n; ++i)
        if (ids[i] < 0 || ids[i] >= cfg.vocab())
            throw IndexOutOfRange("forward: token id out of vocabulary");

    Matrix x(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            x(i, j) = params.tok_embed->value(ids[i], j) + params.pos_embed->value(i, j);

    if (cache) {
        cache->input_ids = ids;
        cache->memory = memory;
        cache->layers.resize(params.dec.size());
    }

    Matrix normed, sub;
    for (std::size_t l = 0; l < params.dec.size(); ++l) {
        const auto& lw = params.dec[l];
        detail::DecLayerCache* lc = cache ? &cache->layers[l] : nullptr;
        detail::layernorm_forward(x, lw.ln1, normed, lc ? &lc->ln1 : nullptr);
        detail::attention_forward(lw.self_attn, normed, normed, /*causal=*/true, cfg.heads, sub,
                                  lc ? &lc->self_attn : nullptr);
        add_inplace(x, sub);
        detail::layernorm_forward(x, lw.ln2, normed, lc ? &lc->ln2 : nullptr);
        detail::attention_forward(lw.cross_attn, normed, memory, /*causal=*/false, cfg.heads, sub,
                                  lc ? &lc->cross_attn : nullptr);
        add_inplace(x, sub);
        detail::layernorm_forward(x, lw.ln3, normed, lc ? &lc->ln3 : nullptr);
        detail::ffn_forward(normed, lw.ffn, sub, lc ? &lc->ffn : nullptr);
        add_inplace(x, sub);
    }
    Matrix hidden;
    detail::layernorm_forward(x, params.dec_final, hidden, cache ? &cache->final_ln : nullptr);
    if (cache) cache->final_hidden = hidden;
    Matrix logits;
    linear_forward(hidden, params.out_w->value, params.out_b->value, logits);
    return logits;
}

// Mean negative log-likelihood over non-PAD target positions.
inline double loss(const Matrix& logits, std::span<const int> targets,
                   const TransformerParams& params, Matrix* dlogits = nullptr) {
    const ModelConfig& cfg = params.config;
    if (logits.rows != static_cast<int>(targets.size()) || logits.cols != cfg.vocab())
        throw ShapeMismatch("loss: logits shape does not match targets");
    if (dlogits) dlogits->resize(logits.rows, logits.cols);

    long count = 0;
    for (int i = 0; i < logits.rows; ++i)
        if (targets[i] != cfg.pad_id()) ++count;
    if (count == 0) return 0.0;

    double total = 0.0;
    std::vector<double> probs(static_cast<std::size_t>(logits.cols));
    for (int i = 0; i < logits.rows; ++i) {
        const bool masked = targets[i] == cfg.pad_id();
        if (masked && !dlogits) continue;
        const double* row = logits.row(i);
        double mx = row[0];
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) {
            probs[j] = std::exp(row[j] - mx);
            sum += probs[j];
        }
        const double inv = 1.0 / sum;
        if (!masked) {
            const int t = targets[i];
            if (t < 0 || t >= logits.cols)
                throw IndexOutOfRange("loss: target id out of vocabulary");
            total += -(std::log(probs[t] * inv));
        }
        if (dlogits) {
            double* drow = dlogits->row(i);
            if (masked) {
                std::fill_n(drow, logits.cols, 0.0);
            } else {
                for (int j = 0; j < logits.cols; ++j)
                    drow[j] = (probs[j] * inv - (j == targets[i] ? 1.0 : 0.0)) /
                              static_cast<double>(count);
            }
        }
    }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

// Accumulates parameter gradients for the decoder and returns the gradient
// flowing into the context memory.
inline Matrix decoder_backward(const TransformerParams& params, const detail::DecoderCache& cache,
                               const Matrix& dlogits) {
    const ModelConfig& cfg = params.config;
    const int n = dlogits.rows, d = cfg.embed_dim;

    Matrix dx;
    linear_backward(cache.final_hidden, params.out_w->value, dlogits, params.out_w->grad,
                    params.out_b->grad, dx);
    Matrix tmp;
    detail::layernorm_backward(cache.final_ln, params.dec_final, dx, tmp);
    dx = std::move(tmp);

    Matrix dmemory(cache.memory.rows, cache.memory.cols);
    Matrix dsub, dnormed;
    for (int l = static_cast<int>(params.dec.size()) - 1; l >= 0; --l) {
        const auto& lw = params.dec[l];
        const auto& lc = cache.layers[l];
        // FFN block: x = x + ffn(ln3(x))
        detail::ffn_backward(lc.ffn, lw.ffn, dx, dsub);
        detail::layernorm_backward(lc.ln3, lw.ln3, dsub, dnormed);
        add_inplace(dx, dnormed);
        // Cross-attention block: x = x + attn(ln2(x), memory)
        Matrix dq_in;
        detail::attention_backward(lw.cross_attn, lc.cross_attn, dx, cfg.heads, dq_in, dmemory);
        detail::layernorm_backward(lc.ln2, lw.ln2, dq_in, dnormed);
        add_inplace(dx, dnormed);
        // Self-attention block: x = x + attn(ln1(x))
        Matrix dself(n, d);
        Matrix dq_in2;
        detail::attention_backward(lw.self_attn, lc.self_attn, dx, cfg.heads, dq_in2, dself);
        add_inplace(dq_in2, dself);
        detail::layernorm_backward(lc.ln1, lw.ln1, dq_in2, dnormed);
        add_inplace(dx, dnormed);
    }

    // Embedding gradients.
    for (int i = 0; i < n; ++i) {
        const int id = cache.input_ids[i];
        for (int j = 0; j < d; ++j) {
            params.tok_embed->grad(id, j) += dx(i, j);
            params.pos_embed->grad(i, j) += dx(i, j);
        }
    }
    return dmemory;
}

// Accumulates encoder parameter gradients given the memory gradient.
// Optionally reports the gradients w.r.t. the context inputs.
inline void encoder_backward(const TransformerParams& params, const detail::EncoderCache& cache,
                             const Matrix& dmemory, Matrix* dcc_out = nullptr,
                             Matrix* dcp_out = nullptr) {
    const ModelConfig& cfg = params.config;
    const int n = dmemory.rows, d = cfg.embed_dim;

    Matrix dx;
    detail::layernorm_backward(cache.final_ln, params.enc_final, dmemory, dx);

    Matrix dsub, dnormed;
    for (int l = static_cast<int>(params.enc.size()) - 1; l >= 0; --l) {
        const auto& lw = params.enc[l];
        const auto& lc = cache.layers[l];
        detail::ffn_backward(lc.ffn, lw.ffn, dx, dsub);
        detail::layernorm_backward(lc.ln2, lw.ln2, dsub, dnormed);
        add_inplace(dx, dnormed);
        Matrix dself(n, d);
        Matrix dq_in;
        detail::attention_backward(lw.attn, lc.attn, dx, cfg.heads, dq_in, dself);
        add_inplace(dq_in, dself);
        detail::layernorm_backward(lc.ln1, lw.ln1, dq_in, dnormed);
        add_inplace(dx, dnormed);
    }

    // Positional embedding rows shared with the decoder.
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) params.pos_embed->grad(i, j) += dx(i, j);

    Matrix dmerged;
    linear_backward(cache.merged_in, params.merge_w->value, dx, params.merge_w->grad,
                    params.merge_b->grad, dmerged);
    Matrix dcc_proj(n, d), dcp_proj(n, d);
    for (int i = 0; i < n; ++i) {
        std::copy_n(dmerged.row(i), d, dcc_proj.row(i));
        std::copy_n(dmerged.row(i) + d, d, dcp_proj.row(i));
    }
    Matrix dcc, dcp;
    linear_backward(cache.cc, params.cc_w->value, dcc_proj, params.cc_w->grad, params.cc_b->grad,
                    dcc);
    linear_backward(cache.cp, params.cp_w->value, dcp_proj, params.cp_w->grad, params.cp_b->grad,
                    dcp);
    if (dcc_out) *dcc_out = std::move(dcc);
    if (dcp_out) *dcp_out = std::move(dcp);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainItem {
    std::vector<int> tokens;  // window tokens in raster order; PAD outside
    ConditionWindow ctx;
};

struct TrainConfig {
    long steps = 5000;
    long warmup_steps = 1000;
    double learning_rate = 3e-4;
    int batch_size = 8;
    int grad_accum = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    long checkpoint_every = 0;
    std::function<void(const TransformerParams&, long)> checkpoint_fn;
    std::function<void(long, double, double)> metrics_fn;  // step, loss, lr
};

// Linear warmup to the base rate, then cosine annealing to zero.
inline double learning_rate_at(const TrainConfig& cfg, long step) {
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.learning_rate * static_cast<double>(step) /
               static_cast<double>(cfg.warmup_steps);
    if (step >= cfg.steps) return 0.0;
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(std::max<long>(cfg.steps - cfg.warmup_steps, 1));
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(kPi * progress));
}

// Forward + backward for one item; gradients are scaled and accumulated.
inline double item_loss_and_gradients(TransformerParams& params, const TrainItem& item,
                                      double grad_scale) {
    detail::EncoderCache enc_cache;
    const Matrix memory = encode_context(item.ctx, params, &enc_cache);
    detail::DecoderCache dec_cache;
    const Matrix logits = forward(item.tokens, memory, params, &dec_cache);
    Matrix dlogits;
    const double l = loss(logits, item.tokens, params, &dlogits);
    for (auto& v : dlogits.a) v *= grad_scale;
    const Matrix dmemory = decoder_backward(params, dec_cache, dlogits);
    encoder_backward(params, enc_cache, dmemory);
    return l;
}

// Teacher-forced Adam training over window datasets. Deterministic under the
// seed: epoch order, batches and all arithmetic are sequential.
inline TransformerParams train(const std::vector<TrainItem>& dataset, const ModelConfig& mcfg,
                               const TrainConfig& tcfg) {
    if (dataset.empty()) throw Error("train: empty dataset");
    for (const auto& item : dataset)
        if (static_cast<int>(item.tokens.size()) != mcfg.seq_len)
            throw ShapeMismatch("train: item token count differs from seq_len");

    TransformerParams params(mcfg);
    Rng rng(tcfg.seed);
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t cursor = 0;
    auto next_index = [&]() {
        if (cursor >= order.size()) {
            rng.shuffle(order);
            cursor = 0;
        }
        return order[cursor++];
    };

    const int per_step = tcfg.batch_size * tcfg.grad_accum;
    for (long step = 1; step <= tcfg.steps; ++step) {
        params.zero_grads();
        double step_loss = 0.0;
        for (int b = 0; b < per_step; ++b) {
            const auto& item = dataset[next_index()];
            step_loss += item_loss_and_gradients(params, item, 1.0 / per_step);
        }
        step_loss /= per_step;
        if (!std::isfinite(step_loss)) throw NonFiniteLoss("non-finite training loss", step);
        const double lr = learning_rate_at(tcfg, step);
        params.adam_step(step, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
        if (tcfg.metrics_fn) tcfg.metrics_fn(step, step_loss, lr);
        if (tcfg.checkpoint_every > 0 && tcfg.checkpoint_fn && step % tcfg.checkpoint_every == 0)
            tcfg.checkpoint_fn(params, step);
    }
    return params;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Softmax of logits/temperature restricted to the top_k highest logits
// (ties toward lower index), renormalized and sampled. temperature -> 0
// approaches argmax; top_k = 1 is argmax exactly.
inline int sample_next(std::span<const double> logits, double temperature, int top_k, Rng& rng) {
    const int n = static_cast<int>(logits.size());
    if (temperature <= 0.0) throw Error("sample_next: temperature must be positive");
    if (top_k < 1 || top_k > n) throw Error("sample_next: top_k out of range");

    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::partial_sort(idx.begin(), idx.begin() + top_k, idx.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
    });
    if (top_k == 1) return idx[0];

    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < top_k; ++i) mx = std::max(mx, logits[idx[i]] / temperature);
    std::vector<double> probs(static_cast<std::size_t>(top_k));
    double sum = 0.0;
    for (int i = 0; i < top_k; ++i) {
        probs[i] = std::exp(logits[idx[i]] / temperature - mx);
        sum += probs[i];
    }
    double u = rng.uniform() * sum;
    for (int i = 0; i < top_k; ++i) {
        u -= probs[i];
        if (u <= 0.0) return idx[i];
    }
    return idx[top_k - 1];
}

// ---------------------------------------------------------------------------
// SGM1 parameters file: magic, u32 JSON header length, JSON header with the
// config and the named tensor list in serialization order, then f32 LE data.
// ---------------------------------------------------------------------------

inline std::string params_to_bytes(const TransformerParams& params) {
    nlohmann::json header;
    header["config"] = params.config.to_json();
    auto& list = header["tensors"] = nlohmann::json::array();
    for (const auto& t : params.tensors())
        list.push_back({{"name", t.name}, {"rows", t.value.rows}, {"cols", t.value.cols}});
    const std::string hj = header.dump();
    std::string out = "SGM1";
    append_u32(out, static_cast<std::uint32_t>(hj.size()));
    out += hj;
    for (const auto& t : params.tensors())
        for (double v : t.value.a) append_f32(out, static_cast<float>(v));
    return out;
}

inline TransformerParams params_from_bytes(const std::string& bytes,
                                           const std::string& what = "model") {
    if (bytes.size() < 8 || bytes.compare(0, 4, "SGM1") != 0)
        throw IoError(what + ": bad magic");
    std::uint32_t hlen = 0;
    for (int i = 3; i >= 0; --i)
        hlen = (hlen << 8) | static_cast<unsigned char>(bytes[4 + i]);
    if (bytes.size() < 8 + static_cast<std::size_t>(hlen))
        throw IoError(what + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(8, hlen));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(what + " header: " + e.what(), e.byte);
    }
    TransformerParams params(ModelConfig::from_json(header.at("config")));
    const auto& list = header.at("tensors");
    if (list.size() != params.tensors().size())
        throw IoError(what + ": tensor list length mismatch");
    std::size_t pos = 8 + hlen;
    for (std::size_t i = 0; i < params.tensors().size(); ++i) {
        auto& t = params.tensors()[i];
        const auto& meta = list.at(i);
        if (meta.at("name").get<std::string>() != t.name ||
            meta.at("rows").get<int>() != t.value.rows ||
            meta.at("cols").get<int>() != t.value.cols)
            throw IoError(what + ": tensor " + t.name + " metadata mismatch");
        if (bytes.size() < pos + t.value.a.size() * 4)
            throw IoError(what + ": truncated tensor data");
        for (auto& v : t.value.a) {
            std::uint32_t u = 0;
            for (int b = 3; b >= 0; --b)
                u = (u << 8) | static_cast<unsigned char>(bytes[pos + b]);
            float f;
            std::memcpy(&f, &u, sizeof(f));
            v = f;
            pos += 4;
        }
    }
    if (pos != bytes.size()) throw IoError(what + ": trailing bytes");
    return params;
}

inline void save_params(const TransformerParams& params, const std::filesystem::path& path) {
    atomic_write_file(path, params_to_bytes(params));
}

inline TransformerParams load_params(const std::filesystem::path& path) {
    return params_from_bytes(read_file(path), path.string());
}

}  // namespace streetsynth
