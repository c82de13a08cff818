#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mtp/blockmask.hpp"
#include "mtp/common.hpp"
#include "mtp/corpus.hpp"

namespace mtp {

template <typename S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecC = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelConfig {
    int layers = 2;
    int dim = 64;
    int heads = 4;
    int ffn_dim = 256;
    int vocab_size = 0;
    int max_position = 512;
    int rope_base = 10000;

    int head_dim() const { return dim / heads; }
    void validate() const {
        if (layers < 1 || dim < 1 || heads < 1 || ffn_dim < 1 || vocab_size < 1 ||
            max_position < 1) {
            throw std::invalid_argument("ModelConfig: all sizes must be positive");
        }
        if (dim % heads != 0) {
            throw std::invalid_argument("ModelConfig: dim must be divisible by heads");
        }
        if (head_dim() % 2 != 0) {
            throw std::invalid_argument("ModelConfig: head_dim must be even for rotary pairs");
        }
    }
    bool operator==(const ModelConfig& o) const {
        return layers == o.layers && dim == o.dim && heads == o.heads && ffn_dim == o.ffn_dim &&
               vocab_size == o.vocab_size && max_position == o.max_position &&
               rope_base == o.rope_base;
    }
};

inline constexpr double kNormEps = 1e-5;

// Pre-norm decoder weights. Also used as the gradient and optimizer-moment
// container since those mirror the parameter shapes exactly.
template <typename S>
struct Parameters {
    struct Layer {
        MatR<S> attn_norm;  // 1 x d
        MatR<S> wq, wk, wv, wo;  // d x d
        MatR<S> ffn_norm;   // 1 x d
        MatR<S> w1;         // ffn x d
        MatR<S> w2;         // d x ffn
    };

    ModelConfig config;
    MatR<S> embed;       // V x d
    MatR<S> unembed;     // V x d (untied)
    MatR<S> final_norm;  // 1 x d
    std::vector<Layer> layers;

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        fn("embed", embed);
        fn("unembed", unembed);
        fn("final_norm", final_norm);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            fn(p + "attn_norm", layers[l].attn_norm);
            fn(p + "wq", layers[l].wq);
            fn(p + "wk", layers[l].wk);
            fn(p + "wv", layers[l].wv);
            fn(p + "wo", layers[l].wo);
            fn(p + "ffn_norm", layers[l].ffn_norm);
            fn(p + "w1", layers[l].w1);
            fn(p + "w2", layers[l].w2);
        }
    }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        const_cast<Parameters*>(this)->for_each_tensor(
            [&](const std::string& name, MatR<S>& t) { fn(name, const_cast<const MatR<S>&>(t)); });
    }

    void set_zero() {
        for_each_tensor([](const std::string&, MatR<S>& t) { t.setZero(); });
    }
    void add_scaled(const Parameters& other, S scale) {
        std::vector<const MatR<S>*> theirs;
        other.for_each_tensor([&](const std::string&, const MatR<S>& t) { theirs.push_back(&t); });
        std::size_t i = 0;
        for_each_tensor([&](const std::string&, MatR<S>& t) { t += scale * (*theirs[i++]); });
    }
    double squared_norm() const {
        double acc = 0.0;
        for_each_tensor([&](const std::string&, const MatR<S>& t) {
            acc += t.template cast<double>().squaredNorm();
        });
        return acc;
    }
    void scale(S s) {
        for_each_tensor([&](const std::string&, MatR<S>& t) { t *= s; });
    }
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for_each_tensor([&](const std::string& name, const MatR<S>& t) {
            h = fnv1a(name.data(), name.size(), h);
            h = fnv1a(t.data(), sizeof(S) * static_cast<std::size_t>(t.size()), h);
        });
        return h;
    }

    template <typename T>
    Parameters<T> cast() const {
        Parameters<T> out = zeros_like_config<T>(config);
        std::vector<const MatR<S>*> src;
        for_each_tensor([&](const std::string&, const MatR<S>& t) { src.push_back(&t); });
        std::size_t i = 0;
        out.for_each_tensor(
            [&](const std::string&, MatR<T>& t) { t = src[i++]->template cast<T>(); });
        return out;
    }

    template <typename T>
    static Parameters<T> zeros_like_config(const ModelConfig& cfg) {
        cfg.validate();
        Parameters<T> p;
        p.config = cfg;
        p.embed = MatR<T>::Zero(cfg.vocab_size, cfg.dim);
        p.unembed = MatR<T>::Zero(cfg.vocab_size, cfg.dim);
        p.final_norm = MatR<T>::Zero(1, cfg.dim);
        p.layers.resize(static_cast<std::size_t>(cfg.layers));
        for (auto& l : p.layers) {
            l.attn_norm = MatR<T>::Zero(1, cfg.dim);
            l.wq = MatR<T>::Zero(cfg.dim, cfg.dim);
            l.wk = MatR<T>::Zero(cfg.dim, cfg.dim);
            l.wv = MatR<T>::Zero(cfg.dim, cfg.dim);
            l.wo = MatR<T>::Zero(cfg.dim, cfg.dim);
            l.ffn_norm = MatR<T>::Zero(1, cfg.dim);
            l.w1 = MatR<T>::Zero(cfg.ffn_dim, cfg.dim);
            l.w2 = MatR<T>::Zero(cfg.dim, cfg.ffn_dim);
        }
        return p;
    }
};

template <typename S>
Parameters<S> zeros_like(const Parameters<S>& other) {
    return Parameters<S>::template zeros_like_config<S>(other.config);
}

// Scaled-normal init (std 0.02); norm gains start at 1. Weights are drawn in
// double and cast so float and double instantiations agree bit-for-bit after
// rounding for a given seed.
template <typename S>
Parameters<S> init_parameters(const ModelConfig& cfg, std::mt19937_64& rng) {
    Parameters<S> p = Parameters<S>::template zeros_like_config<S>(cfg);
    std::normal_distribution<double> normal(0.0, 0.02);
    p.for_each_tensor([&](const std::string& name, MatR<S>& t) {
        const bool is_norm = name.find("norm") != std::string::npos;
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                t(i, j) = is_norm ? S(1) : static_cast<S>(normal(rng));
            }
        }
    });
    return p;
}

// Redraws the MTP mask token's row in embed and unembed from a diagonal
// Gaussian fit to the per-dimension mean/variance of all other rows.
template <typename S>
void init_mtp_embedding(Parameters<S>& params, const Vocab& vocab, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (MatR<S>* table : {&params.embed, &params.unembed}) {
        const Eigen::Index v = table->rows();
        const Eigen::Index d = table->cols();
        const Eigen::Index mtp = vocab.mtp_id;
        for (Eigen::Index j = 0; j < d; ++j) {
            double mean = 0.0;
            for (Eigen::Index r = 0; r < v; ++r) {
                if (r != mtp) mean += static_cast<double>((*table)(r, j));
            }
            mean /= static_cast<double>(v - 1);
            double var = 0.0;
            for (Eigen::Index r = 0; r < v; ++r) {
                if (r != mtp) {
                    const double dlt = static_cast<double>((*table)(r, j)) - mean;
                    var += dlt * dlt;
                }
            }
            var /= static_cast<double>(v - 1);
            (*table)(mtp, j) = static_cast<S>(mean + std::sqrt(var) * normal(rng));
        }
    }
}

template <typename S>
struct ForwardTrace {
    struct LayerTrace {
        MatR<S> x;            // layer input
        VecC<S> inv1, inv2;   // rmsnorm reciprocal norms per row
        MatR<S> n1, n2;       // normed activations
        MatR<S> qr, kr, v;    // rotated q/k and plain v
        std::vector<MatR<S>> probs;  // per head, N x N
        MatR<S> attn_concat;  // heads concatenated, pre-wo
        MatR<S> x2;           // post-attention residual
        MatR<S> h1, act, sig; // ffn pre-activation, silu(h1), sigmoid(h1)
    };
    std::vector<TokenId> input_ids;
    std::vector<int> pos_ids;
    MatR<S> bias;        // additive 0/-inf mask
    MatR<S> cos_t, sin_t;  // N x head_dim/2 rotation tables
    std::vector<LayerTrace> layers;
    MatR<S> x_top;  // input to the final norm
    VecC<S> invf;
    MatR<S> nf;
    MatR<S> logits;  // N x V
};

namespace detail {

template <typename S>
void rms_rows(const MatR<S>& x, const MatR<S>& gain, MatR<S>& out, VecC<S>& inv) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    out.resize(n, d);
    inv.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S ms = x.row(i).squaredNorm() / static_cast<S>(d);
        const S r = S(1) / std::sqrt(ms + static_cast<S>(kNormEps));
        inv(i) = r;
        out.row(i) = (x.row(i) * r).cwiseProduct(gain.row(0));
    }
}

// d(rmsnorm)/dx given upstream dy; accumulates the gain gradient.
template <typename S>
MatR<S> rms_rows_backward(const MatR<S>& x, const VecC<S>& inv, const MatR<S>& gain,
                          const MatR<S>& dy, MatR<S>& dgain) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    MatR<S> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S r = inv(i);
        dgain.row(0) += dy.row(i).cwiseProduct(x.row(i) * r);
        const auto dxhat = dy.row(i).cwiseProduct(gain.row(0));
        const S dot = dxhat.cwiseProduct(x.row(i)).sum();
        dx.row(i) = r * dxhat - (r * r * r * dot / static_cast<S>(d)) * x.row(i);
    }
    return dx;
}

template <typename S>
void rope_tables(const ModelConfig& cfg, const std::vector<int>& pos_ids, MatR<S>& cos_t,
                 MatR<S>& sin_t) {
    const int half = cfg.head_dim() / 2;
    const auto n = static_cast<Eigen::Index>(pos_ids.size());
    cos_t.resize(n, half);
    sin_t.resize(n, half);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < half; ++j) {
            const double freq =
                std::pow(static_cast<double>(cfg.rope_base), -2.0 * j / cfg.head_dim());
            const double ang = static_cast<double>(pos_ids[static_cast<std::size_t>(i)]) * freq;
            cos_t(i, j) = static_cast<S>(std::cos(ang));
            sin_t(i, j) = static_cast<S>(std::sin(ang));
        }
    }
}

// In-place rotation of every head's (2j, 2j+1) pairs; invert=true applies the
// transpose (used by the backward pass).
template <typename S>
void rope_apply(MatR<S>& x, const ModelConfig& cfg, const MatR<S>& cos_t, const MatR<S>& sin_t,
                bool invert = false) {
    const int hd = cfg.head_dim();
    const int half = hd / 2;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (int h = 0; h < cfg.heads; ++h) {
            const int base = h * hd;
            for (int j = 0; j < half; ++j) {
                const S c = cos_t(i, j);
                const S s = invert ? -sin_t(i, j) : sin_t(i, j);
                const S a = x(i, base + 2 * j);
                const S b = x(i, base + 2 * j + 1);
                x(i, base + 2 * j) = a * c - b * s;
                x(i, base + 2 * j + 1) = a * s + b * c;
            }
        }
    }
}

template <typename S>
MatR<S> mask_bias(const AttentionMask& mask) {
    MatR<S> bias(mask.n, mask.n);
    const S neg = -std::numeric_limits<S>::infinity();
    for (int q = 0; q < mask.n; ++q) {
        for (int k = 0; k < mask.n; ++k) {
            bias(q, k) = mask.at(q, k) ? S(0) : neg;
        }
    }
    return bias;
}

template <typename S>
void softmax_rows(MatR<S>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const S mx = m.row(i).maxCoeff();
        m.row(i) = (m.row(i).array() - mx).exp();
        m.row(i) /= m.row(i).sum();
    }
}

}  // namespace detail

template <typename S>
ForwardTrace<S> forward(const Parameters<S>& params, const std::vector<TokenId>& input_ids,
                        const std::vector<int>& pos_ids, const AttentionMask& mask) {
    const ModelConfig& cfg = params.config;
    const auto n = static_cast<Eigen::Index>(input_ids.size());
    if (pos_ids.size() != input_ids.size()) {
        throw std::invalid_argument("forward: pos_ids size mismatch");
    }
    if (mask.n != static_cast<int>(n)) {
        throw std::invalid_argument("forward: mask shape mismatch");
    }
    for (std::size_t i = 0; i < input_ids.size(); ++i) {
        if (input_ids[i] < 0 || input_ids[i] >= cfg.vocab_size) {
            throw std::invalid_argument("forward: token id out of range");
        }
        if (pos_ids[i] < 0 || pos_ids[i] >= cfg.max_position) {
            throw std::invalid_argument("forward: position out of range");
        }
    }

    ForwardTrace<S> t;
    t.input_ids = input_ids;
    t.pos_ids = pos_ids;
    t.bias = detail::mask_bias<S>(mask);
    detail::rope_tables(cfg, pos_ids, t.cos_t, t.sin_t);
    t.layers.resize(static_cast<std::size_t>(cfg.layers));

    const int hd = cfg.head_dim();
    const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(hd));

    MatR<S> x(n, cfg.dim);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i) = params.embed.row(input_ids[static_cast<std::size_t>(i)]);
    }

    for (int l = 0; l < cfg.layers; ++l) {
        auto& lt = t.layers[static_cast<std::size_t>(l)];
        const auto& lp = params.layers[static_cast<std::size_t>(l)];
        lt.x = x;
        detail::rms_rows(lt.x, lp.attn_norm, lt.n1, lt.inv1);
        lt.qr.noalias() = lt.n1 * lp.wq.transpose();
        lt.kr.noalias() = lt.n1 * lp.wk.transpose();
        lt.v.noalias() = lt.n1 * lp.wv.transpose();
        detail::rope_apply(lt.qr, cfg, t.cos_t, t.sin_t);
        detail::rope_apply(lt.kr, cfg, t.cos_t, t.sin_t);

        lt.attn_concat.resize(n, cfg.dim);
        lt.probs.resize(static_cast<std::size_t>(cfg.heads));
        for (int h = 0; h < cfg.heads; ++h) {
            auto qh = lt.qr.middleCols(h * hd, hd);
            auto kh = lt.kr.middleCols(h * hd, hd);
            auto vh = lt.v.middleCols(h * hd, hd);
            MatR<S>& p = lt.probs[static_cast<std::size_t>(h)];
            p.noalias() = qh * kh.transpose();
            p *= inv_sqrt_hd;
            p += t.bias;
            detail::softmax_rows(p);
            lt.attn_concat.middleCols(h * hd, hd).noalias() = p * vh;
        }
        MatR<S> attn_out;
        attn_out.noalias() = lt.attn_concat * lp.wo.transpose();
        lt.x2 = lt.x + attn_out;

        detail::rms_rows(lt.x2, lp.ffn_norm, lt.n2, lt.inv2);
        lt.h1.noalias() = lt.n2 * lp.w1.transpose();
        lt.sig = (S(1) / (S(1) + (-lt.h1.array()).exp())).matrix();
        lt.act = lt.h1.cwiseProduct(lt.sig);
        MatR<S> f;
        f.noalias() = lt.act * lp.w2.transpose();
        x = lt.x2 + f;
    }

    t.x_top = x;
    detail::rms_rows(t.x_top, params.final_norm, t.nf, t.invf);
    t.logits.noalias() = t.nf * params.unembed.transpose();
    return t;
}

// Exact analytic gradients for every parameter of the forward above.
template <typename S>
Parameters<S> backward(const Parameters<S>& params, const ForwardTrace<S>& trace,
                       const MatR<S>& dlogits) {
    const ModelConfig& cfg = params.config;
    if (dlogits.rows() != trace.logits.rows() || dlogits.cols() != trace.logits.cols()) {
        throw std::invalid_argument("backward: dlogits shape mismatch");
    }
    Parameters<S> g = zeros_like(params);
    const int hd = cfg.head_dim();
    const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(hd));

    g.unembed.noalias() = dlogits.transpose() * trace.nf;
    MatR<S> dnf;
    dnf.noalias() = dlogits * params.unembed;
    MatR<S> dx = detail::rms_rows_backward(trace.x_top, trace.invf, params.final_norm, dnf,
                                           g.final_norm);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const auto& lt = trace.layers[static_cast<std::size_t>(l)];
        const auto& lp = params.layers[static_cast<std::size_t>(l)];
        auto& lg = g.layers[static_cast<std::size_t>(l)];

        // ffn block: x3 = x2 + silu(n2 w1^T) w2^T
        MatR<S> da;
        da.noalias() = dx * lp.w2;
        lg.w2.noalias() = dx.transpose() * lt.act;
        // silu'(h) = sig(h) * (1 + h * (1 - sig(h)))
        MatR<S> dh1 = da.cwiseProduct(
            (lt.sig.array() * (S(1) + lt.h1.array() * (S(1) - lt.sig.array()))).matrix());
        MatR<S> dn2;
        dn2.noalias() = dh1 * lp.w1;
        lg.w1.noalias() = dh1.transpose() * lt.n2;
        MatR<S> dx2 = detail::rms_rows_backward(lt.x2, lt.inv2, lp.ffn_norm, dn2, lg.ffn_norm);
        dx2 += dx;

        // attention block: x2 = x + (concat_h p_h v_h) wo^T
        MatR<S> dconcat;
        dconcat.noalias() = dx2 * lp.wo;
        lg.wo.noalias() = dx2.transpose() * lt.attn_concat;

        MatR<S> dqr = MatR<S>::Zero(dconcat.rows(), cfg.dim);
        MatR<S> dkr = MatR<S>::Zero(dconcat.rows(), cfg.dim);
        MatR<S> dv = MatR<S>::Zero(dconcat.rows(), cfg.dim);
        for (int h = 0; h < cfg.heads; ++h) {
            const MatR<S>& p = lt.probs[static_cast<std::size_t>(h)];
            auto doh = dconcat.middleCols(h * hd, hd);
            auto vh = lt.v.middleCols(h * hd, hd);
            auto qh = lt.qr.middleCols(h * hd, hd);
            auto kh = lt.kr.middleCols(h * hd, hd);
            MatR<S> dp;
            dp.noalias() = doh * vh.transpose();
            dv.middleCols(h * hd, hd).noalias() = p.transpose() * doh;
            // softmax rows backward
            MatR<S> ds(p.rows(), p.cols());
            for (Eigen::Index i = 0; i < p.rows(); ++i) {
                const S dot = dp.row(i).cwiseProduct(p.row(i)).sum();
                ds.row(i) = p.row(i).cwiseProduct(dp.row(i).array().matrix() -
                                                  MatR<S>::Constant(1, p.cols(), dot));
            }
            ds *= inv_sqrt_hd;
            dqr.middleCols(h * hd, hd).noalias() = ds * kh;
            dkr.middleCols(h * hd, hd).noalias() = ds.transpose() * qh;
        }
        detail::rope_apply(dqr, cfg, trace.cos_t, trace.sin_t, /*invert=*/true);
        detail::rope_apply(dkr, cfg, trace.cos_t, trace.sin_t, /*invert=*/true);

        MatR<S> dn1;
        dn1.noalias() = dqr * lp.wq;
        dn1.noalias() += dkr * lp.wk;
        dn1.noalias() += dv * lp.wv;
        lg.wq.noalias() = dqr.transpose() * lt.n1;
        lg.wk.noalias() = dkr.transpose() * lt.n1;
        lg.wv.noalias() = dv.transpose() * lt.n1;

        MatR<S> dxn = detail::rms_rows_backward(lt.x, lt.inv1, lp.attn_norm, dn1, lg.attn_norm);
        dx = dx2 + dxn;
    }

    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        g.embed.row(trace.input_ids[static_cast<std::size_t>(i)]) += dx.row(i);
    }
    return g;
}

// Committed-token key/value store for incremental decoding. Keys are stored
// rotated; pop() drops the most recent entries (the stale mask slots).
template <typename S>
struct KvCache {
    struct LayerKV {
        MatR<S> k, v;  // capacity x dim, first `len` rows valid
    };
    ModelConfig config;
    std::vector<LayerKV> layers;
    std::vector<TokenId> token_ids;
    std::vector<int> pos_ids;
    int len = 0;
    int capacity = 0;
    int transient_masks = 0;

    static KvCache make(const ModelConfig& cfg, int capacity) {
        KvCache c;
        c.config = cfg;
        c.capacity = capacity;
        c.layers.resize(static_cast<std::size_t>(cfg.layers));
        for (auto& l : c.layers) {
            l.k = MatR<S>::Zero(capacity, cfg.dim);
            l.v = MatR<S>::Zero(capacity, cfg.dim);
        }
        return c;
    }

    void pop(int n) {
        if (n < 0 || n > len) {
            throw std::logic_error("KvCache::pop: invalid count");
        }
        len -= n;
        token_ids.resize(static_cast<std::size_t>(len));
        pos_ids.resize(static_cast<std::size_t>(len));
    }

    void ensure_capacity(int needed) {
        if (needed <= capacity) return;
        int cap = capacity > 0 ? capacity : 64;
        while (cap < needed) cap *= 2;
        for (auto& l : layers) {
            l.k.conservativeResize(cap, Eigen::NoChange);
            l.v.conservativeResize(cap, Eigen::NoChange);
        }
        capacity = cap;
    }
};

// Incremental forward over `new_ids` under an implicit plain causal mask:
// logits for the new slots only, cache extended in place.
template <typename S>
MatR<S> forward_cached(const Parameters<S>& params, KvCache<S>& cache,
                       const std::vector<TokenId>& new_ids, const std::vector<int>& new_pos) {
    const ModelConfig& cfg = params.config;
    if (!(cache.config == cfg)) {
        throw std::invalid_argument("forward_cached: cache built for a different config");
    }
    if (new_ids.size() != new_pos.size() || new_ids.empty()) {
        throw std::invalid_argument("forward_cached: bad new token batch");
    }
    const auto m = static_cast<Eigen::Index>(new_ids.size());
    for (std::size_t i = 0; i < new_ids.size(); ++i) {
        if (new_ids[i] < 0 || new_ids[i] >= cfg.vocab_size) {
            throw std::invalid_argument("forward_cached: token id out of range");
        }
        if (new_pos[i] != cache.len + static_cast<int>(i)) {
            throw std::runtime_error("forward_cached: cache-consistency error (position " +
                                     std::to_string(new_pos[i]) + " does not continue " +
                                     std::to_string(cache.len) + ")");
        }
        if (new_pos[i] >= cfg.max_position) {
            throw std::invalid_argument("forward_cached: position out of range");
        }
    }
    cache.ensure_capacity(cache.len + static_cast<int>(m));

    MatR<S> cos_t, sin_t;
    detail::rope_tables(cfg, new_pos, cos_t, sin_t);
    const int hd = cfg.head_dim();
    const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(hd));
    const int base_len = cache.len;

    MatR<S> x(m, cfg.dim);
    for (Eigen::Index i = 0; i < m; ++i) {
        x.row(i) = params.embed.row(new_ids[static_cast<std::size_t>(i)]);
    }

    MatR<S> n1, n2;
    VecC<S> inv1, inv2;
    for (int l = 0; l < cfg.layers; ++l) {
        const auto& lp = params.layers[static_cast<std::size_t>(l)];
        auto& kv = cache.layers[static_cast<std::size_t>(l)];
        detail::rms_rows(x, lp.attn_norm, n1, inv1);
        MatR<S> q, k, v;
        q.noalias() = n1 * lp.wq.transpose();
        k.noalias() = n1 * lp.wk.transpose();
        v.noalias() = n1 * lp.wv.transpose();
        detail::rope_apply(q, cfg, cos_t, sin_t);
        detail::rope_apply(k, cfg, cos_t, sin_t);
        kv.k.middleRows(base_len, m) = k;
        kv.v.middleRows(base_len, m) = v;

        MatR<S> attn_concat(m, cfg.dim);
        for (Eigen::Index i = 0; i < m; ++i) {
            const int ctx = base_len + static_cast<int>(i) + 1;  // causal: keys 0..self
            for (int h = 0; h < cfg.heads; ++h) {
                auto kh = kv.k.topRows(ctx).middleCols(h * hd, hd);
                auto vh = kv.v.topRows(ctx).middleCols(h * hd, hd);
                VecC<S> scores;
                scores.noalias() = kh * q.row(i).middleCols(h * hd, hd).transpose();
                scores *= inv_sqrt_hd;
                const S mx = scores.maxCoeff();
                scores = (scores.array() - mx).exp();
                scores /= scores.sum();
                attn_concat.row(i).middleCols(h * hd, hd).noalias() =
                    scores.transpose() * vh;
            }
        }
        MatR<S> attn_out;
        attn_out.noalias() = attn_concat * lp.wo.transpose();
        MatR<S> x2 = x + attn_out;
        detail::rms_rows(x2, lp.ffn_norm, n2, inv2);
        MatR<S> h1;
        h1.noalias() = n2 * lp.w1.transpose();
        MatR<S> act = (h1.array() / (S(1) + (-h1.array()).exp())).matrix();
        MatR<S> f;
        f.noalias() = act * lp.w2.transpose();
        x = x2 + f;
    }

    MatR<S> nf;
    VecC<S> invf;
    detail::rms_rows(x, params.final_norm, nf, invf);
    MatR<S> logits;
    logits.noalias() = nf * params.unembed.transpose();

    cache.len += static_cast<int>(m);
    cache.token_ids.insert(cache.token_ids.end(), new_ids.begin(), new_ids.end());
    cache.pos_ids.insert(cache.pos_ids.end(), new_pos.begin(), new_pos.end());
    return logits;
}

}  // namespace mtp
