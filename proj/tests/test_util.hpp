#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mtp/blockmask.hpp"
#include "mtp/layout.hpp"
#include "mtp/model.hpp"

namespace mtp::testutil {

inline ModelConfig small_config(int vocab_size, int dim = 32, int layers = 2, int heads = 4,
                                int ffn = 64, int max_pos = 128) {
    ModelConfig cfg;
    cfg.layers = layers;
    cfg.dim = dim;
    cfg.heads = heads;
    cfg.ffn_dim = ffn;
    cfg.vocab_size = vocab_size;
    cfg.max_position = max_pos;
    return cfg;
}

// Central finite differences against the analytic gradient, every parameter.
// Returns the worst error, relative with a unit floor.
inline double max_fd_error(Parameters<double>& params, const Parameters<double>& analytic,
                           const std::function<double()>& loss, double h = 1e-5) {
    std::vector<MatR<double>*> tensors;
    params.for_each_tensor([&](const std::string&, MatR<double>& t) { tensors.push_back(&t); });
    std::vector<const MatR<double>*> grads;
    analytic.for_each_tensor(
        [&](const std::string&, const MatR<double>& t) { grads.push_back(&t); });

    double worst = 0.0;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        MatR<double>& t = *tensors[ti];
        const MatR<double>& g = *grads[ti];
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                const double orig = t(i, j);
                t(i, j) = orig + h;
                const double lp = loss();
                t(i, j) = orig - h;
                const double lm = loss();
                t(i, j) = orig;
                const double fd = (lp - lm) / (2.0 * h);
                const double err =
                    std::abs(fd - g(i, j)) / std::max({1.0, std::abs(fd), std::abs(g(i, j))});
                if (err > worst) worst = err;
            }
        }
    }
    return worst;
}

// Independent sequential-scoring oracle: the teacher's log-probability of each
// rollout token via fresh plain-causal forwards over the growing prefix.
template <typename S>
std::vector<double> sequential_region_logprobs(const Parameters<S>& teacher,
                                               const std::vector<TokenId>& tokens,
                                               const Region& region,
                                               const std::vector<TokenId>& rollout) {
    std::vector<double> out;
    std::vector<TokenId> ctx(tokens.begin(), tokens.begin() + region.base_pos + 1);
    for (std::size_t j = 0; j < rollout.size(); ++j) {
        std::vector<int> pos(ctx.size());
        for (std::size_t i = 0; i < ctx.size(); ++i) pos[i] = static_cast<int>(i);
        const AttentionMask causal = build_plain_causal(static_cast<int>(ctx.size()));
        const ForwardTrace<S> t = forward(teacher, ctx, pos, causal);
        const auto row = t.logits.row(t.logits.rows() - 1);
        const S mx = row.maxCoeff();
        double denom = 0.0;
        for (Eigen::Index c = 0; c < row.size(); ++c) {
            denom += std::exp(static_cast<double>(row(c) - mx));
        }
        out.push_back(static_cast<double>(row(rollout[j]) - mx) - std::log(denom));
        ctx.push_back(rollout[j]);
    }
    return out;
}

}  // namespace mtp::testutil
