#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "mtp/model.hpp"

namespace mtp {

struct DecodeConfig {
    enum class Strategy { static_k, conf_adapt };
    Strategy strategy = Strategy::static_k;
    int static_k = 1;       // for static_k, in [1, k_max]
    double lambda = 0.9;    // for conf_adapt, in [0, 1]
    int k_max = 8;
    int max_new_tokens = 64;
    TokenId eos_id = -1;
    TokenId mtp_id = -1;

    void validate() const {
        if (k_max < 1) throw std::invalid_argument("DecodeConfig: k_max must be >= 1");
        if (strategy == Strategy::static_k && (static_k < 1 || static_k > k_max)) {
            throw std::invalid_argument("DecodeConfig: static k must lie in [1, k_max]");
        }
        if (strategy == Strategy::conf_adapt && (lambda < 0.0 || lambda > 1.0)) {
            throw std::invalid_argument("DecodeConfig: lambda must lie in [0, 1]");
        }
        if (max_new_tokens < 1) {
            throw std::invalid_argument("DecodeConfig: max_new_tokens must be >= 1");
        }
        if (eos_id < 0 || mtp_id < 0) {
            throw std::invalid_argument("DecodeConfig: eos_id/mtp_id must be set");
        }
    }
};

DecodeConfig::Strategy parse_strategy(const std::string& spec, int& static_k, double& lambda);

struct DecodeStep {
    std::vector<TokenId> proposed;   // one per proposal position
    std::vector<double> top_probs;   // top-token probability per position
    int accepted = 0;                // committed tokens this step (post EOS trim)
    std::vector<TokenId> accepted_tokens;
};

struct DecodeTrace {
    std::vector<DecodeStep> steps;
    std::vector<TokenId> generated;  // all committed tokens, EOS included if emitted
    bool ended_with_eos = false;
    int prompt_len = 0;
};

// Longest prefix of positions whose top-token probability strictly exceeds
// lambda, floored at 1 (the first token is always kept).
int accept_count(const std::vector<double>& top_probs, double lambda);

// Drops everything after the first EOS; returns whether an EOS was kept.
bool trim_chunk_at_eos(std::vector<TokenId>& chunk, TokenId eos_id);

struct AccelStats {
    double mean = 0.0;
    double se = 0.0;
    std::vector<std::int64_t> histogram;  // histogram[k] = steps that committed k tokens
    std::int64_t steps = 0;
};

AccelStats accel_stats(const std::vector<DecodeTrace>& traces);

// ---------------------------------------------------------------------------
// decode loop

template <typename S>
struct DecodeState {
    KvCache<S> cache;
    MatR<S> last_logits;  // 1 x V logits of the most recent committed token
    int generated = 0;
    bool ended = false;
};

namespace detail {

// Proposal readout. The MTP mask token is an input-only scaffold and is never
// emittable, so it is skipped in the argmax; its probability mass still counts
// in the softmax denominator.
template <typename S>
void top_of_row(const MatR<S>& logits, Eigen::Index r, TokenId banned, TokenId& tok,
                double& prob) {
    const S mx = logits.row(r).maxCoeff();
    double denom = 0.0;
    double best_v = -std::numeric_limits<double>::infinity();
    TokenId best = -1;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const double e = std::exp(static_cast<double>(logits(r, j) - mx));
        denom += e;
        if (static_cast<TokenId>(j) == banned) continue;
        if (static_cast<double>(logits(r, j)) > best_v) {
            best_v = static_cast<double>(logits(r, j));
            best = static_cast<TokenId>(j);
        }
    }
    tok = best;
    prob = std::exp(static_cast<double>(logits(r, best) - mx)) / denom;
}

}  // namespace detail

// One prediction pass: append mask tokens, read k proposals (the first from
// the last committed slot's logits), accept a prefix, pop the stale mask
// entries, and commit the accepted tokens as real inputs.
template <typename S>
DecodeStep decode_step(const Parameters<S>& params, DecodeState<S>& state,
                       const DecodeConfig& cfg) {
    cfg.validate();
    if (state.cache.len == 0 || state.last_logits.rows() != 1) {
        throw std::runtime_error("decode_step: state not prefilled");
    }
    const int k_prop =
        cfg.strategy == DecodeConfig::Strategy::static_k ? cfg.static_k : cfg.k_max;
    const int committed = state.cache.len;

    DecodeStep step;
    step.proposed.reserve(static_cast<std::size_t>(k_prop));
    step.top_probs.reserve(static_cast<std::size_t>(k_prop));

    TokenId tok;
    double prob;
    detail::top_of_row(state.last_logits, 0, cfg.mtp_id, tok, prob);
    step.proposed.push_back(tok);
    step.top_probs.push_back(prob);

    const int n_masks = k_prop - 1;
    if (n_masks > 0) {
        std::vector<TokenId> mask_ids(static_cast<std::size_t>(n_masks), cfg.mtp_id);
        std::vector<int> mask_pos(static_cast<std::size_t>(n_masks));
        for (int i = 0; i < n_masks; ++i) mask_pos[static_cast<std::size_t>(i)] = committed + i;
        state.cache.transient_masks = n_masks;
        const MatR<S> mask_logits = forward_cached(params, state.cache, mask_ids, mask_pos);
        for (int i = 0; i < n_masks; ++i) {
            detail::top_of_row(mask_logits, i, cfg.mtp_id, tok, prob);
            step.proposed.push_back(tok);
            step.top_probs.push_back(prob);
        }
        state.cache.pop(n_masks);  // mask KVs never outlive the prediction pass
        state.cache.transient_masks = 0;
    }

    int k_acc = cfg.strategy == DecodeConfig::Strategy::static_k
                    ? cfg.static_k
                    : accept_count(step.top_probs, cfg.lambda);
    const int remaining = cfg.max_new_tokens - state.generated;
    if (k_acc > remaining) k_acc = remaining;  // overflow -> partial chunk

    step.accepted_tokens.assign(step.proposed.begin(), step.proposed.begin() + k_acc);
    if (trim_chunk_at_eos(step.accepted_tokens, cfg.eos_id)) {
        state.ended = true;
    }
    step.accepted = static_cast<int>(step.accepted_tokens.size());

    std::vector<int> commit_pos(step.accepted_tokens.size());
    for (std::size_t i = 0; i < commit_pos.size(); ++i) {
        commit_pos[i] = committed + static_cast<int>(i);
    }
    const MatR<S> commit_logits =
        forward_cached(params, state.cache, step.accepted_tokens, commit_pos);
    state.last_logits = commit_logits.row(commit_logits.rows() - 1);
    state.generated += step.accepted;
    return step;
}

template <typename S>
DecodeTrace generate(const Parameters<S>& params, const std::vector<TokenId>& prompt,
                     const DecodeConfig& cfg) {
    cfg.validate();
    if (prompt.empty()) {
        throw std::invalid_argument("generate: empty prompt");
    }
    DecodeState<S> state;
    state.cache = KvCache<S>::make(params.config,
                                   static_cast<int>(prompt.size()) + cfg.max_new_tokens +
                                       cfg.k_max + 1);
    std::vector<int> pos(prompt.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    const MatR<S> prefill = forward_cached(params, state.cache, prompt, pos);
    state.last_logits = prefill.row(prefill.rows() - 1);

    DecodeTrace trace;
    trace.prompt_len = static_cast<int>(prompt.size());
    while (!state.ended && state.generated < cfg.max_new_tokens) {
        DecodeStep step = decode_step(params, state, cfg);
        trace.generated.insert(trace.generated.end(), step.accepted_tokens.begin(),
                               step.accepted_tokens.end());
        trace.steps.push_back(std::move(step));
    }
    trace.ended_with_eos = state.ended;
    return trace;
}

// `k_prime;token_ids;top_probs` per step plus one summary line.
std::string dump_trace(const DecodeTrace& trace);
DecodeTrace parse_trace(const std::string& text);

}  // namespace mtp
