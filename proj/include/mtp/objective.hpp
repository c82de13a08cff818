#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mtp/blockmask.hpp"
#include "mtp/layout.hpp"
#include "mtp/model.hpp"

namespace mtp {

enum class SupervisionMode { hard_teacher, soft_teacher, ground_truth };

inline const char* to_string(SupervisionMode m) {
    switch (m) {
        case SupervisionMode::hard_teacher: return "hard_teacher";
        case SupervisionMode::soft_teacher: return "soft_teacher";
        case SupervisionMode::ground_truth: return "ground_truth";
    }
    return "?";
}

inline SupervisionMode supervision_mode_from_string(const std::string& s) {
    if (s == "hard_teacher") return SupervisionMode::hard_teacher;
    if (s == "soft_teacher") return SupervisionMode::soft_teacher;
    if (s == "ground_truth") return SupervisionMode::ground_truth;
    throw std::invalid_argument("unknown supervision mode: " + s);
}

struct LossBreakdown {
    double mtp_loss = 0.0;     // mean over supervised slots
    double prefix_loss = 0.0;  // mean over prefix slots (0 when disabled)
    int supervised_count = 0;
    double match_rate = 0.0;  // student argmax == target token, over supervised slots
};

namespace detail {

// argmax with ties broken toward the lowest token id.
template <typename Row>
TokenId argmax_row(const Row& row) {
    TokenId best = 0;
    auto best_v = row(0);
    for (Eigen::Index j = 1; j < row.size(); ++j) {
        if (row(j) > best_v) {
            best_v = row(j);
            best = static_cast<TokenId>(j);
        }
    }
    return best;
}

// log softmax of one logits row at index `id`, computed the stable way.
template <typename S, typename Row>
double log_softmax_at(const Row& row, TokenId id) {
    const S mx = row.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
        sum += std::exp(static_cast<double>(row(j) - mx));
    }
    return static_cast<double>(row(id) - mx) - std::log(sum);
}

}  // namespace detail

template <typename S>
struct NtpLossResult {
    double loss = 0.0;
    int count = 0;
    MatR<S> dlogits;  // same shape as logits
};

// Mean cross-entropy over flagged slots, with the exact gradient.
template <typename S>
NtpLossResult<S> ntp_loss(const MatR<S>& logits, const std::vector<TokenId>& targets,
                          const std::vector<std::uint8_t>& flags) {
    if (static_cast<Eigen::Index>(targets.size()) != logits.rows() ||
        targets.size() != flags.size()) {
        throw std::invalid_argument("ntp_loss: shape mismatch");
    }
    NtpLossResult<S> out;
    out.dlogits = MatR<S>::Zero(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (flags[i]) {
            if (targets[i] < 0 || targets[i] >= logits.cols()) {
                throw std::invalid_argument("ntp_loss: invalid target id at flagged slot");
            }
            ++out.count;
        }
    }
    if (out.count == 0) {
        throw std::invalid_argument("ntp_loss: empty supervision (no flagged slots)");
    }
    const double inv = 1.0 / out.count;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (!flags[i]) continue;
        const auto r = static_cast<Eigen::Index>(i);
        const S mx = logits.row(r).maxCoeff();
        VecC<S> p = (logits.row(r).array() - mx).exp().matrix().transpose();
        const S z = p.sum();
        p /= z;
        out.loss -= static_cast<double>(std::log(p(targets[i])));
        out.dlogits.row(r) = (p * static_cast<S>(inv)).transpose();
        out.dlogits(r, targets[i]) -= static_cast<S>(inv);
    }
    out.loss *= inv;
    return out;
}

// Deterministic per-region argmax readout of the student logits.
template <typename S>
std::vector<std::vector<TokenId>> student_rollout(const MatR<S>& logits,
                                                  const SequenceLayout& layout) {
    std::vector<std::vector<TokenId>> out;
    out.reserve(layout.regions.size());
    for (const Region& reg : layout.regions) {
        std::vector<TokenId> y;
        y.reserve(static_cast<std::size_t>(reg.span));
        for (int s = reg.first_slot; s < reg.first_slot + reg.span; ++s) {
            y.push_back(detail::argmax_row(logits.row(s)));
        }
        out.push_back(std::move(y));
    }
    return out;
}

// Per-supervised-slot targets, in ascending slot order.
template <typename S>
struct TeacherTargets {
    SupervisionMode mode = SupervisionMode::hard_teacher;
    std::vector<TokenId> tokens;  // hard / ground_truth
    MatR<S> probs;                // soft: supervised_count x V
};

// One frozen-teacher forward on the rollout-substituted layout, under the
// blocked-causal mask and the layout's pos_ids. The distribution read at the
// slot predicting y'_j is p_T(. | x_{1:i} (+) y'_{1:j-1}); hard mode collapses
// it to the argmax, ground_truth ignores the teacher entirely.
template <typename S>
TeacherTargets<S> teacher_targets(const Parameters<S>& teacher, const SequenceLayout& layout,
                                  const std::vector<std::vector<TokenId>>& rollouts,
                                  SupervisionMode mode) {
    TeacherTargets<S> out;
    out.mode = mode;
    const std::vector<int> sup = layout.supervised_slots();
    if (mode == SupervisionMode::ground_truth) {
        out.tokens.reserve(sup.size());
        for (int s : sup) {
            out.tokens.push_back(layout.target_ids[static_cast<std::size_t>(s)]);
        }
        return out;
    }
    const std::vector<TokenId> teacher_input = substitute_rollout(layout, rollouts);
    const AttentionMask mask = build_blocked_causal(layout);
    const ForwardTrace<S> t = forward(teacher, teacher_input, layout.pos_ids, mask);
    if (mode == SupervisionMode::hard_teacher) {
        out.tokens.reserve(sup.size());
        for (int s : sup) {
            out.tokens.push_back(detail::argmax_row(t.logits.row(s)));
        }
    } else {
        out.probs.resize(static_cast<Eigen::Index>(sup.size()), t.logits.cols());
        for (std::size_t i = 0; i < sup.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(sup[i]);
            const S mx = t.logits.row(r).maxCoeff();
            auto e = (t.logits.row(r).array() - mx).exp();
            out.probs.row(static_cast<Eigen::Index>(i)) = (e / e.sum()).matrix();
        }
    }
    return out;
}

template <typename S>
struct MtpLossResult {
    LossBreakdown breakdown;
    MatR<S> dlogits;
};

// Per-slot factorized online objective: cross-entropy against the teacher's
// per-position labels (hard/ground_truth) or full distributions (soft; equal
// to the KL up to the constant teacher entropy). prefix_aux adds the plain
// NTP loss over unsupervised ground-truth slots with weight 1.
template <typename S>
MtpLossResult<S> mtp_loss(const MatR<S>& student_logits, const TeacherTargets<S>& targets,
                          SupervisionMode mode, const SequenceLayout& layout,
                          bool prefix_aux = false) {
    if (mode != targets.mode) {
        throw std::invalid_argument("mtp_loss: mode does not match targets");
    }
    const std::vector<int> sup = layout.supervised_slots();
    if (sup.empty()) {
        throw std::invalid_argument("mtp_loss: empty supervision (layout has no regions)");
    }
    MtpLossResult<S> out;
    out.dlogits = MatR<S>::Zero(student_logits.rows(), student_logits.cols());
    out.breakdown.supervised_count = static_cast<int>(sup.size());

    const bool soft = mode == SupervisionMode::soft_teacher;
    if (soft) {
        if (targets.probs.rows() != static_cast<Eigen::Index>(sup.size()) ||
            targets.probs.cols() != student_logits.cols()) {
            throw std::invalid_argument("mtp_loss: target distribution shape mismatch");
        }
        for (Eigen::Index i = 0; i < targets.probs.rows(); ++i) {
            const double sum = static_cast<double>(targets.probs.row(i).sum());
            if (std::abs(sum - 1.0) > 1e-6) {
                throw std::invalid_argument("mtp_loss: invalid target distribution (sums to " +
                                            std::to_string(sum) + ")");
            }
        }
    } else if (targets.tokens.size() != sup.size()) {
        throw std::invalid_argument("mtp_loss: target token count mismatch");
    }

    const double inv = 1.0 / static_cast<double>(sup.size());
    int matches = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < sup.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(sup[i]);
        const S mx = student_logits.row(r).maxCoeff();
        VecC<S> p = (student_logits.row(r).array() - mx).exp().matrix().transpose();
        p /= p.sum();
        const TokenId student_tok = detail::argmax_row(student_logits.row(r));
        if (soft) {
            const auto q = targets.probs.row(static_cast<Eigen::Index>(i));
            double ce = 0.0;
            for (Eigen::Index j = 0; j < p.size(); ++j) {
                if (q(j) > S(0)) {
                    ce -= static_cast<double>(q(j)) *
                          detail::log_softmax_at<S>(student_logits.row(r), static_cast<TokenId>(j));
                }
            }
            loss += ce;
            out.dlogits.row(r) = ((p.transpose() - q) * static_cast<S>(inv));
            if (student_tok == detail::argmax_row(q)) ++matches;
        } else {
            const TokenId tgt = targets.tokens[i];
            if (tgt < 0 || tgt >= student_logits.cols()) {
                throw std::invalid_argument("mtp_loss: invalid target token");
            }
            loss -= static_cast<double>(std::log(p(tgt)));
            out.dlogits.row(r) = (p * static_cast<S>(inv)).transpose();
            out.dlogits(r, tgt) -= static_cast<S>(inv);
            if (student_tok == tgt) ++matches;
        }
    }
    out.breakdown.mtp_loss = loss * inv;
    out.breakdown.match_rate = static_cast<double>(matches) / static_cast<double>(sup.size());

    if (prefix_aux) {
        std::vector<std::uint8_t> prefix_flags(layout.ntp_target_ids.size(), 0);
        int n_prefix = 0;
        for (std::size_t s = 0; s < prefix_flags.size(); ++s) {
            if (layout.kinds[s] == SlotKind::prefix_gt && layout.ntp_target_ids[s] >= 0) {
                prefix_flags[s] = 1;
                ++n_prefix;
            }
        }
        if (n_prefix > 0) {
            NtpLossResult<S> aux = ntp_loss(student_logits, layout.ntp_target_ids, prefix_flags);
            out.breakdown.prefix_loss = aux.loss;
            out.dlogits += aux.dlogits;
        }
    }
    return out;
}

// Chain-rule log-likelihood of a continuation under the teacher, via
// sequential cached forwards (chain-rule product over the continuation).
template <typename S>
double teacher_sequence_loglik(const Parameters<S>& teacher, const std::vector<TokenId>& prefix,
                               const std::vector<TokenId>& continuation) {
    if (continuation.empty()) {
        throw std::invalid_argument("teacher_sequence_loglik: empty continuation");
    }
    if (prefix.empty()) {
        throw std::invalid_argument("teacher_sequence_loglik: empty prefix");
    }
    KvCache<S> cache = KvCache<S>::make(teacher.config,
                                        static_cast<int>(prefix.size() + continuation.size()));
    std::vector<int> pos(prefix.size());
    for (std::size_t i = 0; i < prefix.size(); ++i) pos[i] = static_cast<int>(i);
    MatR<S> logits = forward_cached(teacher, cache, prefix, pos);
    double total = 0.0;
    for (std::size_t j = 0; j < continuation.size(); ++j) {
        total += detail::log_softmax_at<S>(logits.row(logits.rows() - 1), continuation[j]);
        if (j + 1 < continuation.size()) {
            logits = forward_cached(teacher, cache, {continuation[j]},
                                    {static_cast<int>(prefix.size() + j)});
        }
    }
    return total;
}

}  // namespace mtp
