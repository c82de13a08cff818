#include "mtp/layout.hpp"

#include <algorithm>
#include <sstream>

namespace mtp {

LayoutParams make_layout_params(int window, int k, int k_max, int offset) {
    if (k_max < 2) {
        throw std::invalid_argument("layout: k_max must be >= 2");
    }
    if (k < 2 || k > k_max) {
        throw std::invalid_argument("layout: k must satisfy 2 <= k <= k_max (got k=" +
                                    std::to_string(k) + ", k_max=" + std::to_string(k_max) + ")");
    }
    if (offset > 0 || offset < -(2 * k_max - 1)) {
        throw std::invalid_argument("layout: offset must lie in [-(2*k_max-1), 0]");
    }
    const RegionPlan plan = plan_regions(window, k_max);
    LayoutParams p;
    p.window = window;
    p.k = k;
    p.k_max = k_max;
    p.region_count = plan.region_count;
    p.offset = offset;
    return p;
}

RegionPlan plan_regions(int window, int k_max) {
    if (k_max < 2) {
        throw std::invalid_argument("plan_regions: k_max must be >= 2");
    }
    if (window < 2 * k_max) {
        throw std::invalid_argument("plan_regions: window too small (" + std::to_string(window) +
                                    " < " + std::to_string(2 * k_max) + ")");
    }
    RegionPlan plan;
    plan.period_length = 2 * k_max;
    plan.region_count = window / plan.period_length;
    plan.periods.reserve(static_cast<std::size_t>(plan.region_count));
    for (int r = 0; r < plan.region_count; ++r) {
        plan.periods.emplace_back(r * plan.period_length, (r + 1) * plan.period_length);
    }
    return plan;
}

std::vector<int> SequenceLayout::supervised_slots() const {
    std::vector<int> out;
    for (int s = 0; s < window(); ++s) {
        if (pred_flags[static_cast<std::size_t>(s)]) {
            out.push_back(s);
        }
    }
    return out;
}

int SequenceLayout::supervised_count() const {
    int n = 0;
    for (auto f : pred_flags) {
        n += f ? 1 : 0;
    }
    return n;
}

namespace {

// Raw periodic pattern before position bookkeeping. local index in [0, k_max]
// is a ground-truth slot, the last of them (== k_max) a region base.
struct RawSlot {
    SlotKind kind;
    int mask_j;  // for masks: 1..k_max-1
};

std::vector<RawSlot> classify_slots(int window, int k_max, int offset) {
    const int period = 2 * k_max;
    const int region_cap = window / period;  // M stays fixed across offsets
    std::vector<RawSlot> raw(static_cast<std::size_t>(window));
    for (int s = 0; s < window; ++s) {
        const int local = (s - offset) % period;
        auto& r = raw[static_cast<std::size_t>(s)];
        if (local < k_max) {
            r = {SlotKind::prefix_gt, 0};
        } else if (local == k_max) {
            r = {SlotKind::region_base, 0};
        } else {
            r = {SlotKind::region_mask, local - k_max};
        }
    }
    // Left clip: masks whose region base fell before slot 0 become prefix.
    for (int s = 0; s < window; ++s) {
        auto& r = raw[static_cast<std::size_t>(s)];
        if (r.kind == SlotKind::region_mask && s - r.mask_j < 0) {
            r = {SlotKind::prefix_gt, 0};
        }
    }
    // Right clip and region cap: a region whose geometric mask run does not
    // fit, or that would exceed the fixed region count M, is demoted to
    // prefix (remainder slots are prefix-only).
    int bases = 0;
    for (int s = 0; s < window; ++s) {
        auto& r = raw[static_cast<std::size_t>(s)];
        if (r.kind != SlotKind::region_base) {
            continue;
        }
        if (s + k_max - 1 > window - 1) {
            for (int m = s; m < window; ++m) {
                raw[static_cast<std::size_t>(m)] = {SlotKind::prefix_gt, 0};
            }
            break;
        }
        ++bases;
        if (bases > region_cap) {
            raw[static_cast<std::size_t>(s)] = {SlotKind::prefix_gt, 0};
            for (int m = s + 1; m < s + k_max && m < window; ++m) {
                raw[static_cast<std::size_t>(m)] = {SlotKind::prefix_gt, 0};
            }
        }
    }
    return raw;
}

}  // namespace

SequenceLayout build_layout(const std::vector<TokenId>& tokens, const LayoutParams& params,
                            const Vocab& vocab) {
    if (tokens.empty()) {
        throw std::invalid_argument("build_layout: empty input");
    }
    const int n = params.window;
    const int k = params.k;
    const int k_max = params.k_max;

    // First EOS terminates the ground-truth sequence; a sequence without EOS
    // behaves as if EOS followed its last token.
    int eos_at = static_cast<int>(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == vocab.eos_id) {
            eos_at = static_cast<int>(i);
            break;
        }
    }
    // Target for predicting original position q: the token itself below the
    // EOS boundary, EOS at or beyond it (terminal regions fill with EOS).
    auto target_at = [&](int q) -> TokenId {
        return q < eos_at ? tokens[static_cast<std::size_t>(q)] : vocab.eos_id;
    };

    SequenceLayout out;
    out.params = params;
    out.input_ids.assign(static_cast<std::size_t>(n), vocab.pad_id);
    out.pos_ids.assign(static_cast<std::size_t>(n), 0);
    out.pred_flags.assign(static_cast<std::size_t>(n), 0);
    out.target_ids.assign(static_cast<std::size_t>(n), kIgnoreTarget);
    out.ntp_target_ids.assign(static_cast<std::size_t>(n), kIgnoreTarget);
    out.kinds.assign(static_cast<std::size_t>(n), SlotKind::pad);

    const auto raw = classify_slots(n, k_max, params.offset);

    int next_pos = 0;        // next original position on the ground-truth track
    int base_pos = -1;       // position held by the current region's base slot
    bool terminal = false;   // current region is the EOS-terminating one
    bool exhausted = false;  // everything from here on is pad

    for (int s = 0; s < n && !exhausted; ++s) {
        const auto& r = raw[static_cast<std::size_t>(s)];
        const auto si = static_cast<std::size_t>(s);
        switch (r.kind) {
            case SlotKind::prefix_gt: {
                if (next_pos >= eos_at) {
                    exhausted = true;  // EOS is never fed as input
                    break;
                }
                out.kinds[si] = SlotKind::prefix_gt;
                out.input_ids[si] = tokens[static_cast<std::size_t>(next_pos)];
                out.pos_ids[si] = next_pos;
                out.ntp_target_ids[si] = target_at(next_pos + 1);
                ++next_pos;
                break;
            }
            case SlotKind::region_base: {
                if (next_pos >= eos_at) {
                    exhausted = true;
                    break;
                }
                base_pos = next_pos;
                terminal = eos_at <= base_pos + k_max;
                out.kinds[si] = SlotKind::region_base;
                out.input_ids[si] = tokens[static_cast<std::size_t>(base_pos)];
                out.pos_ids[si] = base_pos;
                out.pred_flags[si] = 1;
                out.target_ids[si] = target_at(base_pos + 1);
                out.ntp_target_ids[si] = out.target_ids[si];
                Region reg;
                reg.first_slot = s;
                reg.span = k;
                reg.mask_begin = s + 1;
                reg.mask_end = s + k_max;
                reg.base_pos = base_pos;
                out.regions.push_back(reg);
                ++next_pos;
                break;
            }
            case SlotKind::region_mask: {
                const int j = r.mask_j;  // 1..k_max-1
                out.pos_ids[si] = base_pos + j;
                if (j <= k - 1) {
                    out.kinds[si] = SlotKind::region_mask;
                    out.input_ids[si] = vocab.mtp_id;
                    out.pred_flags[si] = 1;
                    out.target_ids[si] = target_at(base_pos + j + 1);
                } else {
                    // Sampled k < k_max: supervision shrinks, geometry stays.
                    out.kinds[si] = SlotKind::pad;
                    out.input_ids[si] = vocab.pad_id;
                }
                if (j == k_max - 1) {
                    if (terminal) {
                        exhausted = true;
                    } else {
                        next_pos = base_pos + 1;  // replicate predicted tokens next period
                    }
                }
                break;
            }
            case SlotKind::pad:
                break;
        }
    }
    return out;
}

SequenceLayout build_plain_layout(const std::vector<TokenId>& tokens, int window,
                                  const Vocab& vocab) {
    if (tokens.empty()) {
        throw std::invalid_argument("build_plain_layout: empty input");
    }
    int eos_at = static_cast<int>(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == vocab.eos_id) {
            eos_at = static_cast<int>(i);
            break;
        }
    }
    SequenceLayout out;
    out.params.window = window;
    out.params.k = 0;
    out.params.k_max = 0;
    out.params.region_count = 0;
    out.params.offset = 0;
    out.input_ids.assign(static_cast<std::size_t>(window), vocab.pad_id);
    out.pos_ids.assign(static_cast<std::size_t>(window), 0);
    out.pred_flags.assign(static_cast<std::size_t>(window), 0);
    out.target_ids.assign(static_cast<std::size_t>(window), kIgnoreTarget);
    out.ntp_target_ids.assign(static_cast<std::size_t>(window), kIgnoreTarget);
    out.kinds.assign(static_cast<std::size_t>(window), SlotKind::pad);
    const int fill = std::min(window, eos_at);
    for (int s = 0; s < fill; ++s) {
        const auto si = static_cast<std::size_t>(s);
        out.kinds[si] = SlotKind::prefix_gt;
        out.input_ids[si] = tokens[si];
        out.pos_ids[si] = s;
        out.ntp_target_ids[si] = s + 1 < eos_at ? tokens[si + 1] : vocab.eos_id;
    }
    return out;
}

LayoutParams sample_params(std::mt19937_64& rng, int window, int k_max) {
    const RegionPlan plan = plan_regions(window, k_max);
    std::uniform_int_distribution<int> k_dist(2, k_max);
    std::uniform_int_distribution<int> off_dist(-(2 * k_max - 1), 0);
    const int k = k_dist(rng);
    const int offset = off_dist(rng);
    LayoutParams p;
    p.window = window;
    p.k = k;
    p.k_max = k_max;
    p.region_count = plan.region_count;
    p.offset = offset;
    return p;
}

std::vector<TokenId> substitute_rollout(const SequenceLayout& layout,
                                        const std::vector<std::vector<TokenId>>& rollouts) {
    if (rollouts.size() != layout.regions.size()) {
        throw std::invalid_argument("substitute_rollout: expected " +
                                    std::to_string(layout.regions.size()) + " rollouts, got " +
                                    std::to_string(rollouts.size()));
    }
    std::vector<TokenId> out = layout.input_ids;
    for (std::size_t r = 0; r < rollouts.size(); ++r) {
        const Region& reg = layout.regions[r];
        if (static_cast<int>(rollouts[r].size()) != reg.span) {
            throw std::invalid_argument("substitute_rollout: rollout " + std::to_string(r) +
                                        " has length " + std::to_string(rollouts[r].size()) +
                                        ", region span is " + std::to_string(reg.span));
        }
        for (int j = 1; j < reg.span; ++j) {
            out[static_cast<std::size_t>(reg.first_slot + j)] = rollouts[r][static_cast<std::size_t>(j - 1)];
        }
    }
    return out;
}

std::string dump_layout(const SequenceLayout& layout) {
    std::ostringstream os;
    auto row = [&os](const char* name, auto get, int n) {
        os << name;
        for (int i = 0; i < n; ++i) {
            os << ',' << get(i);
        }
        os << '\n';
    };
    const int n = layout.window();
    row("TokID", [&](int i) { return layout.input_ids[static_cast<std::size_t>(i)]; }, n);
    row("PosID", [&](int i) { return layout.pos_ids[static_cast<std::size_t>(i)]; }, n);
    row("Pred", [&](int i) { return static_cast<int>(layout.pred_flags[static_cast<std::size_t>(i)]); }, n);
    row("TgtID", [&](int i) { return layout.target_ids[static_cast<std::size_t>(i)]; }, n);
    return os.str();
}

}  // namespace mtp
