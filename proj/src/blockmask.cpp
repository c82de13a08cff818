#include "mtp/blockmask.hpp"

namespace mtp {

namespace {

bool is_gt_track(SlotKind k) {
    return k == SlotKind::prefix_gt || k == SlotKind::region_base;
}

// Region index owning mask slot s, or -1.
int owning_region(const SequenceLayout& layout, int s) {
    for (std::size_t r = 0; r < layout.regions.size(); ++r) {
        const Region& reg = layout.regions[r];
        if (s >= reg.mask_begin && s < reg.mask_end) {
            return static_cast<int>(r);
        }
    }
    return -1;
}

}  // namespace

AttentionMask build_blocked_causal(const SequenceLayout& layout) {
    const int n = layout.window();
    AttentionMask m;
    m.n = n;
    m.allow.assign(static_cast<std::size_t>(n) * n, 0);
    for (int q = 0; q < n; ++q) {
        m.set(q, q, true);
        const SlotKind qk = layout.kinds[static_cast<std::size_t>(q)];
        if (qk == SlotKind::pad) {
            continue;
        }
        const int q_region = qk == SlotKind::region_mask ? owning_region(layout, q) : -1;
        for (int k = 0; k < q; ++k) {
            const SlotKind kk = layout.kinds[static_cast<std::size_t>(k)];
            if (is_gt_track(kk)) {
                m.set(q, k, true);
            } else if (kk == SlotKind::region_mask && q_region >= 0 &&
                       owning_region(layout, k) == q_region) {
                m.set(q, k, true);
            }
        }
    }
    return m;
}

AttentionMask build_blocked_bidirectional(const SequenceLayout& layout) {
    AttentionMask m = build_blocked_causal(layout);
    for (const Region& reg : layout.regions) {
        for (int a = reg.first_slot; a < reg.first_slot + reg.span; ++a) {
            for (int b = reg.first_slot; b < reg.first_slot + reg.span; ++b) {
                m.set(a, b, true);
            }
        }
    }
    return m;
}

AttentionMask build_plain_causal(int n) {
    AttentionMask m;
    m.n = n;
    m.allow.assign(static_cast<std::size_t>(n) * n, 0);
    for (int q = 0; q < n; ++q) {
        for (int k = 0; k <= q; ++k) {
            m.set(q, k, true);
        }
    }
    return m;
}

std::string render_mask(const AttentionMask& mask) {
    std::string out;
    out.reserve(static_cast<std::size_t>(mask.n) * (mask.n + 1));
    for (int q = 0; q < mask.n; ++q) {
        for (int k = 0; k < mask.n; ++k) {
            out.push_back(mask.at(q, k) ? '#' : '.');
        }
        out.push_back('\n');
    }
    return out;
}

}  // namespace mtp
