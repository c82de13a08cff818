#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtp/layout.hpp"

namespace mtp {

// Boolean allow-matrix; allow(q, k) says query slot q may attend to key slot k.
struct AttentionMask {
    int n = 0;
    std::vector<std::uint8_t> allow;  // n*n row-major

    bool at(int q, int k) const { return allow[static_cast<std::size_t>(q) * n + k] != 0; }
    void set(int q, int k, bool v) { allow[static_cast<std::size_t>(q) * n + k] = v ? 1 : 0; }

    bool operator==(const AttentionMask& o) const { return n == o.n && allow == o.allow; }
};

// Blocked causal: ground-truth slots attend to earlier ground-truth slots and
// skip MTP spans; mask slots additionally attend to earlier masks of their own
// region only. Pad slots are isolated (self-attention only).
AttentionMask build_blocked_causal(const SequenceLayout& layout);

// Ablation variant: within each region's supervised span attention is
// all-to-all; everything else matches blocked causal.
AttentionMask build_blocked_bidirectional(const SequenceLayout& layout);

AttentionMask build_plain_causal(int n);

// '#' allow, '.' deny; one row per line.
std::string render_mask(const AttentionMask& mask);

}  // namespace mtp
