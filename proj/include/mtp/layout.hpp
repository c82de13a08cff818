#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mtp/corpus.hpp"

namespace mtp {

// Geometry of one training window. The period structure is fixed by k_max so
// tensor shapes stay constant across steps; the sampled k only shrinks how
// many slots per region carry supervision.
struct LayoutParams {
    int window = 0;        // N physical slots
    int k = 0;             // tokens supervised per region, 2 <= k <= k_max
    int k_max = 0;         // span geometry
    int region_count = 0;  // M = floor(N / (2*k_max)), nominal
    int offset = 0;        // leftward shift of the region pattern, -(2*k_max-1) <= offset <= 0
};

LayoutParams make_layout_params(int window, int k, int k_max, int offset);

struct RegionPlan {
    int region_count = 0;   // M
    int period_length = 0;  // 2*k_max
    std::vector<std::pair<int, int>> periods;  // [start, end) slot ranges at offset 0
};

RegionPlan plan_regions(int window, int k_max);

enum class SlotKind : std::uint8_t {
    prefix_gt = 0,    // ground-truth track, unsupervised
    region_base = 1,  // last prefix token of a region (first supervised slot)
    region_mask = 2,  // supervised MTP mask slot
    pad = 3,          // ignored entirely (includes demoted trailing masks when k < k_max)
};

struct Region {
    int first_slot = 0;  // the region_base slot
    int span = 0;        // k supervised slots: [first_slot, first_slot + span)
    int mask_begin = 0;  // first mask slot (= first_slot + 1)
    int mask_end = 0;    // geometric end (exclusive) = first_slot + k_max
    int base_pos = 0;    // original-sequence position held by the base slot
};

struct SequenceLayout {
    LayoutParams params;
    std::vector<TokenId> input_ids;        // N; mtp_id at mask slots, pad_id in ignored tail
    std::vector<int> pos_ids;              // N; original-sequence positions
    std::vector<std::uint8_t> pred_flags;  // N; supervised slots
    std::vector<TokenId> target_ids;       // N; kIgnoreTarget off supervision
    std::vector<TokenId> ntp_target_ids;   // N; next-token target at every GT-track slot
    std::vector<SlotKind> kinds;           // N
    std::vector<Region> regions;           // unclipped regions, ascending

    int window() const { return static_cast<int>(input_ids.size()); }
    std::vector<int> supervised_slots() const;  // ascending slot indices
    int supervised_count() const;
};

// Builds the interleaved ground-truth/mask window with replicated tokens,
// adjusted position ids, prediction flags and targets. The first EOS in
// `tokens` terminates supervision: the enclosing region's targets are filled
// with EOS and everything after it becomes pad. A sequence without EOS is
// treated as if EOS followed its last token.
SequenceLayout build_layout(const std::vector<TokenId>& tokens, const LayoutParams& params,
                            const Vocab& vocab);

// Zero-region window: plain ground-truth track plus pad tail. This is the NTP
// pretraining layout and the degenerate case the mask tests rely on.
SequenceLayout build_plain_layout(const std::vector<TokenId>& tokens, int window,
                                  const Vocab& vocab);

// k uniform in {2..k_max}, offset uniform in {-(2*k_max-1)..0}.
LayoutParams sample_params(std::mt19937_64& rng, int window, int k_max);

// Teacher input: each region's k-1 supervised mask slots replaced by the
// student rollout tokens y'_1..y'_{k-1} (the slot predicting y'_{j+1} receives
// y'_j). Ground-truth and pad slots unchanged; pos_ids are reused as-is.
std::vector<TokenId> substitute_rollout(const SequenceLayout& layout,
                                        const std::vector<std::vector<TokenId>>& rollouts);

// Golden-file dump, one comma-separated line per table row.
std::string dump_layout(const SequenceLayout& layout);

}  // namespace mtp
