#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mtp/common.hpp"

namespace mtp {

// Character-level vocabulary: charset symbols first, then the four special
// tokens (BOS, EOS, PAD, MTP mask) appended in that order.
struct Vocab {
    std::string symbols;  // id i < symbols.size() maps to symbols[i]
    TokenId bos_id = -1;
    TokenId eos_id = -1;
    TokenId pad_id = -1;
    TokenId mtp_id = -1;
    int size = 0;  // V

    std::array<TokenId, 256> char_to_id{};  // -1 where absent

    bool is_special(TokenId id) const {
        return id == bos_id || id == eos_id || id == pad_id || id == mtp_id;
    }
    bool is_valid(TokenId id) const { return id >= 0 && id < size; }
};

Vocab build_vocab(const std::string& charset);

std::vector<TokenId> encode(std::string_view text, const Vocab& vocab);
std::string decode(const std::vector<TokenId>& ids, const Vocab& vocab);

// One training row: prompt is consumed as context, completion (EOS-terminated)
// is what the model should produce.
struct CorpusSample {
    std::vector<TokenId> prompt;
    std::vector<TokenId> completion;  // ends with eos_id
};

// Deterministic "A+B=" -> "C<EOS>" samples, operands uniform in [0, max_operand].
std::vector<CorpusSample> gen_arithmetic(std::uint64_t seed, int count, int max_operand,
                                         const Vocab& vocab);

// Model input for one sample: BOS + prompt (+ completion for training windows).
std::vector<TokenId> sample_tokens(const CorpusSample& s, const Vocab& vocab,
                                   bool include_completion = true);

// prompt\tcompletion text records, one per line.
void save_corpus(const std::string& path, const std::vector<CorpusSample>& samples,
                 const Vocab& vocab);
std::vector<CorpusSample> load_corpus(const std::string& path, const Vocab& vocab);

}  // namespace mtp
