#include "mtp/corpus.hpp"

#include <fstream>
#include <random>
#include <sstream>

namespace mtp {

Vocab build_vocab(const std::string& charset) {
    if (charset.empty()) {
        throw std::invalid_argument("build_vocab: charset must be non-empty");
    }
    Vocab v;
    v.char_to_id.fill(-1);
    v.symbols = charset;
    for (std::size_t i = 0; i < charset.size(); ++i) {
        const auto c = static_cast<unsigned char>(charset[i]);
        if (v.char_to_id[c] != -1) {
            throw std::invalid_argument("build_vocab: duplicate character in charset: '" +
                                        std::string(1, charset[i]) + "'");
        }
        v.char_to_id[c] = static_cast<TokenId>(i);
    }
    const auto n = static_cast<TokenId>(charset.size());
    v.bos_id = n;
    v.eos_id = n + 1;
    v.pad_id = n + 2;
    v.mtp_id = n + 3;
    v.size = n + 4;
    return v;
}

std::vector<TokenId> encode(std::string_view text, const Vocab& vocab) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char ch : text) {
        const TokenId id = vocab.char_to_id[static_cast<unsigned char>(ch)];
        if (id < 0) {
            throw std::invalid_argument("encode: character not in vocab: '" + std::string(1, ch) +
                                        "'");
        }
        out.push_back(id);
    }
    return out;
}

std::string decode(const std::vector<TokenId>& ids, const Vocab& vocab) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id < 0 || id >= static_cast<TokenId>(vocab.symbols.size())) {
            throw std::invalid_argument("decode: id " + std::to_string(id) +
                                        " is not a plain symbol");
        }
        out.push_back(vocab.symbols[static_cast<std::size_t>(id)]);
    }
    return out;
}

std::vector<CorpusSample> gen_arithmetic(std::uint64_t seed, int count, int max_operand,
                                         const Vocab& vocab) {
    if (count <= 0) {
        throw std::invalid_argument("gen_arithmetic: count must be positive");
    }
    if (max_operand < 1) {
        throw std::invalid_argument("gen_arithmetic: max_operand must be >= 1");
    }
    auto rng = make_rng(seed, 0x636f7270);
    std::uniform_int_distribution<long long> dist(0, max_operand);
    std::vector<CorpusSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const long long a = dist(rng);
        const long long b = dist(rng);
        CorpusSample s;
        s.prompt = encode(std::to_string(a) + "+" + std::to_string(b) + "=", vocab);
        s.completion = encode(std::to_string(a + b), vocab);
        s.completion.push_back(vocab.eos_id);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<TokenId> sample_tokens(const CorpusSample& s, const Vocab& vocab,
                                   bool include_completion) {
    std::vector<TokenId> toks;
    toks.reserve(1 + s.prompt.size() + s.completion.size());
    toks.push_back(vocab.bos_id);
    toks.insert(toks.end(), s.prompt.begin(), s.prompt.end());
    if (include_completion) {
        toks.insert(toks.end(), s.completion.begin(), s.completion.end());
    }
    return toks;
}

void save_corpus(const std::string& path, const std::vector<CorpusSample>& samples,
                 const Vocab& vocab) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("save_corpus: cannot open " + path);
    }
    for (const auto& s : samples) {
        std::vector<TokenId> body(s.completion.begin(), s.completion.end() - 1);  // drop EOS
        f << decode(s.prompt, vocab) << '\t' << decode(body, vocab) << '\n';
    }
}

std::vector<CorpusSample> load_corpus(const std::string& path, const Vocab& vocab) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("load_corpus: cannot open " + path);
    }
    std::vector<CorpusSample> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) {
            continue;  // tolerate trailing newline
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw std::runtime_error("load_corpus: malformed record (missing tab): " + line);
        }
        CorpusSample s;
        s.prompt = encode(std::string_view(line).substr(0, tab), vocab);
        s.completion = encode(std::string_view(line).substr(tab + 1), vocab);
        if (s.completion.empty()) {
            throw std::runtime_error("load_corpus: empty completion in record: " + line);
        }
        s.completion.push_back(vocab.eos_id);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace mtp
