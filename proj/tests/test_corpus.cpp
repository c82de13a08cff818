#include <cstdio>
#include <random>

#include "doctest.h"
#include "mtp/corpus.hpp"

using namespace mtp;

TEST_CASE("build_vocab counts symbols plus the four specials") {
    const Vocab v = build_vocab("ab");
    CHECK(v.size == 6);
    CHECK(v.bos_id == 2);
    CHECK(v.eos_id == 3);
    CHECK(v.pad_id == 4);
    CHECK(v.mtp_id == 5);

    const Vocab digits = build_vocab("0123456789+=");
    CHECK(digits.size == 16);
}

TEST_CASE("build_vocab is deterministic and rejects duplicates") {
    const Vocab a = build_vocab("xyz");
    const Vocab b = build_vocab("xyz");
    CHECK(a.symbols == b.symbols);
    CHECK(a.bos_id == b.bos_id);
    CHECK(a.mtp_id == b.mtp_id);
    CHECK_THROWS_AS(build_vocab("aa"), std::invalid_argument);
    CHECK_THROWS_AS(build_vocab(""), std::invalid_argument);
}

TEST_CASE("encode basics") {
    const Vocab v = build_vocab("ab");
    CHECK(encode("", v).empty());
    CHECK(encode("a", v) == std::vector<TokenId>{0});
    CHECK_THROWS_AS(encode("q", v), std::invalid_argument);
}

TEST_CASE("encode/decode round trip over random strings") {
    const std::string charset = "abcdefgh0123+=";
    const Vocab v = build_vocab(charset);
    std::mt19937_64 rng(123);
    std::uniform_int_distribution<std::size_t> pick(0, charset.size() - 1);
    std::uniform_int_distribution<int> len(0, 40);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string s;
        const int n = len(rng);
        for (int i = 0; i < n; ++i) s.push_back(charset[pick(rng)]);
        CHECK(decode(encode(s, v), v) == s);
    }
}

TEST_CASE("gen_arithmetic is deterministic and arithmetically sound") {
    const Vocab v = build_vocab("0123456789+=");
    const auto a = gen_arithmetic(1, 2, 99, v);
    const auto b = gen_arithmetic(1, 2, 99, v);
    REQUIRE(a.size() == 2);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].prompt == b[i].prompt);
        CHECK(a[i].completion == b[i].completion);
    }

    const auto samples = gen_arithmetic(42, 200, 99, v);
    for (const auto& s : samples) {
        REQUIRE(!s.completion.empty());
        CHECK(s.completion.back() == v.eos_id);
        // completion = up to 3 digits plus EOS for operands <= 99
        CHECK(s.completion.size() <= 4);
        const std::string text = decode(s.prompt, v);
        const auto plus = text.find('+');
        const auto eq = text.find('=');
        REQUIRE(plus != std::string::npos);
        REQUIRE(eq == text.size() - 1);
        const long long x = std::stoll(text.substr(0, plus));
        const long long y = std::stoll(text.substr(plus + 1, eq - plus - 1));
        std::vector<TokenId> body(s.completion.begin(), s.completion.end() - 1);
        CHECK(std::stoll(decode(body, v)) == x + y);
        for (TokenId id : s.prompt) {
            CHECK(!v.is_special(id));
        }
        for (std::size_t j = 0; j + 1 < s.completion.size(); ++j) {
            CHECK(!v.is_special(s.completion[j]));
        }
    }
}

TEST_CASE("corpus file round trip") {
    const Vocab v = build_vocab("0123456789+=");
    const auto samples = gen_arithmetic(7, 25, 999, v);
    const std::string path = "corpus_roundtrip.txt";
    save_corpus(path, samples, v);
    const auto loaded = load_corpus(path, v);
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].prompt == samples[i].prompt);
        CHECK(loaded[i].completion == samples[i].completion);
    }
    std::remove(path.c_str());
}
