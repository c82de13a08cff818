#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "mtp/bench.hpp"
#include "test_util.hpp"

using namespace mtp;
using testutil::small_config;

namespace {

const Vocab& vocab16() {
    static const Vocab v = build_vocab("0123456789+=");
    return v;
}

}  // namespace

TEST_CASE("spearman rank correlation") {
    CHECK(spearman_rho({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman_rho({1, 2, 3, 4}, {5, 4, 3, 2}) == doctest::Approx(-1.0));
    // monotone in rank even if nonlinear in value
    CHECK(spearman_rho({1, 2, 3, 4}, {1, 10, 100, 1000}) == doctest::Approx(1.0));
    // constant series: no signal
    CHECK(spearman_rho({1, 1, 1}, {3, 2, 1}) == doctest::Approx(0.0));
    CHECK_THROWS_AS(spearman_rho({1}, {2}), std::invalid_argument);
}

TEST_CASE("lambda grid matches the benchmark sweep") {
    const std::vector<double> expected = {0.995, 0.99, 0.98, 0.97, 0.96, 0.95, 0.9,
                                          0.87,  0.85, 0.8,  0.75, 0.7,  0.65, 0.6};
    CHECK(kLambdaGrid == expected);
    const auto strategies = default_strategies();
    CHECK(strategies.size() == 5 + expected.size());
    CHECK(strategies[0] == "static:1");
    CHECK(strategies[4] == "static:5");
}

TEST_CASE("generation_correct compares the pre-EOS answer") {
    const Vocab& v = vocab16();
    CorpusSample s;
    s.prompt = encode("1+2=", v);
    s.completion = encode("3", v);
    s.completion.push_back(v.eos_id);

    DecodeTrace good;
    good.generated = {encode("3", v)[0], v.eos_id};
    good.ended_with_eos = true;
    CHECK(generation_correct(good, s, v));

    DecodeTrace wrong = good;
    wrong.generated[0] = encode("4", v)[0];
    CHECK(!generation_correct(wrong, s, v));

    DecodeTrace unfinished;
    unfinished.generated = {encode("3", v)[0]};
    unfinished.ended_with_eos = false;
    CHECK(!generation_correct(unfinished, s, v));
}

TEST_CASE("sweep: static rows report eff-k equal to k; CSVs round trip") {
    const Vocab& v = vocab16();
    auto prng = make_rng(17);
    const auto model = init_parameters<float>(small_config(v.size, 16, 1, 2, 32, 128), prng);
    const auto eval_set = gen_arithmetic(31, 6, 99, v);

    BenchOptions opts;
    opts.k_max = 4;
    opts.max_new_tokens = 8;
    opts.threads = 2;
    const SweepResult sweep = run_bench(model, model, eval_set, v,
                                        {"static:1", "static:3", "conf:0.9", "conf:0.5"}, opts);
    REQUIRE(sweep.rows.size() == 4);
    CHECK(sweep.rows[0].accel_mean == doctest::Approx(1.0));
    CHECK(sweep.rows[0].accel_se == doctest::Approx(0.0));
    CHECK(sweep.rows[1].accel_mean == doctest::Approx(3.0));
    for (const auto& r : sweep.rows) {
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
        CHECK(std::isfinite(r.teacher_nll));
    }

    const std::string path = "sweep_roundtrip.csv";
    write_sweep_csv(path, sweep);
    const SweepResult loaded = load_sweep_csv(path);
    REQUIRE(loaded.rows.size() == sweep.rows.size());
    for (std::size_t i = 0; i < sweep.rows.size(); ++i) {
        CHECK(loaded.rows[i].strategy == sweep.rows[i].strategy);
        CHECK(loaded.rows[i].accuracy == doctest::Approx(sweep.rows[i].accuracy));
        CHECK(loaded.rows[i].teacher_nll == doctest::Approx(sweep.rows[i].teacher_nll));
        CHECK(loaded.rows[i].accel_mean == doctest::Approx(sweep.rows[i].accel_mean));
    }
    write_sweep_dat("sweep_roundtrip.dat", sweep);
    std::ifstream dat("sweep_roundtrip.dat");
    CHECK(dat.good());
    std::remove(path.c_str());
    std::remove("sweep_roundtrip.dat");
}

TEST_CASE("corr study emits one row per prompt and a re-parseable CSV") {
    const Vocab& v = vocab16();
    auto prng = make_rng(19);
    const auto model = init_parameters<float>(small_config(v.size, 16, 1, 2, 32, 128), prng);
    const auto samples = gen_arithmetic(37, 12, 99, v);
    const CorrResult corr = run_corr(model, model, samples, v, 4, 2);
    CHECK(corr.rows.size() == samples.size());
    for (const auto& r : corr.rows) {
        CHECK(r.confidence > 0.0);
        CHECK(r.confidence <= 1.0);
        CHECK(std::isfinite(r.teacher_nll));
    }
    const std::string path = "corr_roundtrip.csv";
    write_corr_csv(path, corr);
    const CorrResult loaded = load_corr_csv(path);
    CHECK(loaded.rows.size() == corr.rows.size());
    CHECK(loaded.spearman == doctest::Approx(corr.spearman));
    std::remove(path.c_str());
}

TEST_CASE("strategy spec parsing") {
    int k = 0;
    double lambda = 0.0;
    CHECK(parse_strategy("static:3", k, lambda) == DecodeConfig::Strategy::static_k);
    CHECK(k == 3);
    CHECK(parse_strategy("conf:0.95", k, lambda) == DecodeConfig::Strategy::conf_adapt);
    CHECK(lambda == doctest::Approx(0.95));
    CHECK_THROWS_AS(parse_strategy("bogus", k, lambda), std::invalid_argument);
}

TEST_CASE("untrained model gives near-unit chunk acceptance at lambda=0.9") {
    const Vocab& v = vocab16();
    auto prng = make_rng(23);
    const auto model = init_parameters<float>(small_config(v.size, 32, 2, 4, 64, 128), prng);
    const auto eval_set = gen_arithmetic(41, 40, 999, v);
    DecodeConfig cfg;
    cfg.strategy = DecodeConfig::Strategy::conf_adapt;
    cfg.lambda = 0.9;
    cfg.k_max = 8;
    cfg.max_new_tokens = 12;
    cfg.eos_id = v.eos_id;
    cfg.mtp_id = v.mtp_id;
    const auto traces = decode_eval_set(model, eval_set, v, cfg, 2);
    const AccelStats st = accel_stats(traces);
    // a fresh random model is never confident, so chunks stay at ~1 token
    CHECK(st.mean < 1.2);
}
