#include <cstdio>
#include <fstream>
#include <random>

#include "doctest.h"
#include "mtp/checkpoint.hpp"
#include "mtp/model.hpp"
#include "mtp/objective.hpp"
#include "test_util.hpp"

using namespace mtp;
using testutil::small_config;

namespace {

const Vocab& vocab16() {
    static const Vocab v = build_vocab("0123456789+=");
    return v;
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, int n, int vocab) {
    std::uniform_int_distribution<TokenId> d(0, vocab - 1);
    std::vector<TokenId> out(static_cast<std::size_t>(n));
    for (auto& t : out) t = d(rng);
    return out;
}

std::vector<int> iota_pos(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    return p;
}

}  // namespace

TEST_CASE("init is deterministic per seed and forwards to finite logits") {
    const ModelConfig cfg = small_config(16);
    auto r1 = make_rng(5), r2 = make_rng(5), r3 = make_rng(6);
    const auto a = init_parameters<float>(cfg, r1);
    const auto b = init_parameters<float>(cfg, r2);
    const auto c = init_parameters<float>(cfg, r3);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());

    std::mt19937_64 rng(9);
    const auto ids = random_ids(rng, 10, 16);
    const auto trace = forward(a, ids, iota_pos(10), build_plain_causal(10));
    CHECK(trace.logits.allFinite());
}

TEST_CASE("init_mtp_embedding") {
    const Vocab& v = vocab16();
    const ModelConfig cfg = small_config(v.size, 16, 1, 2, 32);

    SUBCASE("degenerate variance collapses to the mean row") {
        auto rng = make_rng(1);
        auto p = init_parameters<float>(cfg, rng);
        for (Eigen::Index r = 0; r < p.embed.rows(); ++r) {
            p.embed.row(r).setConstant(0.25f);
            p.unembed.row(r).setConstant(-0.5f);
        }
        auto rng2 = make_rng(2);
        init_mtp_embedding(p, v, rng2);
        for (Eigen::Index j = 0; j < p.embed.cols(); ++j) {
            CHECK(p.embed(v.mtp_id, j) == doctest::Approx(0.25f));
            CHECK(p.unembed(v.mtp_id, j) == doctest::Approx(-0.5f));
        }
    }

    SUBCASE("other rows untouched bitwise") {
        auto rng = make_rng(3);
        auto p = init_parameters<float>(cfg, rng);
        const auto before = p;
        auto rng2 = make_rng(4);
        init_mtp_embedding(p, v, rng2);
        for (Eigen::Index r = 0; r < p.embed.rows(); ++r) {
            if (r == v.mtp_id) continue;
            CHECK(p.embed.row(r) == before.embed.row(r));
            CHECK(p.unembed.row(r) == before.unembed.row(r));
        }
    }

    SUBCASE("redraw statistics match the column moments") {
        auto rng = make_rng(5);
        auto p = init_parameters<double>(small_config(v.size, 8, 1, 2, 16), rng);
        const Eigen::Index d = p.embed.cols();
        std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
        std::vector<double> var(static_cast<std::size_t>(d), 0.0);
        for (Eigen::Index j = 0; j < d; ++j) {
            double m = 0.0;
            int n = 0;
            for (Eigen::Index r = 0; r < p.embed.rows(); ++r) {
                if (r != v.mtp_id) {
                    m += p.embed(r, j);
                    ++n;
                }
            }
            m /= n;
            double s = 0.0;
            for (Eigen::Index r = 0; r < p.embed.rows(); ++r) {
                if (r != v.mtp_id) s += (p.embed(r, j) - m) * (p.embed(r, j) - m);
            }
            mean[static_cast<std::size_t>(j)] = m;
            var[static_cast<std::size_t>(j)] = s / n;
        }
        const int trials = 10000;
        std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
        auto rng2 = make_rng(6);
        for (int t = 0; t < trials; ++t) {
            auto q = p;
            init_mtp_embedding(q, v, rng2);
            for (Eigen::Index j = 0; j < d; ++j) {
                acc[static_cast<std::size_t>(j)] += q.embed(v.mtp_id, j);
            }
        }
        for (Eigen::Index j = 0; j < d; ++j) {
            const double sample_mean = acc[static_cast<std::size_t>(j)] / trials;
            const double se = std::sqrt(var[static_cast<std::size_t>(j)] / trials);
            CHECK(std::abs(sample_mean - mean[static_cast<std::size_t>(j)]) <= 3.0 * se + 1e-12);
        }
    }
}

TEST_CASE("forward is deterministic and softmax rows are normalized") {
    const ModelConfig cfg = small_config(16);
    auto rng = make_rng(11);
    const auto p = init_parameters<float>(cfg, rng);
    std::mt19937_64 gen(12);
    const auto ids = random_ids(gen, 14, 16);
    const auto t1 = forward(p, ids, iota_pos(14), build_plain_causal(14));
    const auto t2 = forward(p, ids, iota_pos(14), build_plain_causal(14));
    CHECK(t1.logits == t2.logits);
    for (Eigen::Index i = 0; i < t1.logits.rows(); ++i) {
        const float mx = t1.logits.row(i).maxCoeff();
        const auto e = (t1.logits.row(i).array() - mx).exp();
        const double sum = (e / e.sum()).sum();
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("N=1 forward reduces to the single-token pipeline") {
    const ModelConfig cfg = small_config(16, 16, 1, 2, 32);
    auto rng = make_rng(21);
    const auto p = init_parameters<double>(cfg, rng);
    const auto t = forward(p, {5}, {0}, build_plain_causal(1));
    CHECK(t.logits.rows() == 1);
    CHECK(t.logits.cols() == 16);
    CHECK(t.logits.allFinite());
    CHECK(t.layers[0].probs[0](0, 0) == doctest::Approx(1.0));
}

TEST_CASE("slot permutation equivariance under a symmetric mask") {
    const ModelConfig cfg = small_config(16);
    auto rng = make_rng(31);
    const auto p = init_parameters<double>(cfg, rng);
    std::mt19937_64 gen(32);
    const int n = 9;
    auto ids = random_ids(gen, n, 16);
    auto pos = iota_pos(n);

    AttentionMask full;
    full.n = n;
    full.allow.assign(static_cast<std::size_t>(n) * n, 1);

    const auto base = forward(p, ids, pos, full);
    std::swap(ids[2], ids[6]);
    std::swap(pos[2], pos[6]);
    const auto swapped = forward(p, ids, pos, full);
    for (int i = 0; i < n; ++i) {
        const int j = i == 2 ? 6 : i == 6 ? 2 : i;
        CHECK((swapped.logits.row(i) - base.logits.row(j)).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("pad slots cannot influence other slots") {
    const Vocab& v = vocab16();
    const ModelConfig cfg = small_config(v.size);
    auto rng = make_rng(41);
    const auto p = init_parameters<float>(cfg, rng);

    std::vector<TokenId> tokens = {v.bos_id, 1, 2, 3, v.eos_id};
    const SequenceLayout l = build_layout(tokens, make_layout_params(12, 2, 2, 0), v);
    const AttentionMask mask = build_blocked_causal(l);
    const auto base = forward(p, l.input_ids, l.pos_ids, mask);

    auto mutated = l.input_ids;
    bool has_pad = false;
    for (std::size_t s = 0; s < mutated.size(); ++s) {
        if (l.kinds[s] == SlotKind::pad) {
            mutated[s] = 7;
            has_pad = true;
        }
    }
    REQUIRE(has_pad);
    const auto changed = forward(p, mutated, l.pos_ids, mask);
    for (std::size_t s = 0; s < mutated.size(); ++s) {
        if (l.kinds[s] != SlotKind::pad) {
            CHECK(changed.logits.row(static_cast<Eigen::Index>(s)) ==
                  base.logits.row(static_cast<Eigen::Index>(s)));
        }
    }
}

TEST_CASE("rotary attention depends only on relative positions") {
    const ModelConfig cfg = small_config(16, 32, 2, 4, 64, 512);
    auto rng = make_rng(51);
    const auto p = init_parameters<double>(cfg, rng);
    std::mt19937_64 gen(52);
    const int n = 10;
    const auto ids = random_ids(gen, n, 16);
    auto pos = iota_pos(n);
    const auto base = forward(p, ids, pos, build_plain_causal(n));
    for (auto& q : pos) q += 57;
    const auto shifted = forward(p, ids, pos, build_plain_causal(n));
    CHECK((shifted.logits - base.logits).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
    const ModelConfig cfg = small_config(16);
    auto rng = make_rng(61);
    const auto p = init_parameters<float>(cfg, rng);
    std::mt19937_64 gen(62);
    const auto ids = random_ids(gen, 8, 16);
    const auto trace = forward(p, ids, iota_pos(8), build_plain_causal(8));
    const MatR<float> dlogits = MatR<float>::Zero(8, 16);
    const auto g = backward(p, trace, dlogits);
    CHECK(g.squared_norm() == 0.0);
}

TEST_CASE("backward matches finite differences on a linear probe loss") {
    const ModelConfig cfg = small_config(16, 32, 2, 4, 64);
    auto rng = make_rng(71);
    auto p = init_parameters<double>(cfg, rng);
    std::mt19937_64 gen(72);
    const int n = 6;
    const auto ids = random_ids(gen, n, 16);
    const auto pos = iota_pos(n);
    const AttentionMask mask = build_plain_causal(n);

    MatR<double> probe(n, 16);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index i = 0; i < probe.rows(); ++i) {
        for (Eigen::Index j = 0; j < probe.cols(); ++j) probe(i, j) = nd(gen);
    }
    const auto trace = forward(p, ids, pos, mask);
    const auto analytic = backward(p, trace, probe);
    const auto loss = [&]() {
        return forward(p, ids, pos, mask).logits.cwiseProduct(probe).sum();
    };
    std::vector<MatR<double>*> tensors;
    p.for_each_tensor([&](const std::string&, MatR<double>& t) { tensors.push_back(&t); });
    std::vector<const MatR<double>*> grads;
    analytic.for_each_tensor(
        [&](const std::string&, const MatR<double>& t) { grads.push_back(&t); });
    std::uniform_int_distribution<std::size_t> pick_t(0, tensors.size() - 1);
    double worst = 0.0;
    for (int trial = 0; trial < 150; ++trial) {
        const std::size_t ti = pick_t(gen);
        MatR<double>& t = *tensors[ti];
        std::uniform_int_distribution<Eigen::Index> pr(0, t.rows() - 1), pc(0, t.cols() - 1);
        const Eigen::Index i = pr(gen), j = pc(gen);
        const double orig = t(i, j);
        const double h = 1e-5;
        t(i, j) = orig + h;
        const double lp = loss();
        t(i, j) = orig - h;
        const double lm = loss();
        t(i, j) = orig;
        const double fd = (lp - lm) / (2 * h);
        const double an = (*grads[ti])(i, j);
        worst = std::max(worst, std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("cached forward equals the full forward") {
    const ModelConfig cfg = small_config(16);
    auto rng = make_rng(81);
    const auto p = init_parameters<float>(cfg, rng);
    std::mt19937_64 gen(82);

    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> len_d(2, 24);
        const int n = len_d(gen);
        const auto ids = random_ids(gen, n, 16);
        const auto pos = iota_pos(n);
        const auto full = forward(p, ids, pos, build_plain_causal(n));

        // whole prompt at once
        {
            KvCache<float> cache = KvCache<float>::make(cfg, n);
            const auto logits = forward_cached(p, cache, ids, pos);
            CHECK((logits - full.logits).cwiseAbs().maxCoeff() < 1e-5f);
        }
        // split at a random point
        {
            std::uniform_int_distribution<int> cut_d(1, n - 1);
            const int cut = cut_d(gen);
            KvCache<float> cache = KvCache<float>::make(cfg, n);
            std::vector<TokenId> a(ids.begin(), ids.begin() + cut), b(ids.begin() + cut, ids.end());
            std::vector<int> pa(pos.begin(), pos.begin() + cut), pb(pos.begin() + cut, pos.end());
            const auto la = forward_cached(p, cache, a, pa);
            const auto lb = forward_cached(p, cache, b, pb);
            CHECK((la - full.logits.topRows(cut)).cwiseAbs().maxCoeff() < 1e-5f);
            CHECK((lb - full.logits.bottomRows(n - cut)).cwiseAbs().maxCoeff() < 1e-5f);
        }
        // pops then re-extension equals a fresh cache
        {
            KvCache<float> cache = KvCache<float>::make(cfg, n + 8);
            forward_cached(p, cache, ids, pos);
            std::uniform_int_distribution<int> pop_d(1, n - 1);
            const int n_pop = pop_d(gen);
            cache.pop(n_pop);
            std::vector<TokenId> tail(ids.end() - n_pop, ids.end());
            std::vector<int> tail_pos(pos.end() - n_pop, pos.end());
            const auto logits = forward_cached(p, cache, tail, tail_pos);
            CHECK((logits - full.logits.bottomRows(n_pop)).cwiseAbs().maxCoeff() < 1e-5f);
            for (int l = 0; l < cfg.layers; ++l) {
                const auto& kv = cache.layers[static_cast<std::size_t>(l)];
                const auto& lt = full.layers[static_cast<std::size_t>(l)];
                CHECK((kv.k.topRows(n) - lt.kr).cwiseAbs().maxCoeff() < 1e-5f);
                CHECK((kv.v.topRows(n) - lt.v).cwiseAbs().maxCoeff() < 1e-5f);
            }
        }
    }
}

TEST_CASE("cached forward rejects position regressions") {
    const ModelConfig cfg = small_config(16);
    auto rng = make_rng(91);
    const auto p = init_parameters<float>(cfg, rng);
    KvCache<float> cache = KvCache<float>::make(cfg, 8);
    forward_cached(p, cache, {1, 2, 3}, {0, 1, 2});
    CHECK_THROWS_AS(forward_cached(p, cache, {4}, {1}), std::runtime_error);
    CHECK_THROWS_AS(forward_cached(p, cache, {4}, {7}), std::runtime_error);
}

TEST_CASE("checkpoint round trip is bitwise and validates") {
    const ModelConfig cfg = small_config(16);
    auto rng = make_rng(101);
    const auto p = init_parameters<float>(cfg, rng);
    const std::string path = "model_roundtrip.ckpt";
    save_parameters(path, p, 42);
    std::int64_t step = 0;
    const auto q = load_parameters(path, &step);
    CHECK(step == 42);
    CHECK(q.fingerprint() == p.fingerprint());

    const std::string path2 = "model_roundtrip2.ckpt";
    save_parameters(path2, q, 42);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    SUBCASE("corrupt magic is rejected") {
        std::ofstream bad("bad_magic.ckpt", std::ios::binary);
        bad << "NOT-A-CKPT\n";
        bad.close();
        CHECK_THROWS_AS(load_parameters("bad_magic.ckpt"), std::runtime_error);
        std::remove("bad_magic.ckpt");
    }
    SUBCASE("missing tensor is rejected") {
        CheckpointFile file = read_checkpoint_file(path);
        file.tensors.erase("layers.0.wq");
        write_checkpoint_file("missing.ckpt", file);
        CHECK_THROWS_AS(load_parameters("missing.ckpt"), std::runtime_error);
        std::remove("missing.ckpt");
    }
    SUBCASE("shape mismatch is rejected") {
        CheckpointFile file = read_checkpoint_file(path);
        file.tensors["layers.0.wq"] = MatR<float>::Zero(3, 3);
        write_checkpoint_file("badshape.ckpt", file);
        CHECK_THROWS_AS(load_parameters("badshape.ckpt"), std::runtime_error);
        std::remove("badshape.ckpt");
    }
    std::remove(path.c_str());
    std::remove(path2.c_str());
}
