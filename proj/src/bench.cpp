#include "mtp/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "mtp/objective.hpp"

namespace mtp {

const std::vector<double> kLambdaGrid = {0.995, 0.99, 0.98, 0.97, 0.96, 0.95, 0.9,
                                         0.87,  0.85, 0.8,  0.75, 0.7,  0.65, 0.6};

std::vector<std::string> default_strategies() {
    std::vector<std::string> out;
    for (int k = 1; k <= 5; ++k) {
        out.push_back("static:" + std::to_string(k));
    }
    for (double l : kLambdaGrid) {
        std::ostringstream os;
        os << "conf:" << l;
        out.push_back(os.str());
    }
    return out;
}

std::vector<DecodeTrace> decode_eval_set(const Parameters<float>& model,
                                         const std::vector<CorpusSample>& eval_set,
                                         const Vocab& vocab, const DecodeConfig& cfg,
                                         int threads) {
    std::vector<DecodeTrace> traces(eval_set.size());
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < eval_set.size(); i += stride) {
            const std::vector<TokenId> prompt = sample_tokens(eval_set[i], vocab, false);
            traces[i] = generate(model, prompt, cfg);
        }
    };
    const int n = std::max(1, std::min<int>(threads, static_cast<int>(eval_set.size())));
    if (n == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n; ++t) {
            pool.emplace_back(work, static_cast<std::size_t>(t), static_cast<std::size_t>(n));
        }
        for (auto& th : pool) th.join();
    }
    return traces;
}

bool generation_correct(const DecodeTrace& trace, const CorpusSample& sample, const Vocab& vocab) {
    if (!trace.ended_with_eos) {
        return false;
    }
    std::vector<TokenId> body(trace.generated.begin(), trace.generated.end() - 1);
    std::vector<TokenId> expected(sample.completion.begin(), sample.completion.end() - 1);
    (void)vocab;
    return body == expected;
}

namespace {

DecodeConfig make_decode_config(const std::string& strategy, const Vocab& vocab,
                                const BenchOptions& opts) {
    DecodeConfig cfg;
    cfg.strategy = parse_strategy(strategy, cfg.static_k, cfg.lambda);
    cfg.k_max = opts.k_max;
    cfg.max_new_tokens = opts.max_new_tokens;
    cfg.eos_id = vocab.eos_id;
    cfg.mtp_id = vocab.mtp_id;
    return cfg;
}

double mean_teacher_nll(const Parameters<float>& teacher,
                        const std::vector<CorpusSample>& eval_set, const Vocab& vocab,
                        const std::vector<DecodeTrace>& traces, int threads) {
    std::vector<double> nll(traces.size(), 0.0);
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < traces.size(); i += stride) {
            if (traces[i].generated.empty()) continue;
            const std::vector<TokenId> prompt = sample_tokens(eval_set[i], vocab, false);
            const double ll = teacher_sequence_loglik(teacher, prompt, traces[i].generated);
            nll[i] = -ll / static_cast<double>(traces[i].generated.size());
        }
    };
    const int n = std::max(1, std::min<int>(threads, static_cast<int>(traces.size())));
    if (n == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n; ++t) {
            pool.emplace_back(work, static_cast<std::size_t>(t), static_cast<std::size_t>(n));
        }
        for (auto& th : pool) th.join();
    }
    double total = 0.0;
    for (double v : nll) total += v;
    return traces.empty() ? 0.0 : total / static_cast<double>(traces.size());
}

}  // namespace

SweepResult run_bench(const Parameters<float>& model, const Parameters<float>& teacher,
                      const std::vector<CorpusSample>& eval_set, const Vocab& vocab,
                      const std::vector<std::string>& strategies, const BenchOptions& opts) {
    SweepResult result;
    for (const std::string& strategy : strategies) {
        const DecodeConfig cfg = make_decode_config(strategy, vocab, opts);
        const std::vector<DecodeTrace> traces =
            decode_eval_set(model, eval_set, vocab, cfg, opts.threads);
        int correct = 0;
        for (std::size_t i = 0; i < traces.size(); ++i) {
            if (generation_correct(traces[i], eval_set[i], vocab)) ++correct;
        }
        SweepRow row;
        row.strategy = strategy;
        row.accuracy = eval_set.empty() ? 0.0 : static_cast<double>(correct) / eval_set.size();
        row.teacher_nll = mean_teacher_nll(teacher, eval_set, vocab, traces, opts.threads);
        if (cfg.strategy == DecodeConfig::Strategy::static_k) {
            // the benchmark convention: a static-k row's effective k is k
            row.accel_mean = cfg.static_k;
            row.accel_se = 0.0;
        } else {
            const AccelStats accel = accel_stats(traces);
            row.accel_mean = accel.mean;
            row.accel_se = accel.se;
        }
        result.rows.push_back(std::move(row));
    }
    return result;
}

void write_sweep_csv(const std::string& path, const SweepResult& result) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_sweep_csv: cannot open " + path);
    f << "strategy,accuracy,teacher_nll,accel_mean,accel_se\n";
    f.precision(10);
    for (const auto& r : result.rows) {
        f << r.strategy << ',' << r.accuracy << ',' << r.teacher_nll << ',' << r.accel_mean << ','
          << r.accel_se << '\n';
    }
}

SweepResult load_sweep_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_sweep_csv: cannot open " + path);
    SweepResult out;
    std::string line;
    if (!std::getline(f, line) || line != "strategy,accuracy,teacher_nll,accel_mean,accel_se") {
        throw std::runtime_error("load_sweep_csv: unexpected header");
    }
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        SweepRow r;
        std::string field;
        std::getline(ls, r.strategy, ',');
        std::getline(ls, field, ',');
        r.accuracy = std::stod(field);
        std::getline(ls, field, ',');
        r.teacher_nll = std::stod(field);
        std::getline(ls, field, ',');
        r.accel_mean = std::stod(field);
        std::getline(ls, field, ',');
        r.accel_se = std::stod(field);
        out.rows.push_back(std::move(r));
    }
    return out;
}

void write_sweep_dat(const std::string& path, const SweepResult& result) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_sweep_dat: cannot open " + path);
    f << "# accel accuracy strategy\n";
    f.precision(10);
    for (const auto& r : result.rows) {
        f << r.accel_mean << ' ' << r.accuracy << ' ' << r.strategy << '\n';
    }
}

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2) {
        throw std::invalid_argument("spearman_rho: need two equally sized series");
    }
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return v[a] < v[b];
        });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> rx = ranks(xs);
    const std::vector<double> ry = ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double num = 0.0, dx = 0.0, dy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx == 0.0 || dy == 0.0) {
        return 0.0;  // a constant series carries no rank signal
    }
    return num / std::sqrt(dx * dy);
}

CorrResult run_corr(const Parameters<float>& model, const Parameters<float>& teacher,
                    const std::vector<CorpusSample>& samples, const Vocab& vocab, int k,
                    int threads) {
    if (k < 1) throw std::invalid_argument("run_corr: k must be >= 1");
    CorrResult result;
    result.rows.resize(samples.size());
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < samples.size(); i += stride) {
            const CorpusSample& s = samples[i];
            // rotate the cut depth through the completion for prefix variety
            const int depth = static_cast<int>(i % s.completion.size());
            std::vector<TokenId> prefix = sample_tokens(s, vocab, false);
            prefix.insert(prefix.end(), s.completion.begin(), s.completion.begin() + depth);

            KvCache<float> cache =
                KvCache<float>::make(model.config, static_cast<int>(prefix.size()) + k + 1);
            std::vector<int> pos(prefix.size());
            for (std::size_t p = 0; p < pos.size(); ++p) pos[p] = static_cast<int>(p);
            MatR<float> logits = forward_cached(model, cache, prefix, pos);

            std::vector<TokenId> rollout;
            double conf = 0.0;
            TokenId tok;
            double prob;
            detail::top_of_row(logits, logits.rows() - 1, vocab.mtp_id, tok, prob);
            rollout.push_back(tok);
            conf += prob;
            if (k > 1) {
                std::vector<TokenId> mask_ids(static_cast<std::size_t>(k - 1), vocab.mtp_id);
                std::vector<int> mask_pos(static_cast<std::size_t>(k - 1));
                for (int j = 0; j < k - 1; ++j) {
                    mask_pos[static_cast<std::size_t>(j)] = static_cast<int>(prefix.size()) + j;
                }
                const MatR<float> mlogits = forward_cached(model, cache, mask_ids, mask_pos);
                for (int j = 0; j < k - 1; ++j) {
                    detail::top_of_row(mlogits, j, vocab.mtp_id, tok, prob);
                    rollout.push_back(tok);
                    conf += prob;
                }
            }
            const double ll = teacher_sequence_loglik(teacher, prefix, rollout);
            result.rows[i].confidence = conf / static_cast<double>(k);
            result.rows[i].teacher_nll = -ll / static_cast<double>(k);
        }
    };
    const int n = std::max(1, std::min<int>(threads, static_cast<int>(samples.size())));
    if (n == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n; ++t) {
            pool.emplace_back(work, static_cast<std::size_t>(t), static_cast<std::size_t>(n));
        }
        for (auto& th : pool) th.join();
    }
    std::vector<double> conf, nll;
    conf.reserve(result.rows.size());
    nll.reserve(result.rows.size());
    for (const auto& r : result.rows) {
        conf.push_back(r.confidence);
        nll.push_back(r.teacher_nll);
    }
    result.spearman = result.rows.size() >= 2 ? spearman_rho(conf, nll) : 0.0;
    return result;
}

void write_corr_csv(const std::string& path, const CorrResult& result) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_corr_csv: cannot open " + path);
    f << "confidence,teacher_nll\n";
    f.precision(10);
    for (const auto& r : result.rows) {
        f << r.confidence << ',' << r.teacher_nll << '\n';
    }
    f << "# spearman=" << result.spearman << '\n';
}

CorrResult load_corr_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_corr_csv: cannot open " + path);
    CorrResult out;
    std::string line;
    if (!std::getline(f, line) || line != "confidence,teacher_nll") {
        throw std::runtime_error("load_corr_csv: unexpected header");
    }
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (line.rfind("# spearman=", 0) == 0) {
            out.spearman = std::stod(line.substr(std::string("# spearman=").size()));
            continue;
        }
        std::istringstream ls(line);
        std::string field;
        CorrRow r;
        std::getline(ls, field, ',');
        r.confidence = std::stod(field);
        std::getline(ls, field, ',');
        r.teacher_nll = std::stod(field);
        out.rows.push_back(r);
    }
    return out;
}

}  // namespace mtp
