#pragma once

#include <string>
#include <vector>

#include "mtp/corpus.hpp"
#include "mtp/decoder.hpp"
#include "mtp/model.hpp"

namespace mtp {

struct SweepRow {
    std::string strategy;  // "static:K" or "conf:LAMBDA"
    double accuracy = 0.0;
    double teacher_nll = 0.0;  // mean per-token NLL of generations under the teacher
    double accel_mean = 0.0;
    double accel_se = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
};

// The confidence-threshold grid swept in the benchmark tables.
extern const std::vector<double> kLambdaGrid;

std::vector<std::string> default_strategies();  // static 1..5 + the lambda grid

struct BenchOptions {
    int k_max = 8;
    int max_new_tokens = 16;
    int threads = 2;
};

SweepResult run_bench(const Parameters<float>& model, const Parameters<float>& teacher,
                      const std::vector<CorpusSample>& eval_set, const Vocab& vocab,
                      const std::vector<std::string>& strategies, const BenchOptions& opts);

// Decode the eval set under one strategy; returns the traces in eval order.
std::vector<DecodeTrace> decode_eval_set(const Parameters<float>& model,
                                         const std::vector<CorpusSample>& eval_set,
                                         const Vocab& vocab, const DecodeConfig& cfg,
                                         int threads);

// Exact match of the emitted answer (everything before the first EOS).
bool generation_correct(const DecodeTrace& trace, const CorpusSample& sample, const Vocab& vocab);

void write_sweep_csv(const std::string& path, const SweepResult& result);
SweepResult load_sweep_csv(const std::string& path);

// gnuplot-friendly columns: accel accuracy label
void write_sweep_dat(const std::string& path, const SweepResult& result);

struct CorrRow {
    double confidence = 0.0;   // mean top-token probability over the k rollout positions
    double teacher_nll = 0.0;  // per-token NLL of the rollout under the teacher
};

struct CorrResult {
    std::vector<CorrRow> rows;
    double spearman = 0.0;
};

// One k-token rollout per validation prefix; prefixes cut at rotating depths
// into the completion so difficulty varies.
CorrResult run_corr(const Parameters<float>& model, const Parameters<float>& teacher,
                    const std::vector<CorpusSample>& samples, const Vocab& vocab, int k,
                    int threads);

void write_corr_csv(const std::string& path, const CorrResult& result);
CorrResult load_corr_csv(const std::string& path);

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace mtp
