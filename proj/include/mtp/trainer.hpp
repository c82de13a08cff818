#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtp/checkpoint.hpp"
#include "mtp/corpus.hpp"
#include "mtp/layout.hpp"
#include "mtp/model.hpp"
#include "mtp/objective.hpp"

namespace mtp {

enum class TrainPhase { ntp_pretrain, mtp_distill };
enum class MaskVariant { blocked_causal, blocked_bidirectional };

struct TrainConfig {
    TrainPhase phase = TrainPhase::ntp_pretrain;
    int steps = 1000;
    int batch_size = 16;
    int window = 32;  // N
    int k_max = 8;
    SupervisionMode mode = SupervisionMode::hard_teacher;
    bool prefix_aux = false;
    bool randomize_k = true;  // false: every region uses k = k_max
    MaskVariant mask_variant = MaskVariant::blocked_causal;
    int warmup_steps = 100;
    float peak_lr = 1e-3f;
    std::uint64_t seed = 1;
    std::string checkpoint_out = "checkpoint.ckpt";
    std::string metrics_out = "metrics.csv";
    std::string init_checkpoint;  // distill: the pretrained weights
    int log_interval = 50;
    int checkpoint_interval = 1000;
    int threads = 2;

    // model architecture
    int layers = 2;
    int dim = 64;
    int heads = 4;
    int ffn = 256;
    int max_position = 512;

    // synthetic corpus
    std::string charset = "0123456789+=";
    std::uint64_t corpus_seed = 7;
    int corpus_count = 20000;
    int max_operand = 999;
    int val_count = 2000;  // held-out rows appended after the training rows

    ModelConfig model_config(int vocab_size) const {
        ModelConfig c;
        c.layers = layers;
        c.dim = dim;
        c.heads = heads;
        c.ffn_dim = ffn;
        c.vocab_size = vocab_size;
        c.max_position = max_position;
        return c;
    }
    void validate() const;
};

TrainConfig load_train_config(const std::string& path);  // key=value; unknown keys rejected
TrainConfig parse_train_config(const std::vector<std::pair<std::string, std::string>>& kv);
std::string dump_train_config(const TrainConfig& cfg);

// Linear warmup to the constant peak.
float lr_at(int step, const TrainConfig& cfg);

// AdamW state; moments mirror the parameter shapes.
struct OptimizerState {
    Parameters<float> m;
    Parameters<float> v;
    std::int64_t step = 0;
};

struct AdamWSettings {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
    float clip_norm = 1.0f;
};

// Clips the gradient to clip_norm and applies one decoupled-weight-decay
// adaptive update. Returns the post-clip gradient norm.
double adamw_update(Parameters<float>& params, Parameters<float>& grads, OptimizerState& opt,
                    float lr, const AdamWSettings& settings = {});

struct StepMetrics {
    LossBreakdown breakdown;
    float lr = 0.0f;
    double grad_norm = 0.0;  // post-clip
    // teacher target == student argmax at each region's first supervised slot
    double first_slot_match_rate = 0.0;
};

// One optimization step over a batch of samples. Layout geometry is freshly
// sampled per item from (seed, step, item); the teacher is only consulted in
// the distill phase and never receives gradients.
StepMetrics train_step(Parameters<float>& student, const Parameters<float>* teacher,
                       OptimizerState& opt, const std::vector<const CorpusSample*>& batch,
                       const TrainConfig& cfg, int step, const Vocab& vocab);

struct TrainResult {
    std::string checkpoint_path;
    double final_val_loss = 0.0;
    std::uint64_t teacher_fingerprint = 0;
    int steps_run = 0;
};

// Full training driver: corpus, metrics CSV, periodic checkpoints, resume.
TrainResult run_training(const TrainConfig& cfg, bool resume = false);

// Mean NTP loss over a sample set (plain layouts, no gradient).
double validation_ntp_loss(const Parameters<float>& params,
                           const std::vector<CorpusSample>& samples, const Vocab& vocab,
                           int window);

void save_train_checkpoint(const std::string& path, const Parameters<float>& params,
                           const OptimizerState& opt);
void load_train_checkpoint(const std::string& path, Parameters<float>& params,
                           OptimizerState& opt);

// Deterministic batch row selection for (seed, step).
std::vector<std::size_t> batch_indices(std::uint64_t seed, int step, int batch_size,
                                       std::size_t corpus_size);

// Metrics CSV: step,mtp_loss,prefix_loss,match_rate,lr,grad_norm
struct MetricsRow {
    int step;
    double mtp_loss, prefix_loss, match_rate, lr, grad_norm;
};
std::vector<MetricsRow> load_metrics_csv(const std::string& path);

}  // namespace mtp
