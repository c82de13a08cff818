#include "mtp/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "mtp/blockmask.hpp"

namespace mtp {

void TrainConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("config: steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (warmup_steps > steps) throw std::invalid_argument("config: warmup must be <= steps");
    if (warmup_steps < 0) throw std::invalid_argument("config: warmup must be >= 0");
    if (phase == TrainPhase::mtp_distill) {
        if (k_max < 2) throw std::invalid_argument("config: k_max must be >= 2 for distill");
        if (window < 2 * k_max) throw std::invalid_argument("config: window must be >= 2*k_max");
        if (init_checkpoint.empty()) {
            throw std::invalid_argument("config: distill phase needs init_checkpoint");
        }
    }
    if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
    if (corpus_count < 1 || val_count < 0) throw std::invalid_argument("config: bad corpus sizes");
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

}  // namespace

TrainConfig parse_train_config(const std::vector<std::pair<std::string, std::string>>& kv) {
    TrainConfig c;
    for (const auto& [key, v] : kv) {
        if (key == "phase") {
            if (v == "ntp_pretrain") c.phase = TrainPhase::ntp_pretrain;
            else if (v == "mtp_distill") c.phase = TrainPhase::mtp_distill;
            else throw std::invalid_argument("config: unknown phase: " + v);
        } else if (key == "steps") c.steps = std::stoi(v);
        else if (key == "batch_size") c.batch_size = std::stoi(v);
        else if (key == "window") c.window = std::stoi(v);
        else if (key == "k_max") c.k_max = std::stoi(v);
        else if (key == "mode") c.mode = supervision_mode_from_string(v);
        else if (key == "prefix_aux") c.prefix_aux = parse_bool(v, key);
        else if (key == "randomize_k") c.randomize_k = parse_bool(v, key);
        else if (key == "mask") {
            if (v == "blocked_causal") c.mask_variant = MaskVariant::blocked_causal;
            else if (v == "blocked_bidirectional")
                c.mask_variant = MaskVariant::blocked_bidirectional;
            else throw std::invalid_argument("config: unknown mask variant: " + v);
        } else if (key == "warmup_steps") c.warmup_steps = std::stoi(v);
        else if (key == "peak_lr") c.peak_lr = std::stof(v);
        else if (key == "seed") c.seed = std::stoull(v);
        else if (key == "checkpoint_out") c.checkpoint_out = v;
        else if (key == "metrics_out") c.metrics_out = v;
        else if (key == "init_checkpoint") c.init_checkpoint = v;
        else if (key == "log_interval") c.log_interval = std::stoi(v);
        else if (key == "checkpoint_interval") c.checkpoint_interval = std::stoi(v);
        else if (key == "threads") c.threads = std::stoi(v);
        else if (key == "layers") c.layers = std::stoi(v);
        else if (key == "dim") c.dim = std::stoi(v);
        else if (key == "heads") c.heads = std::stoi(v);
        else if (key == "ffn") c.ffn = std::stoi(v);
        else if (key == "max_position") c.max_position = std::stoi(v);
        else if (key == "charset") c.charset = v;
        else if (key == "corpus_seed") c.corpus_seed = std::stoull(v);
        else if (key == "corpus_count") c.corpus_count = std::stoi(v);
        else if (key == "max_operand") c.max_operand = std::stoi(v);
        else if (key == "val_count") c.val_count = std::stoi(v);
        else throw std::invalid_argument("config: unknown key: " + key);
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("load_train_config: cannot open " + path);
    }
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("load_train_config: malformed line: " + line);
        }
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return parse_train_config(kv);
}

std::string dump_train_config(const TrainConfig& c) {
    std::ostringstream os;
    os << "phase=" << (c.phase == TrainPhase::ntp_pretrain ? "ntp_pretrain" : "mtp_distill")
       << '\n';
    os << "steps=" << c.steps << '\n';
    os << "batch_size=" << c.batch_size << '\n';
    os << "window=" << c.window << '\n';
    os << "k_max=" << c.k_max << '\n';
    os << "mode=" << to_string(c.mode) << '\n';
    os << "prefix_aux=" << (c.prefix_aux ? 1 : 0) << '\n';
    os << "randomize_k=" << (c.randomize_k ? 1 : 0) << '\n';
    os << "mask="
       << (c.mask_variant == MaskVariant::blocked_causal ? "blocked_causal"
                                                         : "blocked_bidirectional")
       << '\n';
    os << "warmup_steps=" << c.warmup_steps << '\n';
    os << "peak_lr=" << c.peak_lr << '\n';
    os << "seed=" << c.seed << '\n';
    os << "checkpoint_out=" << c.checkpoint_out << '\n';
    os << "metrics_out=" << c.metrics_out << '\n';
    if (!c.init_checkpoint.empty()) os << "init_checkpoint=" << c.init_checkpoint << '\n';
    os << "log_interval=" << c.log_interval << '\n';
    os << "checkpoint_interval=" << c.checkpoint_interval << '\n';
    os << "threads=" << c.threads << '\n';
    os << "layers=" << c.layers << '\n';
    os << "dim=" << c.dim << '\n';
    os << "heads=" << c.heads << '\n';
    os << "ffn=" << c.ffn << '\n';
    os << "max_position=" << c.max_position << '\n';
    os << "charset=" << c.charset << '\n';
    os << "corpus_seed=" << c.corpus_seed << '\n';
    os << "corpus_count=" << c.corpus_count << '\n';
    os << "max_operand=" << c.max_operand << '\n';
    os << "val_count=" << c.val_count << '\n';
    return os.str();
}

float lr_at(int step, const TrainConfig& cfg) {
    if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) {
        return cfg.peak_lr;
    }
    return cfg.peak_lr * static_cast<float>(step) / static_cast<float>(cfg.warmup_steps);
}

double adamw_update(Parameters<float>& params, Parameters<float>& grads, OptimizerState& opt,
                    float lr, const AdamWSettings& s) {
    double norm = std::sqrt(grads.squared_norm());
    if (norm > s.clip_norm) {
        grads.scale(static_cast<float>(s.clip_norm / norm));
        norm = s.clip_norm;
    }
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(s.beta1), static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(s.beta2), static_cast<double>(opt.step));

    std::vector<MatR<float>*> g_list, m_list, v_list;
    grads.for_each_tensor([&](const std::string&, MatR<float>& t) { g_list.push_back(&t); });
    opt.m.for_each_tensor([&](const std::string&, MatR<float>& t) { m_list.push_back(&t); });
    opt.v.for_each_tensor([&](const std::string&, MatR<float>& t) { v_list.push_back(&t); });
    std::size_t i = 0;
    params.for_each_tensor([&](const std::string&, MatR<float>& p) {
        MatR<float>& g = *g_list[i];
        MatR<float>& m = *m_list[i];
        MatR<float>& v = *v_list[i];
        ++i;
        m = s.beta1 * m + (1.0f - s.beta1) * g;
        v = (s.beta2 * v.array() + (1.0f - s.beta2) * g.array().square()).matrix();
        p.array() *= (1.0f - lr * s.weight_decay);
        p.array() -= lr * (m.array() / static_cast<float>(bc1)) /
                     ((v.array() / static_cast<float>(bc2)).sqrt() + s.eps);
    });
    return norm;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, int step, int batch_size,
                                       std::size_t corpus_size) {
    std::vector<std::size_t> out(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(
            derive_seed(seed, 0xba7c4, static_cast<std::uint64_t>(step),
                        static_cast<std::uint64_t>(i)) %
            corpus_size);
    }
    return out;
}

namespace {

struct ItemResult {
    Parameters<float> grad;
    double mtp_loss = 0.0;
    double prefix_loss = 0.0;
    int supervised = 0;
    int matches = 0;
    int region_count = 0;
    int first_slot_matches = 0;
    bool contributed = false;
};

ItemResult run_item(const Parameters<float>& student, const Parameters<float>* teacher,
                    const CorpusSample& sample, const TrainConfig& cfg, int step, int item,
                    const Vocab& vocab) {
    ItemResult res;
    const std::vector<TokenId> tokens = sample_tokens(sample, vocab);

    if (cfg.phase == TrainPhase::ntp_pretrain) {
        const SequenceLayout layout = build_plain_layout(tokens, cfg.window, vocab);
        std::vector<std::uint8_t> flags(layout.ntp_target_ids.size(), 0);
        int n = 0;
        for (std::size_t s = 0; s < flags.size(); ++s) {
            if (layout.kinds[s] == SlotKind::prefix_gt && layout.ntp_target_ids[s] >= 0) {
                flags[s] = 1;
                ++n;
            }
        }
        if (n == 0) return res;
        const AttentionMask mask = build_blocked_causal(layout);
        ForwardTrace<float> trace = forward(student, layout.input_ids, layout.pos_ids, mask);
        NtpLossResult<float> loss = ntp_loss(trace.logits, layout.ntp_target_ids, flags);
        res.grad = backward(student, trace, loss.dlogits);
        res.prefix_loss = loss.loss;
        res.supervised = loss.count;
        for (std::size_t s = 0; s < flags.size(); ++s) {
            if (flags[s] && detail::argmax_row(trace.logits.row(static_cast<Eigen::Index>(s))) ==
                                layout.ntp_target_ids[s]) {
                ++res.matches;
            }
        }
        res.contributed = true;
        return res;
    }

    // distill phase
    auto rng = make_rng(cfg.seed, 0x1a70u, static_cast<std::uint64_t>(step),
                        static_cast<std::uint64_t>(item));
    LayoutParams params = sample_params(rng, cfg.window, cfg.k_max);
    if (!cfg.randomize_k) params.k = cfg.k_max;
    const SequenceLayout layout = build_layout(tokens, params, vocab);
    if (layout.regions.empty()) {
        return res;  // offsets/EOS clipped away every region; no supervision here
    }
    const AttentionMask mask = cfg.mask_variant == MaskVariant::blocked_causal
                                   ? build_blocked_causal(layout)
                                   : build_blocked_bidirectional(layout);
    ForwardTrace<float> trace = forward(student, layout.input_ids, layout.pos_ids, mask);
    const auto rollouts = student_rollout(trace.logits, layout);
    const TeacherTargets<float> targets = teacher_targets(*teacher, layout, rollouts, cfg.mode);
    MtpLossResult<float> loss = mtp_loss(trace.logits, targets, cfg.mode, layout, cfg.prefix_aux);
    res.grad = backward(student, trace, loss.dlogits);
    res.mtp_loss = loss.breakdown.mtp_loss;
    res.prefix_loss = loss.breakdown.prefix_loss;
    res.supervised = loss.breakdown.supervised_count;
    res.matches = static_cast<int>(
        std::lround(loss.breakdown.match_rate * loss.breakdown.supervised_count));
    res.region_count = static_cast<int>(layout.regions.size());
    // first supervised slot of each region: does the teacher target match the
    // student's own argmax (exact at step 0 when teacher == student)?
    if (cfg.mode != SupervisionMode::soft_teacher) {
        int sup_idx = 0;
        for (std::size_t r = 0; r < layout.regions.size(); ++r) {
            if (targets.tokens[static_cast<std::size_t>(sup_idx)] == rollouts[r][0]) {
                ++res.first_slot_matches;
            }
            sup_idx += layout.regions[r].span;
        }
    }
    res.contributed = true;
    return res;
}

}  // namespace

StepMetrics train_step(Parameters<float>& student, const Parameters<float>* teacher,
                       OptimizerState& opt, const std::vector<const CorpusSample*>& batch,
                       const TrainConfig& cfg, int step, const Vocab& vocab) {
    if (cfg.phase == TrainPhase::mtp_distill && teacher == nullptr) {
        throw std::invalid_argument("train_step: distill phase requires a frozen teacher");
    }
    const int b = static_cast<int>(batch.size());
    std::vector<ItemResult> results(static_cast<std::size_t>(b));

    const int n_threads = std::min(cfg.threads, b);
    if (n_threads <= 1) {
        for (int i = 0; i < b; ++i) {
            results[static_cast<std::size_t>(i)] =
                run_item(student, teacher, *batch[static_cast<std::size_t>(i)], cfg, step, i,
                         vocab);
        }
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_threads));
        for (int t = 0; t < n_threads; ++t) {
            pool.emplace_back([&, t]() {
                for (int i = t; i < b; i += n_threads) {
                    results[static_cast<std::size_t>(i)] =
                        run_item(student, teacher, *batch[static_cast<std::size_t>(i)], cfg, step,
                                 i, vocab);
                }
            });
        }
        for (auto& th : pool) th.join();
    }

    // Fixed-order reduction keeps steps bit-deterministic regardless of
    // thread scheduling.
    StepMetrics metrics;
    Parameters<float> grad = zeros_like(student);
    int contributed = 0;
    int total_sup = 0, total_matches = 0, total_regions = 0, total_first_matches = 0;
    for (const auto& r : results) {
        if (!r.contributed) continue;
        ++contributed;
        metrics.breakdown.mtp_loss += r.mtp_loss;
        metrics.breakdown.prefix_loss += r.prefix_loss;
        total_sup += r.supervised;
        total_matches += r.matches;
        total_regions += r.region_count;
        total_first_matches += r.first_slot_matches;
    }
    if (contributed > 0) {
        const float inv = 1.0f / static_cast<float>(contributed);
        for (const auto& r : results) {
            if (r.contributed) grad.add_scaled(r.grad, inv);
        }
        metrics.breakdown.mtp_loss /= contributed;
        metrics.breakdown.prefix_loss /= contributed;
    }
    metrics.breakdown.supervised_count = total_sup;
    metrics.breakdown.match_rate =
        total_sup > 0 ? static_cast<double>(total_matches) / total_sup : 0.0;
    metrics.first_slot_match_rate =
        total_regions > 0 ? static_cast<double>(total_first_matches) / total_regions : 0.0;

    const double total_loss = metrics.breakdown.mtp_loss + metrics.breakdown.prefix_loss;
    if (!std::isfinite(total_loss)) {
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step) +
                                 " (mtp=" + std::to_string(metrics.breakdown.mtp_loss) +
                                 ", prefix=" + std::to_string(metrics.breakdown.prefix_loss) +
                                 ")");
    }

    metrics.lr = lr_at(step, cfg);
    metrics.grad_norm = adamw_update(student, grad, opt, metrics.lr);
    return metrics;
}

double validation_ntp_loss(const Parameters<float>& params,
                           const std::vector<CorpusSample>& samples, const Vocab& vocab,
                           int window) {
    double total = 0.0;
    int n = 0;
    for (const auto& sample : samples) {
        const std::vector<TokenId> tokens = sample_tokens(sample, vocab);
        const SequenceLayout layout = build_plain_layout(tokens, window, vocab);
        std::vector<std::uint8_t> flags(layout.ntp_target_ids.size(), 0);
        int count = 0;
        for (std::size_t s = 0; s < flags.size(); ++s) {
            if (layout.kinds[s] == SlotKind::prefix_gt && layout.ntp_target_ids[s] >= 0) {
                flags[s] = 1;
                ++count;
            }
        }
        if (count == 0) continue;
        const AttentionMask mask = build_blocked_causal(layout);
        const ForwardTrace<float> trace = forward(params, layout.input_ids, layout.pos_ids, mask);
        total += ntp_loss(trace.logits, layout.ntp_target_ids, flags).loss;
        ++n;
    }
    return n > 0 ? total / n : 0.0;
}

void save_train_checkpoint(const std::string& path, const Parameters<float>& params,
                           const OptimizerState& opt) {
    CheckpointFile file;
    file.config = params.config;
    file.step = opt.step;
    params.for_each_tensor(
        [&](const std::string& name, const MatR<float>& t) { file.tensors.emplace(name, t); });
    opt.m.for_each_tensor([&](const std::string& name, const MatR<float>& t) {
        file.tensors.emplace("opt.m." + name, t);
    });
    opt.v.for_each_tensor([&](const std::string& name, const MatR<float>& t) {
        file.tensors.emplace("opt.v." + name, t);
    });
    write_checkpoint_file(path, file);
}

void load_train_checkpoint(const std::string& path, Parameters<float>& params,
                           OptimizerState& opt) {
    const CheckpointFile file = read_checkpoint_file(path);
    params = parameters_from_file(file);
    opt.m = Parameters<float>::zeros_like_config<float>(file.config);
    opt.v = Parameters<float>::zeros_like_config<float>(file.config);
    opt.step = file.step;
    auto fill = [&](Parameters<float>& dst, const std::string& prefix) {
        dst.for_each_tensor([&](const std::string& name, MatR<float>& t) {
            const auto it = file.tensors.find(prefix + name);
            if (it == file.tensors.end()) {
                throw std::runtime_error("checkpoint: missing tensor " + prefix + name);
            }
            if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
                throw std::runtime_error("checkpoint: shape mismatch for " + prefix + name);
            }
            t = it->second;
        });
    };
    fill(opt.m, "opt.m.");
    fill(opt.v, "opt.v.");
}

std::vector<MetricsRow> load_metrics_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("load_metrics_csv: cannot open " + path);
    }
    std::vector<MetricsRow> rows;
    std::string line;
    bool header = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (header) {
            if (line != "step,mtp_loss,prefix_loss,match_rate,lr,grad_norm") {
                throw std::runtime_error("load_metrics_csv: unexpected header: " + line);
            }
            header = false;
            continue;
        }
        std::istringstream ls(line);
        std::string field;
        MetricsRow r{};
        std::getline(ls, field, ',');
        r.step = std::stoi(field);
        std::getline(ls, field, ',');
        r.mtp_loss = std::stod(field);
        std::getline(ls, field, ',');
        r.prefix_loss = std::stod(field);
        std::getline(ls, field, ',');
        r.match_rate = std::stod(field);
        std::getline(ls, field, ',');
        r.lr = std::stod(field);
        std::getline(ls, field, ',');
        r.grad_norm = std::stod(field);
        rows.push_back(r);
    }
    return rows;
}

TrainResult run_training(const TrainConfig& cfg, bool resume) {
    cfg.validate();
    const Vocab vocab = build_vocab(cfg.charset);
    const auto all = gen_arithmetic(cfg.corpus_seed, cfg.corpus_count + cfg.val_count,
                                    cfg.max_operand, vocab);
    const std::vector<CorpusSample> train_rows(all.begin(), all.begin() + cfg.corpus_count);
    const std::vector<CorpusSample> val_rows(all.begin() + cfg.corpus_count, all.end());

    Parameters<float> student;
    Parameters<float> teacher;
    const Parameters<float>* teacher_ptr = nullptr;
    OptimizerState opt;
    int start_step = 0;

    if (cfg.phase == TrainPhase::mtp_distill) {
        student = load_parameters(cfg.init_checkpoint);
        auto mtp_rng = make_rng(cfg.seed, 0x6d7470u);  // "mtp" row redraw
        init_mtp_embedding(student, vocab, mtp_rng);
        teacher = student;  // frozen clone of the phase-start student
        teacher_ptr = &teacher;
    } else {
        auto rng = make_rng(cfg.seed, 0x696e6974u);
        student = init_parameters<float>(cfg.model_config(vocab.size), rng);
    }

    if (resume) {
        load_train_checkpoint(cfg.checkpoint_out, student, opt);
        start_step = static_cast<int>(opt.step);
    } else {
        opt.m = zeros_like(student);
        opt.v = zeros_like(student);
        opt.step = 0;
    }

    std::ofstream metrics(cfg.metrics_out, resume ? std::ios::app : std::ios::out);
    if (!metrics) {
        throw std::runtime_error("run_training: cannot open metrics file " + cfg.metrics_out);
    }
    if (!resume) {
        metrics << "step,mtp_loss,prefix_loss,match_rate,lr,grad_norm\n";
    }

    TrainResult result;
    result.teacher_fingerprint = teacher_ptr ? teacher.fingerprint() : 0;

    for (int step = start_step; step < cfg.steps; ++step) {
        const auto idx = batch_indices(cfg.seed, step, cfg.batch_size, train_rows.size());
        std::vector<const CorpusSample*> batch;
        batch.reserve(idx.size());
        for (auto i : idx) batch.push_back(&train_rows[i]);
        const StepMetrics m = train_step(student, teacher_ptr, opt, batch, cfg, step, vocab);
        if ((step + 1) % cfg.log_interval == 0) {
            metrics << step << ',' << m.breakdown.mtp_loss << ',' << m.breakdown.prefix_loss << ','
                    << m.breakdown.match_rate << ',' << m.lr << ',' << m.grad_norm << '\n';
            metrics.flush();
        }
        if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) {
            save_train_checkpoint(cfg.checkpoint_out, student, opt);
        }
    }
    save_train_checkpoint(cfg.checkpoint_out, student, opt);

    result.checkpoint_path = cfg.checkpoint_out;
    result.steps_run = cfg.steps - start_step;
    result.final_val_loss =
        validation_ntp_loss(student, val_rows, vocab, cfg.window);
    return result;
}

}  // namespace mtp
