// Command-line front end: pretrain / distill / generate / bench / corr.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "mtp/bench.hpp"
#include "mtp/checkpoint.hpp"
#include "mtp/decoder.hpp"
#include "mtp/trainer.hpp"

namespace {

std::string render_token(mtp::TokenId id, const mtp::Vocab& vocab) {
    if (id == vocab.eos_id) return "<eos>";
    if (id == vocab.bos_id) return "<bos>";
    if (id == vocab.pad_id) return "<pad>";
    if (id == vocab.mtp_id) return "<mtp>";
    return std::string(1, vocab.symbols[static_cast<std::size_t>(id)]);
}

std::string render_tokens(const std::vector<mtp::TokenId>& ids, const mtp::Vocab& vocab) {
    std::string out;
    for (auto id : ids) out += render_token(id, vocab);
    return out;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

std::vector<mtp::CorpusSample> make_eval_set(std::uint64_t eval_seed, int eval_count,
                                             std::uint64_t corpus_seed, int corpus_count,
                                             int val_count, int max_operand,
                                             const mtp::Vocab& vocab) {
    if (eval_seed != 0) {
        return mtp::gen_arithmetic(eval_seed, eval_count, max_operand, vocab);
    }
    // default: the held-out tail of the training corpus stream
    auto all = mtp::gen_arithmetic(corpus_seed, corpus_count + val_count, max_operand, vocab);
    std::vector<mtp::CorpusSample> out(all.begin() + corpus_count, all.end());
    if (static_cast<int>(out.size()) > eval_count) {
        out.resize(static_cast<std::size_t>(eval_count));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-token prediction toolkit"};
    app.require_subcommand(1);

    // ---- pretrain / distill -------------------------------------------------
    std::string config_path, out_path, init_ckpt;
    std::uint64_t seed_override = 0;
    bool seed_given = false, resume = false;

    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key=value config file")->required();
        cmd->add_option("--out", out_path, "checkpoint output path (overrides config)");
        cmd->add_option("--seed", seed_override, "seed override")->each([&](const std::string&) {
            seed_given = true;
        });
        cmd->add_flag("--resume", resume, "resume from checkpoint_out");
    };

    CLI::App* pretrain = app.add_subcommand("pretrain", "NTP-pretrain the toy checkpoint");
    add_train_flags(pretrain);

    CLI::App* distill = app.add_subcommand("distill", "online MTP self-distillation");
    add_train_flags(distill);
    distill->add_option("--checkpoint", init_ckpt,
                        "pretrained init checkpoint (overrides config init_checkpoint)");

    // ---- generate -----------------------------------------------------------
    std::string gen_ckpt, prompt_text, strategy = "conf:0.9", charset = "0123456789+=";
    int max_new = 16, k_max = 8;
    std::string trace_out;
    CLI::App* generate_cmd = app.add_subcommand("generate", "chunk-annotated generation");
    generate_cmd->add_option("--checkpoint", gen_ckpt)->required();
    generate_cmd->add_option("--prompt", prompt_text)->required();
    generate_cmd->add_option("--strategy", strategy, "static:K or conf:LAMBDA");
    generate_cmd->add_option("--charset", charset);
    generate_cmd->add_option("--max-new", max_new);
    generate_cmd->add_option("--k-max", k_max);
    generate_cmd->add_option("--trace-out", trace_out, "write the raw decode trace here");

    // ---- bench --------------------------------------------------------------
    std::string bench_ckpt, teacher_ckpt, bench_out = "sweep.csv", strategies_arg;
    int eval_count = 500, max_operand = 999, corpus_count = 20000, val_count = 2000, threads = 2;
    std::uint64_t eval_seed = 0, corpus_seed = 7;
    CLI::App* bench_cmd = app.add_subcommand("bench", "strategy sweep with acceleration table");
    bench_cmd->add_option("--checkpoint", bench_ckpt)->required();
    bench_cmd->add_option("--teacher", teacher_ckpt, "teacher checkpoint for NLL scoring")
        ->required();
    bench_cmd->add_option("--out", bench_out, "sweep CSV path (a .dat twin is written too)");
    bench_cmd->add_option("--strategies", strategies_arg, "comma list, default full grid");
    bench_cmd->add_option("--eval-count", eval_count);
    bench_cmd->add_option("--eval-seed", eval_seed, "fresh eval set seed (0: corpus holdout)");
    bench_cmd->add_option("--corpus-seed", corpus_seed);
    bench_cmd->add_option("--corpus-count", corpus_count);
    bench_cmd->add_option("--val-count", val_count);
    bench_cmd->add_option("--max-operand", max_operand);
    bench_cmd->add_option("--charset", charset);
    bench_cmd->add_option("--k-max", k_max);
    bench_cmd->add_option("--max-new", max_new);
    bench_cmd->add_option("--threads", threads);

    // ---- corr ---------------------------------------------------------------
    std::string corr_out = "corr.csv";
    int corr_count = 200, corr_k = 8;
    CLI::App* corr_cmd = app.add_subcommand("corr", "confidence vs teacher-NLL study");
    corr_cmd->add_option("--checkpoint", bench_ckpt)->required();
    corr_cmd->add_option("--teacher", teacher_ckpt)->required();
    corr_cmd->add_option("--out", corr_out);
    corr_cmd->add_option("--count", corr_count);
    corr_cmd->add_option("--k", corr_k);
    corr_cmd->add_option("--eval-seed", eval_seed, "fresh eval set seed (0: corpus holdout)");
    corr_cmd->add_option("--corpus-seed", corpus_seed);
    corr_cmd->add_option("--corpus-count", corpus_count);
    corr_cmd->add_option("--val-count", val_count);
    corr_cmd->add_option("--max-operand", max_operand);
    corr_cmd->add_option("--charset", charset);
    corr_cmd->add_option("--threads", threads);

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed() || distill->parsed()) {
            mtp::TrainConfig cfg = mtp::load_train_config(config_path);
            if (pretrain->parsed() && cfg.phase != mtp::TrainPhase::ntp_pretrain) {
                throw std::runtime_error("pretrain: config phase is not ntp_pretrain");
            }
            if (distill->parsed()) {
                if (cfg.phase != mtp::TrainPhase::mtp_distill) {
                    throw std::runtime_error("distill: config phase is not mtp_distill");
                }
                if (!init_ckpt.empty()) cfg.init_checkpoint = init_ckpt;
            }
            if (!out_path.empty()) cfg.checkpoint_out = out_path;
            if (seed_given) cfg.seed = seed_override;
            cfg.validate();
            const mtp::TrainResult res = mtp::run_training(cfg, resume);
            std::cout << "checkpoint: " << res.checkpoint_path << '\n';
            std::cout << "val_ntp_loss: " << res.final_val_loss << '\n';
            if (distill->parsed()) {
                std::cout << "teacher_fingerprint: " << res.teacher_fingerprint << '\n';
            }
            return 0;
        }

        if (generate_cmd->parsed()) {
            const mtp::Vocab vocab = mtp::build_vocab(charset);
            const mtp::Parameters<float> model = mtp::load_parameters(gen_ckpt);
            mtp::DecodeConfig cfg;
            cfg.strategy = mtp::parse_strategy(strategy, cfg.static_k, cfg.lambda);
            cfg.k_max = k_max;
            cfg.max_new_tokens = max_new;
            cfg.eos_id = vocab.eos_id;
            cfg.mtp_id = vocab.mtp_id;
            std::vector<mtp::TokenId> prompt = {vocab.bos_id};
            for (auto id : mtp::encode(prompt_text, vocab)) prompt.push_back(id);
            const mtp::DecodeTrace trace = mtp::generate(model, prompt, cfg);
            for (const auto& step : trace.steps) {
                std::cout << '[' << render_tokens(step.accepted_tokens, vocab) << '|'
                          << step.accepted << ']';
            }
            const mtp::AccelStats stats = mtp::accel_stats({trace});
            std::cout << "\naverage chunk size = " << stats.mean << '\n';
            if (!trace_out.empty()) {
                std::ofstream tf(trace_out);
                tf << mtp::dump_trace(trace);
            }
            return 0;
        }

        if (bench_cmd->parsed()) {
            const mtp::Vocab vocab = mtp::build_vocab(charset);
            const mtp::Parameters<float> model = mtp::load_parameters(bench_ckpt);
            const mtp::Parameters<float> teacher = mtp::load_parameters(teacher_ckpt);
            const auto eval_set = make_eval_set(eval_seed, eval_count, corpus_seed, corpus_count,
                                                val_count, max_operand, vocab);
            mtp::BenchOptions opts;
            opts.k_max = k_max;
            opts.max_new_tokens = max_new;
            opts.threads = threads;
            const std::vector<std::string> strategies =
                strategies_arg.empty() ? mtp::default_strategies() : split_csv(strategies_arg);
            const mtp::SweepResult sweep = mtp::run_bench(model, teacher, eval_set, vocab,
                                                          strategies, opts);
            mtp::write_sweep_csv(bench_out, sweep);
            std::string dat = bench_out;
            const auto dot = dat.rfind('.');
            dat = (dot == std::string::npos ? dat : dat.substr(0, dot)) + ".dat";
            mtp::write_sweep_dat(dat, sweep);
            for (const auto& r : sweep.rows) {
                std::printf("%-12s acc=%.4f nll=%.4f accel=%.3f±%.3f\n", r.strategy.c_str(),
                            r.accuracy, r.teacher_nll, r.accel_mean, r.accel_se);
            }
            return 0;
        }

        if (corr_cmd->parsed()) {
            const mtp::Vocab vocab = mtp::build_vocab(charset);
            const mtp::Parameters<float> model = mtp::load_parameters(bench_ckpt);
            const mtp::Parameters<float> teacher = mtp::load_parameters(teacher_ckpt);
            const auto samples = make_eval_set(eval_seed, corr_count, corpus_seed, corpus_count,
                                               val_count, max_operand, vocab);
            const mtp::CorrResult corr =
                mtp::run_corr(model, teacher, samples, vocab, corr_k, threads);
            mtp::write_corr_csv(corr_out, corr);
            std::cout << "rows: " << corr.rows.size() << '\n';
            std::cout << "spearman: " << corr.spearman << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
