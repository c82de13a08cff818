// Python bindings for the main operations: corpus, layout, masks, decode.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mtp/bench.hpp"
#include "mtp/blockmask.hpp"
#include "mtp/checkpoint.hpp"
#include "mtp/corpus.hpp"
#include "mtp/decoder.hpp"
#include "mtp/layout.hpp"
#include "mtp/model.hpp"
#include "mtp/objective.hpp"

namespace py = pybind11;
using namespace mtp;

namespace {

std::vector<std::vector<bool>> mask_rows(const AttentionMask& m) {
    std::vector<std::vector<bool>> rows(static_cast<std::size_t>(m.n));
    for (int q = 0; q < m.n; ++q) {
        rows[static_cast<std::size_t>(q)].resize(static_cast<std::size_t>(m.n));
        for (int k = 0; k < m.n; ++k) {
            rows[static_cast<std::size_t>(q)][static_cast<std::size_t>(k)] = m.at(q, k);
        }
    }
    return rows;
}

}  // namespace

PYBIND11_MODULE(mtpkit, m) {
    m.doc() = "multi-token prediction toolkit (C++ core)";

    py::class_<Vocab>(m, "Vocab")
        .def_readonly("symbols", &Vocab::symbols)
        .def_readonly("bos_id", &Vocab::bos_id)
        .def_readonly("eos_id", &Vocab::eos_id)
        .def_readonly("pad_id", &Vocab::pad_id)
        .def_readonly("mtp_id", &Vocab::mtp_id)
        .def_readonly("size", &Vocab::size);
    m.def("build_vocab", &build_vocab, py::arg("charset"));
    m.def("encode", [](const std::string& text, const Vocab& v) { return encode(text, v); });
    m.def("decode", &decode);

    py::class_<CorpusSample>(m, "CorpusSample")
        .def_readonly("prompt", &CorpusSample::prompt)
        .def_readonly("completion", &CorpusSample::completion);
    m.def("gen_arithmetic", &gen_arithmetic, py::arg("seed"), py::arg("count"),
          py::arg("max_operand"), py::arg("vocab"));
    m.def("sample_tokens", &sample_tokens, py::arg("sample"), py::arg("vocab"),
          py::arg("include_completion") = true);

    py::class_<LayoutParams>(m, "LayoutParams")
        .def_readonly("window", &LayoutParams::window)
        .def_readonly("k", &LayoutParams::k)
        .def_readonly("k_max", &LayoutParams::k_max)
        .def_readonly("region_count", &LayoutParams::region_count)
        .def_readonly("offset", &LayoutParams::offset);
    m.def("make_layout_params", &make_layout_params, py::arg("window"), py::arg("k"),
          py::arg("k_max"), py::arg("offset"));

    py::class_<RegionPlan>(m, "RegionPlan")
        .def_readonly("region_count", &RegionPlan::region_count)
        .def_readonly("period_length", &RegionPlan::period_length)
        .def_readonly("periods", &RegionPlan::periods);
    m.def("plan_regions", &plan_regions, py::arg("window"), py::arg("k_max"));

    py::class_<Region>(m, "Region")
        .def_readonly("first_slot", &Region::first_slot)
        .def_readonly("span", &Region::span)
        .def_readonly("mask_begin", &Region::mask_begin)
        .def_readonly("mask_end", &Region::mask_end)
        .def_readonly("base_pos", &Region::base_pos);

    py::class_<SequenceLayout>(m, "SequenceLayout")
        .def_readonly("input_ids", &SequenceLayout::input_ids)
        .def_readonly("pos_ids", &SequenceLayout::pos_ids)
        .def_property_readonly("pred_flags",
                               [](const SequenceLayout& l) {
                                   std::vector<bool> out(l.pred_flags.size());
                                   for (std::size_t i = 0; i < out.size(); ++i) {
                                       out[i] = l.pred_flags[i] != 0;
                                   }
                                   return out;
                               })
        .def_readonly("target_ids", &SequenceLayout::target_ids)
        .def_readonly("regions", &SequenceLayout::regions)
        .def("supervised_slots", &SequenceLayout::supervised_slots)
        .def("dump", [](const SequenceLayout& l) { return dump_layout(l); });
    m.def("build_layout", &build_layout, py::arg("tokens"), py::arg("params"), py::arg("vocab"));
    m.def("build_plain_layout", &build_plain_layout, py::arg("tokens"), py::arg("window"),
          py::arg("vocab"));
    m.def("substitute_rollout", &substitute_rollout);

    m.def("blocked_causal_mask",
          [](const SequenceLayout& l) { return mask_rows(build_blocked_causal(l)); });
    m.def("blocked_bidirectional_mask",
          [](const SequenceLayout& l) { return mask_rows(build_blocked_bidirectional(l)); });
    m.def("plain_causal_mask", [](int n) { return mask_rows(build_plain_causal(n)); });
    m.def("render_blocked_causal",
          [](const SequenceLayout& l) { return render_mask(build_blocked_causal(l)); });

    m.def("accept_count", &accept_count, py::arg("top_probs"), py::arg("lambda_"));

    py::class_<DecodeStep>(m, "DecodeStep")
        .def_readonly("proposed", &DecodeStep::proposed)
        .def_readonly("top_probs", &DecodeStep::top_probs)
        .def_readonly("accepted", &DecodeStep::accepted)
        .def_readonly("accepted_tokens", &DecodeStep::accepted_tokens);
    py::class_<DecodeTrace>(m, "DecodeTrace")
        .def_readonly("steps", &DecodeTrace::steps)
        .def_readonly("generated", &DecodeTrace::generated)
        .def_readonly("ended_with_eos", &DecodeTrace::ended_with_eos)
        .def("dump", [](const DecodeTrace& t) { return dump_trace(t); });

    py::class_<Parameters<float>>(m, "Model")
        .def_property_readonly("vocab_size",
                               [](const Parameters<float>& p) { return p.config.vocab_size; })
        .def("fingerprint", &Parameters<float>::fingerprint);
    m.def("load_model", [](const std::string& path) { return load_parameters(path); });
    m.def("init_model", [](int layers, int dim, int heads, int ffn, int vocab_size,
                           std::uint64_t seed) {
        ModelConfig cfg;
        cfg.layers = layers;
        cfg.dim = dim;
        cfg.heads = heads;
        cfg.ffn_dim = ffn;
        cfg.vocab_size = vocab_size;
        auto rng = make_rng(seed, 0x696e6974u);
        return init_parameters<float>(cfg, rng);
    });
    m.def("generate",
          [](const Parameters<float>& model, const std::vector<TokenId>& prompt,
             const std::string& strategy, int k_max, int max_new, const Vocab& vocab) {
              DecodeConfig cfg;
              cfg.strategy = parse_strategy(strategy, cfg.static_k, cfg.lambda);
              cfg.k_max = k_max;
              cfg.max_new_tokens = max_new;
              cfg.eos_id = vocab.eos_id;
              cfg.mtp_id = vocab.mtp_id;
              return generate(model, prompt, cfg);
          },
          py::arg("model"), py::arg("prompt"), py::arg("strategy"), py::arg("k_max"),
          py::arg("max_new"), py::arg("vocab"));
}
