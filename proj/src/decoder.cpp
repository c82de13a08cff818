#include "mtp/decoder.hpp"

#include <cmath>

namespace mtp {

DecodeConfig::Strategy parse_strategy(const std::string& spec, int& static_k, double& lambda) {
    const auto colon = spec.find(':');
    if (colon != std::string::npos) {
        const std::string head = spec.substr(0, colon);
        const std::string arg = spec.substr(colon + 1);
        if (head == "static") {
            static_k = std::stoi(arg);
            return DecodeConfig::Strategy::static_k;
        }
        if (head == "conf") {
            lambda = std::stod(arg);
            return DecodeConfig::Strategy::conf_adapt;
        }
    }
    throw std::invalid_argument("bad strategy spec (want static:K or conf:LAMBDA): " + spec);
}

int accept_count(const std::vector<double>& top_probs, double lambda) {
    int k = 0;
    for (double p : top_probs) {
        if (p > lambda) {
            ++k;
        } else {
            break;
        }
    }
    return k < 1 ? 1 : k;
}

bool trim_chunk_at_eos(std::vector<TokenId>& chunk, TokenId eos_id) {
    for (std::size_t i = 0; i < chunk.size(); ++i) {
        if (chunk[i] == eos_id) {
            chunk.resize(i + 1);
            return true;
        }
    }
    return false;
}

AccelStats accel_stats(const std::vector<DecodeTrace>& traces) {
    AccelStats st;
    int max_chunk = 1;
    for (const auto& t : traces) {
        for (const auto& s : t.steps) {
            if (s.accepted > max_chunk) max_chunk = s.accepted;
        }
    }
    st.histogram.assign(static_cast<std::size_t>(max_chunk) + 1, 0);
    double sum = 0.0;
    for (const auto& t : traces) {
        for (const auto& s : t.steps) {
            ++st.steps;
            sum += s.accepted;
            ++st.histogram[static_cast<std::size_t>(s.accepted)];
        }
    }
    if (st.steps == 0) {
        return st;
    }
    st.mean = sum / static_cast<double>(st.steps);
    double ss = 0.0;
    for (const auto& t : traces) {
        for (const auto& s : t.steps) {
            const double d = s.accepted - st.mean;
            ss += d * d;
        }
    }
    if (st.steps > 1) {
        st.se = std::sqrt(ss / static_cast<double>(st.steps - 1)) /
                std::sqrt(static_cast<double>(st.steps));
    }
    return st;
}

std::string dump_trace(const DecodeTrace& trace) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& s : trace.steps) {
        os << s.accepted << ';';
        for (std::size_t i = 0; i < s.proposed.size(); ++i) {
            os << (i ? " " : "") << s.proposed[i];
        }
        os << ';';
        for (std::size_t i = 0; i < s.top_probs.size(); ++i) {
            os << (i ? " " : "") << s.top_probs[i];
        }
        os << '\n';
    }
    os << "summary;prompt_len=" << trace.prompt_len << ";generated=" << trace.generated.size()
       << ";eos=" << (trace.ended_with_eos ? 1 : 0) << '\n';
    return os.str();
}

DecodeTrace parse_trace(const std::string& text) {
    DecodeTrace trace;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("summary;", 0) == 0) {
            std::istringstream ls(line);
            std::string field;
            std::getline(ls, field, ';');  // "summary"
            while (std::getline(ls, field, ';')) {
                const auto eq = field.find('=');
                if (eq == std::string::npos) continue;
                const std::string key = field.substr(0, eq);
                const std::string val = field.substr(eq + 1);
                if (key == "prompt_len") trace.prompt_len = std::stoi(val);
                if (key == "eos") trace.ended_with_eos = val == "1";
            }
            continue;
        }
        std::istringstream ls(line);
        std::string part;
        DecodeStep step;
        std::getline(ls, part, ';');
        step.accepted = std::stoi(part);
        std::getline(ls, part, ';');
        {
            std::istringstream ps(part);
            TokenId id;
            while (ps >> id) step.proposed.push_back(id);
        }
        std::getline(ls, part, ';');
        {
            std::istringstream ps(part);
            double p;
            while (ps >> p) step.top_probs.push_back(p);
        }
        step.accepted_tokens.assign(step.proposed.begin(), step.proposed.begin() + step.accepted);
        trace.generated.insert(trace.generated.end(), step.accepted_tokens.begin(),
                               step.accepted_tokens.end());
        trace.steps.push_back(std::move(step));
    }
    return trace;
}

}  // namespace mtp
