#include "mtp/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts unsupported");

namespace mtp {

namespace {
constexpr const char* kMagic = "MTPKIT-CKPT-v1";
}

void write_checkpoint_file(const std::string& path, const CheckpointFile& file) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("write_checkpoint_file: cannot open " + path);
    }
    const ModelConfig& c = file.config;
    f << kMagic << '\n';
    f << "config " << c.layers << ' ' << c.dim << ' ' << c.heads << ' ' << c.ffn_dim << ' '
      << c.vocab_size << ' ' << c.max_position << ' ' << c.rope_base << '\n';
    f << "step " << file.step << '\n';
    for (const auto& [name, t] : file.tensors) {
        f << "tensor " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
    }
    f << "end\n";
    if (!f) {
        throw std::runtime_error("write_checkpoint_file: write failed for " + path);
    }
}

CheckpointFile read_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("read_checkpoint_file: cannot open " + path);
    }
    std::string line;
    if (!std::getline(f, line) || line != kMagic) {
        throw std::runtime_error("read_checkpoint_file: bad magic in " + path);
    }
    CheckpointFile out;
    if (!std::getline(f, line)) {
        throw std::runtime_error("read_checkpoint_file: truncated header");
    }
    {
        std::istringstream ls(line);
        std::string tag;
        ModelConfig& c = out.config;
        if (!(ls >> tag >> c.layers >> c.dim >> c.heads >> c.ffn_dim >> c.vocab_size >>
              c.max_position >> c.rope_base) ||
            tag != "config") {
            throw std::runtime_error("read_checkpoint_file: bad config block");
        }
    }
    if (!std::getline(f, line)) {
        throw std::runtime_error("read_checkpoint_file: truncated header");
    }
    {
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag >> out.step) || tag != "step") {
            throw std::runtime_error("read_checkpoint_file: bad step line");
        }
    }
    while (std::getline(f, line)) {
        if (line == "end") {
            return out;
        }
        std::istringstream ls(line);
        std::string tag, name;
        Eigen::Index rows = 0, cols = 0;
        if (!(ls >> tag >> name >> rows >> cols) || tag != "tensor" || rows < 0 || cols < 0) {
            throw std::runtime_error("read_checkpoint_file: bad tensor header: " + line);
        }
        MatR<float> t(rows, cols);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
        if (!f) {
            throw std::runtime_error("read_checkpoint_file: truncated tensor " + name);
        }
        out.tensors.emplace(name, std::move(t));
    }
    throw std::runtime_error("read_checkpoint_file: missing end marker in " + path);
}

Parameters<float> parameters_from_file(const CheckpointFile& file) {
    Parameters<float> p = Parameters<float>::zeros_like_config<float>(file.config);
    p.for_each_tensor([&](const std::string& name, MatR<float>& t) {
        const auto it = file.tensors.find(name);
        if (it == file.tensors.end()) {
            throw std::runtime_error("checkpoint: missing tensor " + name);
        }
        if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
            throw std::runtime_error("checkpoint: shape mismatch for " + name + " (file " +
                                     std::to_string(it->second.rows()) + "x" +
                                     std::to_string(it->second.cols()) + ", config " +
                                     std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                                     ")");
        }
        t = it->second;
    });
    return p;
}

void save_parameters(const std::string& path, const Parameters<float>& params, std::int64_t step) {
    CheckpointFile file;
    file.config = params.config;
    file.step = step;
    params.for_each_tensor([&](const std::string& name, const MatR<float>& t) {
        file.tensors.emplace(name, t);
    });
    write_checkpoint_file(path, file);
}

Parameters<float> load_parameters(const std::string& path, std::int64_t* step_out) {
    const CheckpointFile file = read_checkpoint_file(path);
    if (step_out) {
        *step_out = file.step;
    }
    return parameters_from_file(file);
}

}  // namespace mtp
