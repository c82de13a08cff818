#pragma once

#include <map>
#include <string>

#include "mtp/model.hpp"

namespace mtp {

// Container behind every checkpoint file: a magic string, the integer config
// block, a step counter, then named tensors as row-major 32-bit little-endian
// floats. Optimizer moments travel as extra "opt.m."/"opt.v." tensors.
struct CheckpointFile {
    ModelConfig config;
    std::int64_t step = 0;
    std::map<std::string, MatR<float>> tensors;
};

void write_checkpoint_file(const std::string& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::string& path);

void save_parameters(const std::string& path, const Parameters<float>& params,
                     std::int64_t step = 0);

// Loads model weights; files carrying extra tensors (optimizer state) are
// accepted, missing or mis-shaped model tensors are not.
Parameters<float> load_parameters(const std::string& path, std::int64_t* step_out = nullptr);

Parameters<float> parameters_from_file(const CheckpointFile& file);

}  // namespace mtp
