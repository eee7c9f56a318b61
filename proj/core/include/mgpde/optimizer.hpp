/// @file optimizer.hpp
/// @brief SGD and Adam over flattened parameter buffers.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mgpde/errors.hpp"

namespace mgpde {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

OptimizerKind optimizer_kind_from_string(const std::string& name);
std::string to_string(OptimizerKind kind);

/// Deterministic elementwise updates; identical gradients keep per-worker
/// instances in lockstep.
class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::size_t parameter_count);

    void step(std::span<double> params, std::span<const double> grads);
    void reset(std::size_t parameter_count);

    const OptimizerConfig& config() const { return config_; }
    std::int64_t steps_taken() const { return t_; }

private:
    OptimizerConfig config_;
    std::int64_t t_ = 0;
    std::vector<double> m_;
    std::vector<double> v_;
};

}  // namespace mgpde
