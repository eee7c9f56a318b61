#include "mgpde/optimizer.hpp"

#include <cmath>

namespace mgpde {

OptimizerKind optimizer_kind_from_string(const std::string& name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adam") return OptimizerKind::Adam;
    throw Error::config("unknown optimizer '" + name + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind kind) {
    return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

Optimizer::Optimizer(OptimizerConfig config, std::size_t parameter_count) : config_(config) {
    reset(parameter_count);
}

void Optimizer::reset(std::size_t parameter_count) {
    t_ = 0;
    if (config_.kind == OptimizerKind::Adam) {
        m_.assign(parameter_count, 0.0);
        v_.assign(parameter_count, 0.0);
    } else {
        m_.clear();
        v_.clear();
    }
}

void Optimizer::step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size()) {
        throw Error::shape("optimizer: parameter/gradient length mismatch");
    }
    if (config_.kind == OptimizerKind::Adam && params.size() != m_.size()) {
        throw Error::shape("optimizer: state sized for " + std::to_string(m_.size()) +
                           " parameters, got " + std::to_string(params.size()));
    }
    ++t_;
    if (config_.kind == OptimizerKind::Sgd) {
        double lr = config_.learning_rate;
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
        return;
    }
    double b1 = config_.beta1, b2 = config_.beta2;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    double lr = config_.learning_rate;
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
        v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i] * grads[i];
        double mhat = m_[i] / bc1;
        double vhat = v_[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
}

}  // namespace mgpde
