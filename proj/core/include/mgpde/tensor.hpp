/// @file tensor.hpp
/// @brief Dense 64-bit tensors with a define-by-run reverse-mode tape.
///
/// Tensors are cheap value types: shape plus shared storage. An op never
/// mutates its inputs; whoever produces a tensor writes it once. Gradient
/// tracking is explicit: a Tape is created per forward pass, parameters and
/// inputs of interest are watch()ed, and ops record backward closures for
/// any output whose inputs are attached to that tape.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mgpde/errors.hpp"

namespace mgpde {

class Tape;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape);  // zero-filled
    Tensor(std::vector<std::int64_t> shape, std::vector<double> values);

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::int64_t> shape, double value);
    static Tensor scalar(double value) { return full({1}, value); }

    bool defined() const { return data_ != nullptr; }
    const std::vector<std::int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const;

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }

    /// Scalar value; throws on numel != 1.
    double value() const;

    /// Deep copy with fresh storage (drops tape attachment).
    Tensor clone() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Tape bookkeeping, managed by Tape::watch and op recording.
    int node = -1;
    std::uint64_t tape_id = 0;

private:
    std::vector<std::int64_t> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

/// Gradients produced by a backward sweep, addressable by watched tensor.
class GradMap {
public:
    GradMap(std::uint64_t tape_id, std::vector<Tensor> grads)
        : tape_id_(tape_id), grads_(std::move(grads)) {}

    bool has(const Tensor& t) const;
    /// Gradient of the root w.r.t. t; zero tensor if t never influenced the root.
    Tensor grad(const Tensor& t) const;

private:
    std::uint64_t tape_id_;
    std::vector<Tensor> grads_;
};

class Tape {
public:
    using BackwardFn =
        std::function<void(const Tensor& grad_out, const std::vector<Tensor*>& parent_grads)>;

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a leaf (parameter or tracked input) on this tape.
    void watch(Tensor& t);

    /// Record an op output. parents are node ids on this tape; fn accumulates
    /// into parent_grads (one zero-initialized slot per parent, same order).
    void record(Tensor& out, std::vector<int> parents, BackwardFn fn);

    bool attached(const Tensor& t) const { return t.tape_id == id_ && t.node >= 0; }
    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar root. Visits each node exactly once in
    /// reverse insertion order; bit-identical results for identical inputs.
    GradMap backward(const Tensor& root) const;

private:
    struct Node {
        std::vector<int> parents;
        std::vector<std::int64_t> shape;
        BackwardFn backward;  // empty for leaves
    };

    std::uint64_t id_;
    std::vector<Node> nodes_;
};

/// Cross-worker averaging hook used by synchronized batch normalization.
/// average() is a collective: every worker must call it in the same order.
/// The single-process default is a no-op (nullptr).
struct StatReducer {
    virtual ~StatReducer() = default;
    virtual void average(std::span<double> values) const = 0;
};

}  // namespace mgpde
