#include "mgpde/tensor.hpp"

#include <atomic>
#include <string>

namespace mgpde {

namespace {
std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] < 1) {
            throw Error::shape("tensor extent must be >= 1 at axis " + std::to_string(i) +
                               ", got " + std::to_string(shape[i]));
        }
        n *= shape[i];
    }
    return n;
}

std::atomic<std::uint64_t> g_next_tape_id{1};
}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
    data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(checked_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> values) : shape_(std::move(shape)) {
    std::int64_t n = checked_numel(shape_);
    if (n != static_cast<std::int64_t>(values.size())) {
        throw Error::shape("tensor data length " + std::to_string(values.size()) +
                           " does not match shape product " + std::to_string(n));
    }
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
    Tensor t(std::move(shape));
    for (auto& v : *t.data_) v = value;
    return t;
}

std::int64_t Tensor::numel() const {
    return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
}

double Tensor::value() const {
    if (numel() != 1) {
        throw Error::shape("scalar access on tensor with " + std::to_string(numel()) + " elements");
    }
    return (*data_)[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

bool GradMap::has(const Tensor& t) const {
    return t.tape_id == tape_id_ && t.node >= 0 &&
           static_cast<std::size_t>(t.node) < grads_.size() && grads_[static_cast<std::size_t>(t.node)].defined();
}

Tensor GradMap::grad(const Tensor& t) const {
    if (t.tape_id != tape_id_ || t.node < 0) {
        throw Error::config("gradient requested for tensor not watched on this tape");
    }
    const Tensor& g = grads_[static_cast<std::size_t>(t.node)];
    if (!g.defined()) return Tensor(t.shape());  // never reached the root: zero gradient
    return g;
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

void Tape::watch(Tensor& t) {
    if (attached(t)) return;
    t.tape_id = id_;
    t.node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, t.shape(), nullptr});
}

void Tape::record(Tensor& out, std::vector<int> parents, BackwardFn fn) {
    for (int p : parents) {
        if (p < 0 || static_cast<std::size_t>(p) >= nodes_.size()) {
            throw Error::config("tape parent id out of range");
        }
    }
    out.tape_id = id_;
    out.node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(parents), out.shape(), std::move(fn)});
}

GradMap Tape::backward(const Tensor& root) const {
    if (!attached(root)) {
        throw Error::config("backward root is not attached to this tape");
    }
    if (root.numel() != 1) {
        throw Error::shape("backward root must be scalar, got " + std::to_string(root.numel()) +
                           " elements");
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<std::size_t>(root.node)] = Tensor::scalar(1.0);

    std::vector<Tensor*> parent_slots;
    for (int i = root.node; i >= 0; --i) {
        const Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!grads[static_cast<std::size_t>(i)].defined() || !n.backward) continue;
        parent_slots.clear();
        parent_slots.reserve(n.parents.size());
        for (int p : n.parents) {
            Tensor& slot = grads[static_cast<std::size_t>(p)];
            if (!slot.defined()) slot = Tensor(nodes_[static_cast<std::size_t>(p)].shape);
            parent_slots.push_back(&slot);
        }
        n.backward(grads[static_cast<std::size_t>(i)], parent_slots);
    }
    return GradMap(id_, std::move(grads));
}

}  // namespace mgpde
