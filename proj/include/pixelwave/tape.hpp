#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pixelwave/tensor.hpp"

namespace pixelwave {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated iff requires_grad
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor<T>::zeros(value.shape);
    }
};

template <typename T>
using Value = std::shared_ptr<Node<T>>;

template <typename T>
Value<T> make_value(Tensor<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return n;
}

// Ordered record of executed differentiable ops. Backward replays the
// record strictly in reverse execution order; each op closure adds its
// contribution into the inputs' grad buffers, so fan-in accumulates.
// Single owner, single thread per training step.
template <typename T>
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        if (recording_) ops_.push_back(std::move(backward_fn));
    }

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays the record backwards.
    void backward(const Value<T>& loss) {
        if (loss->value.numel() != 1) throw input_error("backward requires a scalar loss");
        loss->ensure_grad();
        loss->grad.fill(T(1));
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
    bool recording_ = true;
};

// Temporarily disables recording (inference paths).
template <typename T>
class NoGradGuard {
public:
    explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) { tape_.set_recording(false); }
    ~NoGradGuard() { tape_.set_recording(prev_); }

private:
    Tape<T>& tape_;
    bool prev_;
};

// Named views over a model's trainable parameters and its persistent
// non-gradient buffers (running stats, codebooks, EMA counters).
// Insertion order is the canonical iteration order for optimizers and
// checkpoints, so registration must be deterministic.
template <typename T>
struct ParamRegistry {
    std::vector<std::pair<std::string, Value<T>>> params;
    std::vector<std::pair<std::string, Tensor<T>*>> buffers;

    void add(const std::string& name, const Value<T>& v) {
        index_[name] = params.size();
        params.emplace_back(name, v);
    }

    void add_buffer(const std::string& name, Tensor<T>* t) { buffers.emplace_back(name, t); }

    Value<T> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) return nullptr;
        return params[it->second].second;
    }

    void zero_grad() {
        for (auto& [name, p] : params)
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad.zero();
            }
    }

    int64_t count() const {
        int64_t n = 0;
        for (auto& [name, p] : params) n += p->value.numel();
        return n;
    }

private:
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace pixelwave
