#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "unips/common.hpp"

namespace unips {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
};

// Dense 32-bit float tensor with value semantics over shared storage.
// Copies alias the same buffer; all public ops produce fresh tensors.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<float> values,
                            bool requires_grad = false);
    static Tensor randn(const Shape& shape, std::mt19937_64& rng, float stddev = 1.0f,
                        bool requires_grad = false);
    static Tensor uniform(const Shape& shape, std::mt19937_64& rng, float lo, float hi,
                          bool requires_grad = false);
    static Tensor scalar_tensor(float value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int axis) const;
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    float* ptr() { return impl_->data.data(); }
    const float* ptr() const { return impl_->data.data(); }
    std::vector<float>& data() { return impl_->data; }
    const std::vector<float>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    // Gradient storage is created lazily; absent means "no gradient flowed".
    // Adjoint storage is shallow-const: backward closures accumulate into it
    // through value copies of the handle.
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::vector<float>& grad() const;
    void drop_grad() const { impl_->grad.clear(); }

    const void* id() const { return impl_.get(); }

    float scalar() const;
    bool all_finite() const;

private:
    std::shared_ptr<TensorImpl> impl_;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor make_tensor(Shape shape, bool requires_grad);
};

Tensor make_tensor(Shape shape, bool requires_grad);

// Ordered record of executed differentiable operations. Confined to one
// thread; each training thread owns its own tape.
class Tape {
public:
    static Tape& current();

    bool recording() const { return enabled_; }
    void set_enabled(bool on) { enabled_ = on; }

    void record(std::function<void()> backward_fn);
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Replays every node once in reverse execution order.
    void replay_reverse();

private:
    std::vector<std::function<void()>> nodes_;
    bool enabled_ = true;
};

// RAII scope that disables tape recording (inference / data preprocessing).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// True when outputs of an op on these inputs should join the tape.
inline bool track_grad(const Tensor& a) {
    return Tape::current().recording() && a.requires_grad();
}
inline bool track_grad(const Tensor& a, const Tensor& b) {
    return Tape::current().recording() && (a.requires_grad() || b.requires_grad());
}

// Seeds d(loss)/d(loss) = 1 and replays the tape backward. The loss must be
// a scalar produced while recording.
void backward(const Tensor& loss);

// Accumulates src into the gradient buffer of t (allocating zeros first).
void accumulate_grad(const Tensor& t, const float* src, int64_t n);

}  // namespace unips
