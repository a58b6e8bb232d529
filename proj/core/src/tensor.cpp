#include "unips/tensor.hpp"

#include <cmath>
#include <cstdlib>

namespace unips {

namespace {
// OpenBLAS spawns its own pool; the tape is single-threaded so one BLAS
// thread keeps results reproducible and avoids oversubscription.
struct BlasEnvInit {
    BlasEnvInit() { setenv("OPENBLAS_NUM_THREADS", "1", 0); }
};
const BlasEnvInit blas_env_init;
}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

Tensor make_tensor(Shape shape, bool requires_grad) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError(cat("non-positive dimension in shape ", shape_str(shape)));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return make_tensor(shape, requires_grad);
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
    Tensor t = make_tensor(shape, requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError(cat("from_data: shape ", shape_str(shape), " wants ", shape_numel(shape),
                             " values, got ", values.size()));
    }
    Tensor t = make_tensor(shape, requires_grad);
    t.data() = std::move(values);
    return t;
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, float stddev, bool requires_grad) {
    Tensor t = make_tensor(shape, requires_grad);
    std::normal_distribution<float> dist(0.0f, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

Tensor Tensor::uniform(const Shape& shape, std::mt19937_64& rng, float lo, float hi,
                       bool requires_grad) {
    Tensor t = make_tensor(shape, requires_grad);
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

Tensor Tensor::scalar_tensor(float value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

int Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) {
        throw ShapeError(cat("axis ", axis, " out of range for shape ", shape_str(shape())));
    }
    return impl_->shape[static_cast<size_t>(axis)];
}

std::vector<float>& Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

float Tensor::scalar() const {
    if (numel() != 1) throw ContractError(cat("scalar() on tensor of shape ", shape_str(shape())));
    return impl_->data[0];
}

bool Tensor::all_finite() const {
    for (float v : impl_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
}

void Tape::replay_reverse() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

NoGradGuard::NoGradGuard() : prev_(Tape::current().recording()) {
    Tape::current().set_enabled(false);
}

NoGradGuard::~NoGradGuard() { Tape::current().set_enabled(prev_); }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError(cat("backward: loss must be scalar, got shape ",
                                shape_str(loss.shape())));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss is not on the tape (requires_grad is false)");
    }
    Tensor seed = loss;
    seed.grad()[0] += 1.0f;
    Tape::current().replay_reverse();
}

void accumulate_grad(const Tensor& t, const float* src, int64_t n) {
    auto& g = t.grad();
    for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += src[i];
}

}  // namespace unips
