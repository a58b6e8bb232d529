#include "unips/optim.hpp"

#include <cmath>

namespace unips {

float LrSchedule::lr_at(int64_t iter, float base_lr) const {
    if (warmup_iters > 0 && iter < warmup_iters) {
        return base_lr * static_cast<float>(iter + 1) / static_cast<float>(warmup_iters);
    }
    const int64_t epoch = iter / iters_per_epoch + 1;  // 1-based
    const int64_t steps = (epoch - 1) / decay_every_epochs;
    return base_lr * std::pow(decay_factor, static_cast<float>(steps));
}

AdamW::AdamW(ParamStore& store, AdamWConfig cfg) : store_(store), cfg_(cfg) {
    m_.resize(store.entries().size());
    v_.resize(store.entries().size());
}

double AdamW::clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto& e : store_.entries()) {
        if (!e.trainable || !e.tensor.has_grad()) continue;
        for (float g : e.tensor.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const float s = static_cast<float>(max_norm / norm);
        for (auto& e : store_.entries()) {
            if (!e.trainable || !e.tensor.has_grad()) continue;
            for (float& g : e.tensor.grad()) g *= s;
        }
    }
    return norm;
}

void AdamW::step(float lr_now) {
    if (lr_now <= 0.0f) throw ConfigError(cat("AdamW: schedule produced lr ", lr_now));
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < store_.entries().size(); ++pi) {
        auto& e = store_.entries()[pi];
        if (!e.trainable || !e.tensor.has_grad()) continue;
        auto& grad = e.tensor.grad();
        auto& data = e.tensor.data();
        auto& m = m_[pi];
        auto& v = v_[pi];
        if (m.empty()) {
            m.assign(data.size(), 0.0f);
            v.assign(data.size(), 0.0f);
        }
        for (size_t i = 0; i < data.size(); ++i) {
            const float g = grad[i];
            if (!std::isfinite(g)) {
                throw Error(cat("AdamW: non-finite gradient in parameter '", e.name, "'"));
            }
            m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            // decoupled decay, scaled by the current rate
            data[i] -= lr_now * cfg_.weight_decay * data[i];
            data[i] -= static_cast<float>(lr_now * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

}  // namespace unips
