#pragma once

#include <cstdint>
#include <vector>

#include "unips/nn.hpp"

namespace unips {

// Piecewise learning-rate schedule: linear warmup over the first epoch,
// then a step decay of `factor` every `decay_every_epochs` epochs.
struct LrSchedule {
    int iters_per_epoch = 1;
    int warmup_iters = 0;          // typically == iters_per_epoch
    int decay_every_epochs = 10;
    float decay_factor = 0.8f;

    float lr_at(int64_t iter, float base_lr) const;
};

struct AdamWConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.05f;
};

// AdamW with decoupled weight decay. Holds first/second moments per
// trainable parameter; parameters without gradient storage are skipped
// entirely (no moment update, no decay).
class AdamW {
public:
    AdamW(ParamStore& store, AdamWConfig cfg);

    // Applies one update using `lr_now` (the schedule-adjusted rate).
    void step(float lr_now);
    int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

    // Global L2 norm of all present gradients; scales them down to
    // `max_norm` if above. Returns the pre-clip norm.
    double clip_grad_norm(double max_norm);

private:
    ParamStore& store_;
    AdamWConfig cfg_;
    int64_t step_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

}  // namespace unips
