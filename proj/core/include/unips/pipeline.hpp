#pragma once

#include <string>

#include "unips/model.hpp"
#include "unips/train.hpp"

namespace unips {

// Miniature end-to-end pass over all five stages (generate, pretrain,
// train, evaluate, infer/export): 5 scenes at 16x16, ~50 train
// iterations. Used by CI and the determinism check.
struct SmokeReport {
    bool gen_ok = false;
    bool pretrain_ok = false;
    bool train_ok = false;
    bool eval_ok = false;
    bool infer_ok = false;
    std::string failed_stage;  // empty when everything passed
    std::string error;

    double final_loss = 0;
    double eval_mae_deg = 0;
    double seconds = 0;
    std::string train_log_csv;  // byte-comparable across runs
    std::string eval_csv;

    bool all_passed() const { return gen_ok && pretrain_ok && train_ok && eval_ok && infer_ok; }
    std::string to_json() const;
};

// The reduced configuration the smoke pipeline runs with.
ModelConfig smoke_model_config();
GenConfig smoke_gen_config();

SmokeReport pipeline_smoke(uint64_t seed, const std::string& out_dir);

}  // namespace unips
