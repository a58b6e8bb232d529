#pragma once

#include <string>
#include <vector>

#include "unips/render.hpp"

namespace unips {

// Mean angular error in degrees over pixels where mask != 0:
// mean(acos(clamp(pred . gt, -1, 1))). Shapes must match; the mask must
// select at least one pixel.
double mae_degrees(const std::vector<float>& pred, const std::vector<float>& gt,
                   const std::vector<uint8_t>& mask);

// Classic calibrated Lambertian inversion: per-pixel least squares on
// L (rho n) = i with known directional lights. Every rig must consist of
// exactly one directional light (no points, no ambient); K >= 3 with
// linearly independent directions. Pixels whose usable equations (shading
// above the shadow threshold) are fewer than 3, rank deficient, or whose
// recovered albedo is zero are flagged invalid.
struct WoodhamResult {
    std::vector<float> normals;  // H*W*3, zeros where invalid
    std::vector<uint8_t> valid;  // H*W
};
WoodhamResult woodham_baseline(const MultiIllumSet& set, double shadow_eps = 1e-6);

// Normal-map visualization: n in [-1,1] mapped linearly to [0,255],
// x -> R, y -> G, z -> B.
void export_normal_png(const std::vector<float>& normals, int width, int height,
                       const std::string& path);

// Simple line plot (one or more series over shared x values) rendered to
// an 8-bit PNG; used for the K-scaling curve.
void render_line_plot(const std::vector<double>& xs,
                      const std::vector<std::vector<double>>& series,
                      const std::vector<std::string>& labels, const std::string& title,
                      const std::string& path);

}  // namespace unips

#include "unips/dataset.hpp"
#include "unips/model.hpp"

namespace unips {

struct EvalOptions {
    std::string split = "test";
    int k = 0;           // 0 = full set, otherwise the first K images
    int max_scenes = 0;  // 0 = all scenes in the split
};

// MAE is computed over in-object mask pixels (stated in reports).
struct EvalReport {
    std::vector<std::pair<std::string, double>> per_scene;  // (dir, MAE degrees)
    double mean = 0;
    double median = 0;
    std::string config_fingerprint;

    std::string csv() const;
    std::string to_json() const;
};

EvalReport evaluate_model(const Model& model, const Manifest& manifest,
                          const EvalOptions& options);
EvalReport evaluate_checkpoint(const std::string& ckpt_path, const Manifest& manifest,
                               const EvalOptions& options);

struct AblationTable {
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    std::vector<std::vector<double>> mae;  // [row][col]

    std::string csv() const;
    double cell(const std::string& row, const std::string& col) const;
};

// Encoder configurations (geo-only / il-only / dual) across K values.
// All three checkpoints must come from identically budgeted runs.
AblationTable ablate_encoders(const Manifest& manifest, const std::string& geo_ckpt,
                              const std::string& il_ckpt, const std::string& dual_ckpt,
                              const std::vector<int>& k_list, const EvalOptions& options);

// Training regimes (rows: checkpoints) against focal buckets (cols: one
// manifest per bucket, e.g. short / long / ortho).
AblationTable ablate_projection(
    const std::vector<std::pair<std::string, std::string>>& regime_ckpts,
    const std::vector<std::pair<std::string, const Manifest*>>& eval_buckets,
    const EvalOptions& options);

// MAE as a function of K for one trained model; writes k_scaling.csv and
// k_scaling.png into out_dir.
std::vector<std::pair<int, double>> k_scaling(const Manifest& manifest,
                                              const std::string& ckpt_path,
                                              const std::vector<int>& k_list,
                                              const std::string& out_dir,
                                              const EvalOptions& options);

}  // namespace unips
