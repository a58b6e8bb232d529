#include "unips/eval.hpp"

#include <algorithm>
#include <cmath>

#include "unips/image_io.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace unips {

namespace {
constexpr double kRad2Deg = 57.29577951308232;
}

double mae_degrees(const std::vector<float>& pred, const std::vector<float>& gt,
                   const std::vector<uint8_t>& mask) {
    if (pred.size() != gt.size() || pred.size() != mask.size() * 3) {
        throw ShapeError(cat("mae: sizes disagree (pred ", pred.size(), ", gt ", gt.size(),
                             ", mask ", mask.size(), ")"));
    }
    double sum = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        double dot = 0.0;
        for (int c = 0; c < 3; ++c) {
            dot += static_cast<double>(pred[i * 3 + c]) * gt[i * 3 + c];
        }
        dot = std::clamp(dot, -1.0, 1.0);
        sum += std::acos(dot);
        ++count;
    }
    if (count == 0) throw ContractError("mae: empty mask");
    return sum / count * kRad2Deg;
}

namespace {

// 3x3 symmetric solve with a conditioning gate; returns false when the
// light matrix is rank deficient at this pixel.
bool solve_normal_equations(const double a[9], const double b[3], double x[3]) {
    double m[9];
    std::copy(a, a + 9, m);
    double rhs[3] = {b[0], b[1], b[2]};
    const double scale = std::max({std::fabs(m[0]), std::fabs(m[4]), std::fabs(m[8]), 1e-300});

    int perm[3] = {0, 1, 2};
    for (int col = 0; col < 3; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 3; ++r) {
            if (std::fabs(m[perm[r] * 3 + col]) > std::fabs(m[perm[pivot] * 3 + col])) pivot = r;
        }
        std::swap(perm[col], perm[pivot]);
        const double p = m[perm[col] * 3 + col];
        if (std::fabs(p) < 1e-9 * scale) return false;
        for (int r = col + 1; r < 3; ++r) {
            const double f = m[perm[r] * 3 + col] / p;
            for (int c = col; c < 3; ++c) m[perm[r] * 3 + c] -= f * m[perm[col] * 3 + c];
            rhs[perm[r]] -= f * rhs[perm[col]];
        }
    }
    for (int col = 2; col >= 0; --col) {
        double v = rhs[perm[col]];
        for (int c = col + 1; c < 3; ++c) v -= m[perm[col] * 3 + c] * x[c];
        x[col] = v / m[perm[col] * 3 + col];
    }
    return true;
}

}  // namespace

WoodhamResult woodham_baseline(const MultiIllumSet& set, double shadow_eps) {
    const int k = set.k();
    if (k < 3) throw ContractError(cat("woodham: needs >= 3 images, got ", k));
    std::vector<Vec3> lights(static_cast<size_t>(k));
    std::vector<double> energies(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const auto& rig = set.rigs[static_cast<size_t>(i)];
        if (rig.directionals.size() != 1 || !rig.points.empty() ||
            rig.ambient.max_component() > 0.0) {
            throw ContractError(cat("woodham: image ", i,
                                    " is not lit by a single directional source"));
        }
        lights[static_cast<size_t>(i)] = -rig.directionals[0].dir.normalized();
        const Vec3& e = rig.directionals[0].intensity;
        energies[static_cast<size_t>(i)] = (e.x + e.y + e.z) / 3.0;
    }

    const size_t n = set.mask.size();
    WoodhamResult result;
    result.normals.assign(n * 3, 0.0f);
    result.valid.assign(n, 0);

    for (size_t px = 0; px < n; ++px) {
        if (!set.mask[px]) continue;
        double ata[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
        double atb[3] = {0, 0, 0};
        int usable = 0;
        for (int i = 0; i < k; ++i) {
            const auto& img = set.images[static_cast<size_t>(i)];
            const double intensity = (static_cast<double>(img[px * 3]) + img[px * 3 + 1] +
                                      img[px * 3 + 2]) /
                                     3.0;
            if (intensity <= shadow_eps) continue;  // shadowed or clamped-off
            const Vec3& l = lights[static_cast<size_t>(i)];
            const double row[3] = {l.x * energies[static_cast<size_t>(i)],
                                   l.y * energies[static_cast<size_t>(i)],
                                   l.z * energies[static_cast<size_t>(i)]};
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) ata[r * 3 + c] += row[r] * row[c];
                atb[r] += row[r] * intensity;
            }
            ++usable;
        }
        if (usable < 3) continue;
        double b[3];
        if (!solve_normal_equations(ata, atb, b)) continue;
        const double rho = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
        if (rho < 1e-8) continue;  // zero albedo
        result.normals[px * 3 + 0] = static_cast<float>(b[0] / rho);
        result.normals[px * 3 + 1] = static_cast<float>(b[1] / rho);
        result.normals[px * 3 + 2] = static_cast<float>(b[2] / rho);
        result.valid[px] = 1;
    }
    return result;
}

void export_normal_png(const std::vector<float>& normals, int width, int height,
                       const std::string& path) {
    if (normals.size() != static_cast<size_t>(width) * height * 3) {
        throw ShapeError("export_normal_png: buffer does not match dimensions");
    }
    std::vector<uint8_t> rgb(normals.size());
    for (size_t i = 0; i < normals.size(); ++i) {
        const float v = std::clamp(normals[i], -1.0f, 1.0f);
        rgb[i] = static_cast<uint8_t>(std::lround((v + 1.0f) * 0.5f * 255.0f));
    }
    write_png8_rgb(path, rgb.data(), width, height);
}

namespace {

void draw_line(std::vector<uint8_t>& img, int w, int h, int x0, int y0, int x1, int y1,
               uint8_t r, uint8_t g, uint8_t b) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        if (x0 >= 0 && x0 < w && y0 >= 0 && y0 < h) {
            const size_t i = (static_cast<size_t>(y0) * w + x0) * 3;
            img[i] = r;
            img[i + 1] = g;
            img[i + 2] = b;
        }
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

}  // namespace

void render_line_plot(const std::vector<double>& xs,
                      const std::vector<std::vector<double>>& series,
                      const std::vector<std::string>& labels, const std::string& title,
                      const std::string& path) {
    (void)labels;
    (void)title;
    const int w = 480, h = 320, margin = 40;
    std::vector<uint8_t> img(static_cast<size_t>(w) * h * 3, 255);

    double ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        for (double v : s) {
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    }
    if (!(ymax > ymin)) ymax = ymin + 1.0;
    const double xmin = xs.front(), xmax = xs.back() > xs.front() ? xs.back() : xs.front() + 1;

    auto px = [&](double x) {
        return margin + static_cast<int>((x - xmin) / (xmax - xmin) * (w - 2 * margin));
    };
    auto py = [&](double y) {
        return h - margin - static_cast<int>((y - ymin) / (ymax - ymin) * (h - 2 * margin));
    };

    draw_line(img, w, h, margin, h - margin, w - margin, h - margin, 0, 0, 0);
    draw_line(img, w, h, margin, h - margin, margin, margin, 0, 0, 0);

    const uint8_t palette[4][3] = {{200, 40, 40}, {40, 100, 200}, {40, 160, 60}, {150, 60, 180}};
    for (size_t si = 0; si < series.size(); ++si) {
        const auto* col = palette[si % 4];
        for (size_t i = 0; i + 1 < series[si].size() && i + 1 < xs.size(); ++i) {
            draw_line(img, w, h, px(xs[i]), py(series[si][i]), px(xs[i + 1]),
                      py(series[si][i + 1]), col[0], col[1], col[2]);
        }
        for (size_t i = 0; i < series[si].size() && i < xs.size(); ++i) {
            for (int oy = -2; oy <= 2; ++oy) {
                for (int ox = -2; ox <= 2; ++ox) {
                    const int x = px(xs[i]) + ox, y = py(series[si][i]) + oy;
                    if (x >= 0 && x < w && y >= 0 && y < h) {
                        const size_t idx = (static_cast<size_t>(y) * w + x) * 3;
                        img[idx] = col[0];
                        img[idx + 1] = col[1];
                        img[idx + 2] = col[2];
                    }
                }
            }
        }
    }
    write_png8_rgb(path, img.data(), w, h);
}

}  // namespace unips

namespace unips {

namespace fs = std::filesystem;

std::string EvalReport::csv() const {
    std::string out = "scene,mae_deg\n";
    char buf[160];
    for (const auto& [dir, mae] : per_scene) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f\n", dir.c_str(), mae);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%.6f\nmedian,%.6f\n", mean, median);
    out += buf;
    return out;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["mean_mae_deg"] = mean;
    j["median_mae_deg"] = median;
    j["config_fingerprint"] = config_fingerprint;
    j["mask_restricted"] = true;  // MAE over in-object pixels
    j["per_scene"] = nlohmann::json::array();
    for (const auto& [dir, mae] : per_scene) {
        j["per_scene"].push_back({{"scene", dir}, {"mae_deg", mae}});
    }
    return j.dump(2) + "\n";
}

EvalReport evaluate_model(const Model& model, const Manifest& manifest,
                          const EvalOptions& options) {
    auto records = manifest.split(options.split);
    if (records.empty()) {
        throw ContractError(cat("evaluate: split '", options.split, "' is empty"));
    }
    if (options.max_scenes > 0 && static_cast<int>(records.size()) > options.max_scenes) {
        records.resize(static_cast<size_t>(options.max_scenes));
    }
    EvalReport report;
    report.config_fingerprint = hex64(model.config().hash());
    for (const auto* rec : records) {
        MultiIllumSet set = read_scene_dir(manifest.scene_path(*rec));
        Tensor geo = geo_features_for_scene(model.config(), manifest.scene_path(*rec));
        if (options.k > 0 && options.k < set.k()) {
            set = subset_images(set, options.k);
            if (geo.defined()) geo = select_geo_rows(geo, options.k);
        }
        std::vector<float> pred = model.infer_full(set, geo);
        report.per_scene.emplace_back(rec->dir, mae_degrees(pred, set.gt_normals, set.mask));
    }
    std::vector<double> values;
    for (const auto& [d, m] : report.per_scene) {
        report.mean += m;
        values.push_back(m);
    }
    report.mean /= static_cast<double>(values.size());
    std::sort(values.begin(), values.end());
    report.median = values.size() % 2 ? values[values.size() / 2]
                                      : 0.5 * (values[values.size() / 2 - 1] +
                                               values[values.size() / 2]);
    return report;
}

EvalReport evaluate_checkpoint(const std::string& ckpt_path, const Manifest& manifest,
                               const EvalOptions& options) {
    LoadedModel loaded = load_model_checkpoint(ckpt_path);
    return evaluate_model(*loaded.model, manifest, options);
}

std::string AblationTable::csv() const {
    std::string out = "config";
    for (const auto& c : col_labels) out += "," + c;
    out += "\n";
    char buf[64];
    for (size_t r = 0; r < row_labels.size(); ++r) {
        out += row_labels[r];
        for (size_t c = 0; c < col_labels.size(); ++c) {
            std::snprintf(buf, sizeof(buf), ",%.6f", mae[r][c]);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

double AblationTable::cell(const std::string& row, const std::string& col) const {
    for (size_t r = 0; r < row_labels.size(); ++r) {
        if (row_labels[r] != row) continue;
        for (size_t c = 0; c < col_labels.size(); ++c) {
            if (col_labels[c] == col) return mae[r][c];
        }
    }
    throw ConfigError(cat("ablation table has no cell (", row, ", ", col, ")"));
}

AblationTable ablate_encoders(const Manifest& manifest, const std::string& geo_ckpt,
                              const std::string& il_ckpt, const std::string& dual_ckpt,
                              const std::vector<int>& k_list, const EvalOptions& options) {
    if (k_list.empty()) throw ConfigError("ablate_encoders: empty K list");
    AblationTable table;
    table.row_labels = {"geo_only", "il_only", "dual"};
    for (int k : k_list) table.col_labels.push_back(cat("K=", k));

    const std::string ckpts[3] = {geo_ckpt, il_ckpt, dual_ckpt};
    for (int r = 0; r < 3; ++r) {
        if (!fs::exists(ckpts[r])) {
            throw IoError(cat("ablate_encoders: missing checkpoint for ", table.row_labels[r],
                              ": ", ckpts[r]));
        }
        LoadedModel loaded = load_model_checkpoint(ckpts[r]);
        std::vector<double> row;
        for (int k : k_list) {
            EvalOptions opt = options;
            opt.k = k;
            row.push_back(evaluate_model(*loaded.model, manifest, opt).mean);
        }
        table.mae.push_back(std::move(row));
    }
    return table;
}

AblationTable ablate_projection(
    const std::vector<std::pair<std::string, std::string>>& regime_ckpts,
    const std::vector<std::pair<std::string, const Manifest*>>& eval_buckets,
    const EvalOptions& options) {
    if (regime_ckpts.empty() || eval_buckets.empty()) {
        throw ConfigError("ablate_projection: need at least one regime and one bucket");
    }
    AblationTable table;
    for (const auto& [label, ignored] : eval_buckets) table.col_labels.push_back(label);
    for (const auto& [label, ckpt] : regime_ckpts) {
        if (!fs::exists(ckpt)) {
            throw IoError(cat("ablate_projection: missing checkpoint for ", label, ": ", ckpt));
        }
        table.row_labels.push_back(label);
        LoadedModel loaded = load_model_checkpoint(ckpt);
        std::vector<double> row;
        for (const auto& [bucket_label, bucket] : eval_buckets) {
            row.push_back(evaluate_model(*loaded.model, *bucket, options).mean);
        }
        table.mae.push_back(std::move(row));
    }
    return table;
}

std::vector<std::pair<int, double>> k_scaling(const Manifest& manifest,
                                              const std::string& ckpt_path,
                                              const std::vector<int>& k_list,
                                              const std::string& out_dir,
                                              const EvalOptions& options) {
    if (k_list.empty()) throw ConfigError("k_scaling: empty K list");
    LoadedModel loaded = load_model_checkpoint(ckpt_path);
    std::vector<std::pair<int, double>> curve;
    for (int k : k_list) {
        EvalOptions opt = options;
        opt.k = k;
        curve.emplace_back(k, evaluate_model(*loaded.model, manifest, opt).mean);
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::string csv = "k,mae_deg\n";
        char buf[64];
        std::vector<double> xs, ys;
        for (const auto& [k, mae] : curve) {
            std::snprintf(buf, sizeof(buf), "%d,%.6f\n", k, mae);
            csv += buf;
            xs.push_back(k);
            ys.push_back(mae);
        }
        std::ofstream f((fs::path(out_dir) / "k_scaling.csv").string(), std::ios::binary);
        if (!f) throw IoError("k_scaling: cannot write csv");
        f << csv;
        render_line_plot(xs, {ys}, {"mae"}, "k_scaling",
                         (fs::path(out_dir) / "k_scaling.png").string());
    }
    return curve;
}

}  // namespace unips
