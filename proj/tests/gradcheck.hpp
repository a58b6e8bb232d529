#pragma once

// Central-difference gradient oracle. Independent of the tape: it re-runs
// the forward pass with perturbed parameters and compares the quotient
// against whatever backward() produced.
//
// The scalar under differentiation is a fixed random linear probe of the
// op output, accumulated in double; the op math stays f32 (that is what is
// being checked). Quotients use Richardson extrapolation of central
// differences at steps h and h/2: f32 forward rounding (~1e-7 relative per
// stored element) caps absolute difference accuracy near 6e-5/h, so the
// step must be large and the O(h^2) truncation cancelled to resolve the
// 1e-3 tolerance on O(1e-2) gradients.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "unips/tensor.hpp"

namespace unips::testing {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// forward_out must rebuild the computation from the current parameter
// values and return the op output tensor.
inline GradCheckReport gradcheck(const std::vector<std::pair<std::string, Tensor>>& params,
                                 const std::function<Tensor()>& forward_out,
                                 uint64_t probe_seed = 977, float h = 0.05f) {
    Tape::current().clear();
    for (auto& [name, p] : params) p.drop_grad();

    Tensor out = forward_out();
    std::mt19937_64 prng(probe_seed);
    std::uniform_real_distribution<float> pd(0.5f, 1.5f);
    std::vector<float> probe(static_cast<size_t>(out.numel()));
    for (auto& v : probe) v = pd(prng);

    out.grad() = probe;
    Tape::current().replay_reverse();

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<float>(p.numel(), 0.0f));
    }
    Tape::current().clear();

    NoGradGuard no_grad;
    auto probe_loss = [&]() -> double {
        Tensor o = forward_out();
        double acc = 0.0;
        const float* po = o.ptr();
        for (int64_t i = 0; i < o.numel(); ++i) acc += static_cast<double>(po[i]) * probe[i];
        return acc;
    };

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi].second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            float& x = p.data()[static_cast<size_t>(i)];
            const float saved = x;
            auto central = [&](float step) {
                x = saved + step;
                const double f_plus = probe_loss();
                x = saved - step;
                const double f_minus = probe_loss();
                x = saved;
                return (f_plus - f_minus) / (2.0 * step);
            };
            const double d_h = central(h);
            const double d_half = central(h * 0.5f);
            const double numeric = (4.0 * d_half - d_h) / 3.0;
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = params[pi].first;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

// Variant with a caller-supplied double-precision reference forward: the
// numeric side differentiates the reference (rounding ~1e-13), so the
// pinned h = 1e-3 resolves even near-zero gradient components. The
// reference must read the current (perturbed) parameter values and return
// the flattened output in the same element order as the f32 op.
inline GradCheckReport refcheck(const std::vector<std::pair<std::string, Tensor>>& params,
                                const std::function<Tensor()>& forward_out,
                                const std::function<std::vector<double>()>& ref_forward,
                                uint64_t probe_seed = 977, float h = 1e-3f) {
    Tape::current().clear();
    for (auto& [name, p] : params) p.drop_grad();

    Tensor out = forward_out();
    std::mt19937_64 prng(probe_seed);
    std::uniform_real_distribution<float> pd(0.5f, 1.5f);
    std::vector<float> probe(static_cast<size_t>(out.numel()));
    for (auto& v : probe) v = pd(prng);

    {
        std::vector<double> ref = ref_forward();
        if (ref.size() != probe.size()) {
            throw Error(cat("refcheck: reference returned ", ref.size(), " values, op produced ",
                            probe.size()));
        }
        // the reference must agree with the op to f32 accuracy before any
        // derivative is trusted
        for (size_t i = 0; i < ref.size(); ++i) {
            const double diff = std::fabs(ref[i] - out.ptr()[i]);
            const double tol = 1e-4 * std::max(1.0, std::fabs(ref[i]));
            if (diff > tol) {
                throw Error(cat("refcheck: reference disagrees with op at ", i, ": ", ref[i],
                                " vs ", out.ptr()[i]));
            }
        }
    }

    out.grad() = probe;
    Tape::current().replay_reverse();

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<float>(p.numel(), 0.0f));
    }
    Tape::current().clear();

    auto probe_loss = [&]() -> double {
        std::vector<double> ref = ref_forward();
        double acc = 0.0;
        for (size_t i = 0; i < ref.size(); ++i) acc += ref[i] * probe[i];
        return acc;
    };

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi].second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            float& x = p.data()[static_cast<size_t>(i)];
            const float saved = x;
            x = saved + h;
            const double f_plus = probe_loss();
            x = saved - h;
            const double f_minus = probe_loss();
            x = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = params[pi].first;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace unips::testing
