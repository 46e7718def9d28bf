// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "crossmix/tensor.hpp"

namespace crossmix {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int coords_checked = 0;
    std::vector<std::string> nonfinite;  // coordinates where f(x +/- h) was not finite

    bool ok(double tol) const { return nonfinite.empty() && max_rel_err < tol; }
};

// Central-difference check of backward() against the function the recorded
// graph actually represents. Each leaf coordinate is perturbed by +/- h and
// the graph is re-evaluated in topological order; detached values, hard
// selections, sampled masks and targets are all constants of the recording,
// which keeps the comparison meaningful for straight-through constructs.
// Relative error per coordinate: |analytic - numeric| / max(1, |analytic|).
inline GradCheckReport finite_diff_check(const Tensor& root,
                                         const std::vector<std::pair<std::string, Tensor>>& leaves,
                                         double h) {
    require(root.size() == 1, "finite_diff_check: root must be scalar");
    require(h > 0.0, "finite_diff_check: h must be positive");

    for (const auto& [name, leaf] : leaves) leaf.zero_grad();
    root.backward();

    Graph graph = Graph::reachable(root);
    GradCheckReport rep;

    for (const auto& [name, leaf] : leaves) {
        auto& vals = leaf.mutable_values();
        const auto& grad = leaf.mutable_grad();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            graph.reevaluate();
            const double fp = root.values()[0];
            vals[i] = orig - h;
            graph.reevaluate();
            const double fm = root.values()[0];
            vals[i] = orig;
            ++rep.coords_checked;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                rep.nonfinite.push_back(name + "[" + std::to_string(i) + "]");
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = grad[i];
            const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_param = name;
                rep.worst_index = static_cast<int>(i);
                rep.worst_analytic = analytic;
                rep.worst_numeric = numeric;
            }
        }
    }
    graph.reevaluate();  // restore recorded values
    return rep;
}

}  // namespace crossmix
