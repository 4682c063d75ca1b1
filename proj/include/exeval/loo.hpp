#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "exeval/common.hpp"
#include "exeval/dataset.hpp"
#include "exeval/errors.hpp"
#include "exeval/explainers.hpp"
#include "exeval/model.hpp"

namespace exeval {

struct loo_result {
    example_id removed_id = 0;
    // probe loss after retraining without the example, minus with it
    double loss_delta = 0.0;
};

struct loo_config {
    double l2_reg = 0.0;
    double grad_tol = 1e-8;
    std::size_t max_iter = 2000000;
};

constexpr std::size_t loo_size_guard = 200;

/// Brute-force leave-one-out retraining ground truth for influence scores.
/// Logreg only: each fold is refit with deterministic full-batch gradient
/// descent so deltas carry no SGD noise. Results are ordered by removed_id.
/// The probe label is the label whose loss is tracked (callers pass the
/// model's predicted label so the comparison matches if_score).
inline std::vector<loo_result> loo_deltas(const arch& a, const dataset& train,
                                          const vec& probe_x, int probe_label,
                                          const loo_config& cfg = {}, unsigned workers = 1) {
    if (a.kind != arch::family::logreg)
        throw argument_error("loo_deltas: only logreg retraining is supported");
    if (train.size() > loo_size_guard)
        throw argument_error("loo_deltas: training set exceeds the size guard of " +
                             std::to_string(loo_size_guard));
    if (train.size() < 2) throw argument_error("loo_deltas: need at least 2 examples");

    const model_params base =
        fit_logreg_full_batch(train, cfg.l2_reg, cfg.grad_tol, cfg.max_iter);
    const double base_loss = loss(base, probe_x, probe_label, cfg.l2_reg);

    std::vector<loo_result> results(train.size());
    parallel_for(train.size(), workers, [&](std::size_t i) {
        std::vector<labeled_example> fold;
        fold.reserve(train.size() - 1);
        for (std::size_t j = 0; j < train.size(); ++j)
            if (j != i) fold.push_back(train[j]);
        dataset fold_data(std::move(fold), train.dim());
        model_params refit;
        try {
            refit = fit_logreg_full_batch(fold_data, cfg.l2_reg, cfg.grad_tol, cfg.max_iter,
                                          &base);
        } catch (const training_error& e) {
            throw training_error("loo_deltas: fold removing id " +
                                     std::to_string(train[i].id) + " failed: " + e.what(),
                                 e.step);
        }
        results[i] = {train[i].id, loss(refit, probe_x, probe_label, cfg.l2_reg) - base_loss};
    });
    std::sort(results.begin(), results.end(),
              [](const loo_result& x, const loo_result& y) { return x.removed_id < y.removed_id; });
    return results;
}

inline void write_loo_csv(const std::vector<loo_result>& results,
                          const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write LOO results: " + path.string());
    out << "removed_id,loss_delta\n";
    for (const auto& r : results)
        out << r.removed_id << ',' << detail::format_double(r.loss_delta) << '\n';
}

}  // namespace exeval
