#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "exeval/common.hpp"
#include "exeval/dataset.hpp"
#include "exeval/errors.hpp"
#include "exeval/linalg.hpp"
#include "exeval/model.hpp"

namespace exeval {

/// An instance whose model outcome is being explained. Explananda carry no
/// ground-truth label; scores are always taken against the model's own
/// prediction.
struct explanandum {
    example_id id = 0;
    vec x;
};

struct explanation_member {
    example_id id = 0;
    double score = 0.0;
};

/// Ranked attribution for one explanandum: the top-N training examples by
/// score, descending, ties broken by ascending example id.
struct explanation {
    example_id explanandum_id = 0;
    int predicted_label = 0;
    std::vector<explanation_member> members;
};

/// Builds an explanation from a full score vector aligned with the training
/// set order. N larger than the training set returns the full ranking.
inline explanation make_explanation(example_id explanandum_id, int predicted_label,
                                    const vec& scores, const dataset& train, std::size_t n) {
    if (n < 1) throw argument_error("make_explanation: N must be >= 1");
    if (scores.size() != train.size())
        throw argument_error("make_explanation: score vector does not match training set");
    std::vector<explanation_member> members(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) members[i] = {train[i].id, scores[i]};
    std::sort(members.begin(), members.end(),
              [](const explanation_member& a, const explanation_member& b) {
                  if (a.score != b.score) return a.score > b.score;
                  return a.id < b.id;
              });
    if (members.size() > n) members.resize(n);
    return {explanandum_id, predicted_label, std::move(members)};
}

struct if_config {
    double damping = 0.01;
    double cg_tol = 1e-8;
    std::size_t max_iter = 1000;
};

/// Influence-function score of training example z on the outcome at t:
///   -grad L(t)^T (H + damping I)^{-1} grad L(z)
/// with the t-side gradient taken against the model's predicted label.
/// Positive score: upweighting z increases the loss at t (removing z would
/// decrease it).
inline double if_score(const model_params& model, const dataset& train,
                       const labeled_example& z, const vec& t_x, int t_label, double l2_reg,
                       const if_config& cfg = {}) {
    const vec g_t = grad_loss(model, t_x, t_label, l2_reg);
    const vec s = inverse_hvp(model, train, g_t, l2_reg, cfg.damping, cfg.cg_tol, cfg.max_iter);
    return -dot(s, grad_loss(model, z, l2_reg));
}

/// grad L(z)^T (H + damping I)^{-1} grad L(z); non-negative for damping > 0.
inline double self_influence(const model_params& model, const dataset& train,
                             const labeled_example& z, double l2_reg,
                             const if_config& cfg = {}) {
    const vec g = grad_loss(model, z, l2_reg);
    const vec s = inverse_hvp(model, train, g, l2_reg, cfg.damping, cfg.cg_tol, cfg.max_iter);
    return dot(s, g);
}

constexpr double rif_epsilon = 1e-8;

/// Relative influence: the IF score normalized by the example's global
/// effect, if_score / sqrt(self_influence + eps).
inline double rif_score(const model_params& model, const dataset& train,
                        const labeled_example& z, const vec& t_x, int t_label, double l2_reg,
                        const if_config& cfg = {}) {
    return if_score(model, train, z, t_x, t_label, l2_reg, cfg) /
           std::sqrt(self_influence(model, train, z, l2_reg, cfg) + rif_epsilon);
}

/// Sum over checkpoints of lr_k * <grad L(theta_k, z), grad L(theta_k, t)>,
/// the t-side gradient against the given (predicted) label.
inline double tracein_score(const arch& a, const std::vector<checkpoint>& checkpoints,
                            const labeled_example& z, const vec& t_x, int t_label,
                            double l2_reg) {
    if (checkpoints.empty())
        throw argument_error("tracein_score: empty checkpoint selection");
    double s = 0.0;
    for (const auto& c : checkpoints) {
        const model_params p(a, c.theta);
        s += c.learning_rate *
             dot(grad_loss(p, z, l2_reg), grad_loss(p, t_x, t_label, l2_reg));
    }
    return s;
}

/// Common interface the pipeline drives: score every training example
/// against each explanandum. Row i of the result aligns with training-set
/// order for explananda ts[i].
class explainer {
public:
    virtual ~explainer() = default;
    virtual std::string method() const = 0;
    virtual std::vector<vec> score_all(const std::vector<explanandum>& ts,
                                       unsigned workers) const = 0;
};

/// IF and RIF share all machinery; RIF additionally caches per-example
/// self-influences at construction. The per-explanandum inverse-HVP is
/// computed once and reused across all training examples.
class influence_explainer : public explainer {
public:
    influence_explainer(model_params model, const dataset& train, double l2_reg,
                        if_config cfg, bool relative, unsigned workers = 1)
        : model_(std::move(model)),
          train_(&train),
          l2_reg_(l2_reg),
          cfg_(cfg),
          relative_(relative) {
        grads_.resize(train.size());
        for (std::size_t i = 0; i < train.size(); ++i)
            grads_[i] = grad_loss(model_, train[i], l2_reg_);
        if (relative_) {
            inv_sqrt_self_.assign(train.size(), 0.0);
            parallel_for(train.size(), workers, [&](std::size_t i) {
                const vec s = inverse_hvp(model_, *train_, grads_[i], l2_reg_, cfg_.damping,
                                          cfg_.cg_tol, cfg_.max_iter);
                inv_sqrt_self_[i] = 1.0 / std::sqrt(dot(s, grads_[i]) + rif_epsilon);
            });
        }
    }

    std::string method() const override { return relative_ ? "RIF" : "IF"; }

    vec scores_for(const vec& t_x) const {
        const int label = predict_label(model_, t_x);
        const vec g_t = grad_loss(model_, t_x, label, l2_reg_);
        const vec s = inverse_hvp(model_, *train_, g_t, l2_reg_, cfg_.damping, cfg_.cg_tol,
                                  cfg_.max_iter);
        vec out(grads_.size());
        for (std::size_t i = 0; i < grads_.size(); ++i) {
            out[i] = -dot(s, grads_[i]);
            if (relative_) out[i] *= inv_sqrt_self_[i];
        }
        return out;
    }

    std::vector<vec> score_all(const std::vector<explanandum>& ts,
                               unsigned workers) const override {
        std::vector<vec> all(ts.size());
        parallel_for(ts.size(), workers, [&](std::size_t i) { all[i] = scores_for(ts[i].x); });
        return all;
    }

private:
    model_params model_;
    const dataset* train_;
    double l2_reg_;
    if_config cfg_;
    bool relative_;
    std::vector<vec> grads_;
    vec inv_sqrt_self_;
};

struct tracein_config {
    // step indices to include; empty = all recorded checkpoints
    std::vector<long> steps;
};

class tracein_explainer : public explainer {
public:
    tracein_explainer(model_params final_model, const dataset& train,
                      const std::vector<checkpoint>& checkpoints, double l2_reg,
                      tracein_config cfg = {})
        : model_(std::move(final_model)), train_(&train), l2_reg_(l2_reg) {
        for (const auto& c : checkpoints) {
            if (!cfg.steps.empty() &&
                std::find(cfg.steps.begin(), cfg.steps.end(), c.step) == cfg.steps.end())
                continue;
            selected_.push_back(c);
        }
        if (selected_.empty())
            throw argument_error("tracein: checkpoint selection is empty");
        // per-checkpoint training-example gradients are explanandum-independent
        train_grads_.resize(selected_.size());
        for (std::size_t k = 0; k < selected_.size(); ++k) {
            const model_params p(model_.a, selected_[k].theta);
            train_grads_[k].resize(train.size());
            for (std::size_t i = 0; i < train.size(); ++i)
                train_grads_[k][i] = grad_loss(p, train[i], l2_reg_);
        }
    }

    std::string method() const override { return "TraceIn"; }

    vec scores_for(const vec& t_x) const {
        const int label = predict_label(model_, t_x);
        vec out(train_->size(), 0.0);
        for (std::size_t k = 0; k < selected_.size(); ++k) {
            const model_params p(model_.a, selected_[k].theta);
            const vec g_t = grad_loss(p, t_x, label, l2_reg_);
            const double lr = selected_[k].learning_rate;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] += lr * dot(train_grads_[k][i], g_t);
        }
        return out;
    }

    std::vector<vec> score_all(const std::vector<explanandum>& ts,
                               unsigned workers) const override {
        std::vector<vec> all(ts.size());
        parallel_for(ts.size(), workers, [&](std::size_t i) { all[i] = scores_for(ts[i].x); });
        return all;
    }

private:
    model_params model_;
    const dataset* train_;
    double l2_reg_;
    std::vector<checkpoint> selected_;
    std::vector<std::vector<vec>> train_grads_;
};

struct datamodels_config {
    std::size_t num_subsets = 0;      // 0 = 5 * |train|
    double subset_fraction = 0.5;     // inclusion probability alpha
    double ridge_penalty = 0.0;       // 0 = 1e-3 * num_subsets
    std::uint64_t base_seed = 0;

    std::size_t effective_subsets(std::size_t n_train) const {
        return num_subsets > 0 ? num_subsets : 5 * n_train;
    }
    double effective_ridge(std::size_t m) const {
        return ridge_penalty > 0.0 ? ridge_penalty : 1e-3 * static_cast<double>(m);
    }
};

/// Ridge regression from subset-indicator vectors to per-subset targets,
/// one target column per test point. Indicators and targets are centered so
/// the intercept is absorbed; returns the n x T coefficient matrix.
inline dense_matrix ridge_fit(const std::vector<std::vector<std::uint8_t>>& indicators,
                              const dense_matrix& targets, double penalty) {
    const std::size_t m = indicators.size();
    if (m == 0) throw argument_error("ridge_fit: no subsets");
    const std::size_t n = indicators[0].size();
    if (targets.rows != m) throw argument_error("ridge_fit: target rows do not match subsets");
    if (!(penalty > 0.0)) throw argument_error("ridge_fit: penalty must be positive");

    vec col_mean(n, 0.0);
    for (const auto& row : indicators)
        for (std::size_t j = 0; j < n; ++j) col_mean[j] += row[j];
    for (auto& v : col_mean) v /= static_cast<double>(m);

    // gram = Xc^T Xc + penalty I
    dense_matrix gram(n, n);
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t i = 0; i < n; ++i) {
            const double xi = indicators[a][i] - col_mean[i];
            if (xi == 0.0) continue;
            for (std::size_t j = i; j < n; ++j)
                gram(i, j) += xi * (indicators[a][j] - col_mean[j]);
        }
    for (std::size_t i = 0; i < n; ++i) {
        gram(i, i) += penalty;
        for (std::size_t j = 0; j < i; ++j) gram(i, j) = gram(j, i);
    }
    const dense_matrix chol = cholesky_factor(std::move(gram));

    dense_matrix coef(n, targets.cols);
    vec target_mean(targets.cols, 0.0);
    for (std::size_t t = 0; t < targets.cols; ++t) {
        for (std::size_t a = 0; a < m; ++a) target_mean[t] += targets(a, t);
        target_mean[t] /= static_cast<double>(m);
    }
    for (std::size_t t = 0; t < targets.cols; ++t) {
        vec rhs(n, 0.0);
        for (std::size_t a = 0; a < m; ++a) {
            const double yc = targets(a, t) - target_mean[t];
            for (std::size_t j = 0; j < n; ++j)
                rhs[j] += (indicators[a][j] - col_mean[j]) * yc;
        }
        const vec w = cholesky_solve(chol, rhs);
        for (std::size_t j = 0; j < n; ++j) coef(j, t) = w[j];
    }
    return coef;
}

struct datamodels_fit_result {
    dense_matrix scores;  // |train| x |test_points|
    std::vector<std::string> warnings;
};

/// Samples m training subsets (each example kept independently with
/// probability alpha, redrawn while a class is absent), trains a fresh model
/// per subset, and regresses the predicted-label logit margin of each test
/// point onto the subset indicators. Coefficients are the attribution
/// scores. Deterministic under base_seed; subset j owns RNG base_seed + j.
inline datamodels_fit_result datamodels_fit(const arch& a, const dataset& train,
                                            const std::vector<explanandum>& test_points,
                                            const std::vector<int>& predicted_labels,
                                            const train_config& tcfg,
                                            const datamodels_config& cfg,
                                            unsigned workers = 1) {
    const std::size_t n = train.size();
    const std::size_t m = cfg.effective_subsets(n);
    if (m < 10) throw argument_error("datamodels: need at least 10 subsets");
    if (!(cfg.subset_fraction > 0.0 && cfg.subset_fraction <= 1.0))
        throw argument_error("datamodels: subset_fraction must lie in (0, 1]");
    if (predicted_labels.size() != test_points.size())
        throw argument_error("datamodels: predicted label per test point required");

    datamodels_fit_result result;
    if (m < n)
        result.warnings.push_back("datamodels: num_subsets " + std::to_string(m) +
                                  " < training size " + std::to_string(n) +
                                  "; regression is under-determined");
    if (cfg.subset_fraction >= 1.0)
        result.warnings.push_back(
            "datamodels: subset_fraction = 1 leaves no indicator variance; "
            "coefficients will be zero");

    std::vector<std::vector<std::uint8_t>> indicators(m, std::vector<std::uint8_t>(n, 0));
    dense_matrix margins(m, test_points.size());

    parallel_for(m, workers, [&](std::size_t j) {
        std::mt19937_64 rng(cfg.base_seed + j);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::vector<labeled_example> subset;
        auto& row = indicators[j];
        while (true) {
            subset.clear();
            std::fill(row.begin(), row.end(), 0);
            for (std::size_t i = 0; i < n; ++i) {
                if (unif(rng) < cfg.subset_fraction) {
                    row[i] = 1;
                    subset.push_back(train[i]);
                }
            }
            std::size_t pos = 0;
            for (const auto& e : subset) pos += e.y;
            if (!subset.empty() && pos > 0 && pos < subset.size()) break;
        }
        dataset sub(std::move(subset), train.dim());
        train_config sub_cfg = tcfg;
        sub_cfg.seed = cfg.base_seed + j;
        model_params p;
        try {
            p = exeval::train(a, sub, sub_cfg).params;
        } catch (const training_error& e) {
            throw training_error("datamodels: subset " + std::to_string(j) +
                                     " failed to train: " + e.what(),
                                 e.step);
        }
        for (std::size_t t = 0; t < test_points.size(); ++t) {
            const double logit = predict_logit(p, test_points[t].x);
            margins(j, t) = predicted_labels[t] == 1 ? logit : -logit;
        }
    });

    result.scores = ridge_fit(indicators, margins, cfg.effective_ridge(m));
    return result;
}

class datamodels_explainer : public explainer {
public:
    datamodels_explainer(model_params final_model, const dataset& train, arch a,
                         train_config tcfg, datamodels_config cfg)
        : model_(std::move(final_model)),
          train_(&train),
          arch_(a),
          tcfg_(tcfg),
          cfg_(cfg) {}

    std::string method() const override { return "DataModels"; }

    std::vector<vec> score_all(const std::vector<explanandum>& ts,
                               unsigned workers) const override {
        std::vector<int> labels(ts.size());
        for (std::size_t i = 0; i < ts.size(); ++i)
            labels[i] = predict_label(model_, ts[i].x);
        auto fit = datamodels_fit(arch_, *train_, ts, labels, tcfg_, cfg_, workers);
        warnings_ = std::move(fit.warnings);
        std::vector<vec> all(ts.size(), vec(train_->size()));
        for (std::size_t t = 0; t < ts.size(); ++t)
            for (std::size_t i = 0; i < train_->size(); ++i) all[t][i] = fit.scores(i, t);
        return all;
    }

    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    model_params model_;
    const dataset* train_;
    arch arch_;
    train_config tcfg_;
    datamodels_config cfg_;
    mutable std::vector<std::string> warnings_;
};

// --- explanation serialization -------------------------------------------

inline nlohmann::json explanation_to_json(const explanation& e) {
    nlohmann::json members = nlohmann::json::array();
    for (const auto& mem : e.members) members.push_back({{"id", mem.id}, {"score", mem.score}});
    return {{"explanandum_id", e.explanandum_id},
            {"predicted_label", e.predicted_label},
            {"members", members}};
}

inline explanation explanation_from_json(const nlohmann::json& j) {
    explanation e;
    e.explanandum_id = j.at("explanandum_id").get<example_id>();
    e.predicted_label = j.at("predicted_label").get<int>();
    for (const auto& mem : j.at("members"))
        e.members.push_back({mem.at("id").get<example_id>(), mem.at("score").get<double>()});
    return e;
}

inline void save_explanations(const std::vector<explanation>& explanations,
                              const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write explanations file: " + path.string());
    for (const auto& e : explanations) out << explanation_to_json(e).dump() << '\n';
}

inline std::vector<explanation> load_explanations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open explanations file: " + path.string());
    std::vector<explanation> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(explanation_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace exeval
