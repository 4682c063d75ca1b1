#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exeval/common.hpp"
#include "exeval/dataset.hpp"
#include "exeval/errors.hpp"
#include "exeval/linalg.hpp"

namespace exeval {

/// Architecture descriptor: logistic regression, or one hidden tanh layer
/// with scalar output.
struct arch {
    enum class family { logreg, mlp };
    family kind = family::logreg;
    std::size_t dim = 0;
    std::size_t hidden = 0;  // mlp only

    static arch logreg(std::size_t dim) { return {family::logreg, dim, 0}; }
    static arch mlp(std::size_t dim, std::size_t hidden) {
        if (hidden < 1) throw argument_error("arch: mlp hidden width must be >= 1");
        return {family::mlp, dim, hidden};
    }

    std::size_t param_count() const {
        if (kind == family::logreg) return dim + 1;
        return hidden * (dim + 1) + (hidden + 1);
    }

    std::string name() const {
        if (kind == family::logreg) return "logreg(" + std::to_string(dim) + ")";
        return "mlp(" + std::to_string(dim) + "," + std::to_string(hidden) + ")";
    }

    bool operator==(const arch&) const = default;
};

/// Flat parameter vector plus its architecture. For logreg the layout is
/// [w(0..d-1), b]; for the mlp it is [W1 row-major (h x d), b1(h), w2(h), b2].
struct model_params {
    arch a;
    vec theta;

    model_params() = default;
    model_params(arch a_, vec theta_) : a(a_), theta(std::move(theta_)) {
        if (theta.size() != a.param_count())
            throw argument_error("model_params: theta length " + std::to_string(theta.size()) +
                                 " does not match " + a.name());
        if (!all_finite(theta)) throw argument_error("model_params: non-finite parameters");
    }

    static model_params zeros(arch a_) { return {a_, vec(a_.param_count(), 0.0)}; }
};

namespace detail {

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

constexpr double prob_clamp = 1e-12;

inline double clamp_prob(double p) {
    return std::min(1.0 - prob_clamp, std::max(prob_clamp, p));
}

inline void check_dim(const arch& a, const vec& x) {
    if (x.size() != a.dim)
        throw argument_error("model: feature dimension " + std::to_string(x.size()) +
                             " does not match " + a.name());
}

// forward pass for the mlp, exposing hidden activations for backprop
struct mlp_forward {
    vec h;  // tanh activations
    double logit = 0.0;
};

inline mlp_forward mlp_eval(const model_params& p, const vec& x) {
    const std::size_t d = p.a.dim, nh = p.a.hidden;
    const double* w1 = p.theta.data();            // h x d
    const double* b1 = w1 + nh * d;                // h
    const double* w2 = b1 + nh;                    // h
    const double b2 = *(w2 + nh);
    mlp_forward f;
    f.h.resize(nh);
    double logit = b2;
    for (std::size_t j = 0; j < nh; ++j) {
        double z = b1[j];
        const double* row = w1 + j * d;
        for (std::size_t i = 0; i < d; ++i) z += row[i] * x[i];
        f.h[j] = std::tanh(z);
        logit += w2[j] * f.h[j];
    }
    f.logit = logit;
    return f;
}

}  // namespace detail

inline double predict_logit(const model_params& p, const vec& x) {
    detail::check_dim(p.a, x);
    if (p.a.kind == arch::family::logreg) {
        double z = p.theta[p.a.dim];
        for (std::size_t i = 0; i < p.a.dim; ++i) z += p.theta[i] * x[i];
        return z;
    }
    return detail::mlp_eval(p, x).logit;
}

inline double predict_proba(const model_params& p, const vec& x) {
    return detail::sigmoid(predict_logit(p, x));
}

inline int predict_label(const model_params& p, const vec& x) {
    return predict_proba(p, x) >= 0.5 ? 1 : 0;
}

/// Binary cross-entropy with probabilities clamped away from {0,1}, plus
/// (l2/2)*||theta||^2 over the full parameter vector.
inline double loss(const model_params& p, const vec& x, int y, double l2_reg) {
    const double prob = detail::clamp_prob(predict_proba(p, x));
    const double ce = y == 1 ? -std::log(prob) : -std::log(1.0 - prob);
    return ce + 0.5 * l2_reg * dot(p.theta, p.theta);
}

inline double loss(const model_params& p, const labeled_example& e, double l2_reg) {
    return loss(p, e.x, e.y, l2_reg);
}

namespace detail {

// accumulates the data term of the per-example gradient: coeff * dlogit/dtheta
// where coeff = p - y
inline void accumulate_grad(const model_params& p, const vec& x, double coeff, vec& g) {
    const std::size_t d = p.a.dim;
    if (p.a.kind == arch::family::logreg) {
        for (std::size_t i = 0; i < d; ++i) g[i] += coeff * x[i];
        g[d] += coeff;
        return;
    }
    const std::size_t nh = p.a.hidden;
    const auto f = mlp_eval(p, x);
    const double* w2 = p.theta.data() + nh * d + nh;
    double* g_w1 = g.data();
    double* g_b1 = g_w1 + nh * d;
    double* g_w2 = g_b1 + nh;
    double* g_b2 = g_w2 + nh;
    for (std::size_t j = 0; j < nh; ++j) {
        const double dh = coeff * w2[j] * (1.0 - f.h[j] * f.h[j]);
        double* row = g_w1 + j * d;
        for (std::size_t i = 0; i < d; ++i) row[i] += dh * x[i];
        g_b1[j] += dh;
        g_w2[j] += coeff * f.h[j];
    }
    *g_b2 += coeff;
}

}  // namespace detail

/// Exact analytic gradient of loss() with respect to theta.
inline vec grad_loss(const model_params& p, const vec& x, int y, double l2_reg) {
    detail::check_dim(p.a, x);
    vec g(p.theta.size(), 0.0);
    const double prob = predict_proba(p, x);
    detail::accumulate_grad(p, x, prob - static_cast<double>(y), g);
    if (l2_reg != 0.0) axpy(l2_reg, p.theta, g);
    return g;
}

inline vec grad_loss(const model_params& p, const labeled_example& e, double l2_reg) {
    return grad_loss(p, e.x, e.y, l2_reg);
}

inline double mean_loss(const model_params& p, const dataset& data, double l2_reg) {
    double s = 0.0;
    for (const auto& e : data.examples()) s += loss(p, e, l2_reg);
    return s / static_cast<double>(data.size());
}

inline vec mean_grad(const model_params& p, const dataset& data, double l2_reg) {
    vec g(p.theta.size(), 0.0);
    for (const auto& e : data.examples()) {
        const double prob = predict_proba(p, e.x);
        detail::accumulate_grad(p, e.x, prob - static_cast<double>(e.y), g);
    }
    scale(g, 1.0 / static_cast<double>(data.size()));
    if (l2_reg != 0.0) axpy(l2_reg, p.theta, g);
    return g;
}

inline double training_accuracy(const model_params& p, const dataset& data) {
    std::size_t correct = 0;
    for (const auto& e : data.examples()) correct += (predict_label(p, e.x) == e.y);
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// (H + damping*I) v, where H is the Hessian of the mean training loss
/// (including the l2 term). Logreg uses the exact closed form
/// H = (1/n) sum p_i(1-p_i) z_i z_i^T + l2*I with z_i = (x_i, 1); the mlp
/// uses a central difference of analytic gradients.
inline vec hvp(const model_params& p, const dataset& train, const vec& v, double l2_reg,
               double damping) {
    if (v.size() != p.theta.size())
        throw argument_error("hvp: vector length does not match parameter count");
    if (damping < 0.0) throw argument_error("hvp: damping must be >= 0");

    const std::size_t n = train.size();
    vec out(v.size(), 0.0);
    if (p.a.kind == arch::family::logreg) {
        const std::size_t d = p.a.dim;
        for (const auto& e : train.examples()) {
            const double prob = predict_proba(p, e.x);
            const double w = prob * (1.0 - prob);
            double zv = v[d];
            for (std::size_t i = 0; i < d; ++i) zv += e.x[i] * v[i];
            const double c = w * zv;
            for (std::size_t i = 0; i < d; ++i) out[i] += c * e.x[i];
            out[d] += c;
        }
        scale(out, 1.0 / static_cast<double>(n));
    } else {
        const double eps = 1e-4 * (1.0 + norm(p.theta)) / (norm(v) + 1e-12);
        model_params plus = p, minus = p;
        axpy(eps, v, plus.theta);
        axpy(-eps, v, minus.theta);
        const vec g_plus = mean_grad(plus, train, 0.0);
        const vec g_minus = mean_grad(minus, train, 0.0);
        for (std::size_t i = 0; i < v.size(); ++i)
            out[i] = (g_plus[i] - g_minus[i]) / (2.0 * eps);
    }
    axpy(l2_reg + damping, v, out);
    return out;
}

/// Solves (H + damping*I) s = v by conjugate gradient on the hvp operator.
inline vec inverse_hvp(const model_params& p, const dataset& train, const vec& v,
                       double l2_reg, double damping, double tol, std::size_t max_iter) {
    if (!(damping > 0.0)) throw argument_error("inverse_hvp: damping must be positive");
    if (!(tol > 0.0)) throw argument_error("inverse_hvp: tol must be positive");
    vec s;
    const auto res = conjugate_gradient(
        [&](const vec& w) { return hvp(p, train, w, l2_reg, damping); }, v, s, tol, max_iter);
    if (!res.converged)
        throw convergence_error("inverse_hvp: CG did not converge in " +
                                    std::to_string(max_iter) + " iterations (relative residual " +
                                    std::to_string(res.relative_residual) + ")",
                                res.relative_residual);
    return s;
}

struct checkpoint {
    long step = 0;
    double learning_rate = 0.0;
    vec theta;
};

struct train_config {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double learning_rate = 0.1;
    double l2_reg = 1e-3;
    std::size_t checkpoint_every = 0;  // in steps; 0 = once per epoch
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw argument_error("train_config: epochs must be >= 1");
        if (batch_size < 1) throw argument_error("train_config: batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw argument_error("train_config: learning_rate must be positive and finite");
        if (!(l2_reg >= 0.0) || !std::isfinite(l2_reg))
            throw argument_error("train_config: l2_reg must be >= 0 and finite");
    }
};

struct train_result {
    model_params params;
    std::vector<checkpoint> checkpoints;
    vec epoch_loss;  // mean training loss after each epoch
};

/// Mini-batch SGD with a fixed learning rate and a seeded shuffle order per
/// epoch. Logreg initializes at zero, the mlp from a seeded Gaussian
/// (sigma = 0.01). Checkpoints are recorded every checkpoint_every steps and
/// always at the final step.
inline train_result train(const arch& a, const dataset& data, const train_config& cfg) {
    cfg.validate();
    if (data.empty()) throw argument_error("train: empty dataset");
    if (!data.has_both_classes()) throw argument_error("train: both classes must be present");
    detail::check_dim(a, data[0].x);

    std::mt19937_64 rng(cfg.seed);
    model_params p = model_params::zeros(a);
    if (a.kind == arch::family::mlp) {
        std::normal_distribution<double> init(0.0, 0.01);
        for (auto& t : p.theta) t = init(rng);
    }

    const std::size_t n = data.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t every =
        cfg.checkpoint_every > 0 ? cfg.checkpoint_every : steps_per_epoch;
    const long total_steps = static_cast<long>(steps_per_epoch * cfg.epochs);

    train_result result;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    vec g(p.theta.size());

    long step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(start + cfg.batch_size, n);
            std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t k = start; k < end; ++k) {
                const auto& e = data[order[k]];
                const double prob = predict_proba(p, e.x);
                detail::accumulate_grad(p, e.x, prob - static_cast<double>(e.y), g);
            }
            scale(g, 1.0 / static_cast<double>(end - start));
            if (cfg.l2_reg != 0.0) axpy(cfg.l2_reg, p.theta, g);
            axpy(-cfg.learning_rate, g, p.theta);
            ++step;
            if (!all_finite(p.theta))
                throw training_error("train: non-finite parameters at step " +
                                         std::to_string(step),
                                     step);
            if (step % static_cast<long>(every) == 0 && step != total_steps)
                result.checkpoints.push_back({step, cfg.learning_rate, p.theta});
        }
        const double ml = mean_loss(p, data, cfg.l2_reg);
        if (!std::isfinite(ml))
            throw training_error("train: non-finite loss after step " + std::to_string(step),
                                 step);
        result.epoch_loss.push_back(ml);
    }
    result.checkpoints.push_back({total_steps, cfg.learning_rate, p.theta});
    result.params = std::move(p);
    return result;
}

/// Deterministic full-batch gradient descent for logreg, run to gradient-norm
/// tolerance. Used where SGD noise would pollute a ground truth (leave-one-out
/// retraining). The step size comes from the logistic curvature bound
/// L = l2 + (1/4n) sum ||z_i||^2.
inline model_params fit_logreg_full_batch(const dataset& data, double l2_reg,
                                          double grad_tol = 1e-8,
                                          std::size_t max_iter = 2000000,
                                          const model_params* warm_start = nullptr) {
    if (data.empty()) throw argument_error("fit_logreg_full_batch: empty dataset");
    const arch a = arch::logreg(data.dim());
    model_params p = warm_start != nullptr ? *warm_start : model_params::zeros(a);
    if (p.a != a) throw argument_error("fit_logreg_full_batch: warm start has wrong arch");

    double lipschitz = l2_reg;
    for (const auto& e : data.examples())
        lipschitz += 0.25 * (dot(e.x, e.x) + 1.0) / static_cast<double>(data.size());
    const double step = 1.0 / lipschitz;

    for (std::size_t it = 0; it < max_iter; ++it) {
        vec g = mean_grad(p, data, l2_reg);
        if (norm(g) <= grad_tol) return p;
        axpy(-step, g, p.theta);
        if (!all_finite(p.theta))
            throw training_error("fit_logreg_full_batch: non-finite parameters at iteration " +
                                     std::to_string(it),
                                 static_cast<long>(it));
    }
    throw training_error("fit_logreg_full_batch: gradient norm did not reach tolerance",
                         static_cast<long>(max_iter));
}

/// Checkpoint directory layout: one checkpoint_NNNNNN.json per step with
/// {step, learning_rate, theta}.
inline void save_checkpoints(const std::vector<checkpoint>& ckpts,
                             const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& c : ckpts) {
        nlohmann::json j;
        j["step"] = c.step;
        j["learning_rate"] = c.learning_rate;
        j["theta"] = c.theta;
        std::ostringstream name;
        name << "checkpoint_" << std::setw(6) << std::setfill('0') << c.step << ".json";
        std::ofstream out(dir / name.str());
        if (!out) throw io_error("cannot write checkpoint file in " + dir.string());
        out << j.dump(2) << '\n';
    }
}

inline std::vector<checkpoint> load_checkpoints(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw io_error("checkpoint directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.path().extension() == ".json" &&
            entry.path().filename().string().starts_with("checkpoint_"))
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::vector<checkpoint> ckpts;
    for (const auto& f : files) {
        std::ifstream in(f);
        nlohmann::json j;
        try {
            in >> j;
            checkpoint c;
            c.step = j.at("step").get<long>();
            c.learning_rate = j.at("learning_rate").get<double>();
            c.theta = j.at("theta").get<vec>();
            ckpts.push_back(std::move(c));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error("bad checkpoint file " + f.string() + ": " + e.what());
        }
    }
    if (ckpts.empty()) throw io_error("no checkpoints found in " + dir.string());
    std::sort(ckpts.begin(), ckpts.end(),
              [](const checkpoint& a, const checkpoint& b) { return a.step < b.step; });
    return ckpts;
}

}  // namespace exeval
