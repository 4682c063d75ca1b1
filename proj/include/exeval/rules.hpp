#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "exeval/common.hpp"
#include "exeval/dataset.hpp"
#include "exeval/errors.hpp"
#include "exeval/explainers.hpp"
#include "exeval/metrics.hpp"
#include "exeval/model.hpp"

namespace exeval {

/// w^T x >= b
struct halfspace_condition {
    vec w;
    double b = 0.0;
    bool operator()(const vec& x) const {
        if (x.size() != w.size())
            throw argument_error("halfspace rule: dimension mismatch");
        return dot(w, x) >= b;
    }
};

/// Conjunction of coordinate-interval tests lo <= x[coord] <= hi. Infinite
/// bounds make one-sided regions expressible.
struct box_condition {
    struct interval {
        std::size_t coord = 0;
        double lo = -std::numeric_limits<double>::infinity();
        double hi = std::numeric_limits<double>::infinity();
    };
    std::vector<interval> intervals;
    bool operator()(const vec& x) const {
        for (const auto& iv : intervals) {
            if (iv.coord >= x.size())
                throw argument_error("box rule: coordinate " + std::to_string(iv.coord) +
                                     " out of range");
            if (x[iv.coord] < iv.lo || x[iv.coord] > iv.hi) return false;
        }
        return true;
    }
};

/// A labeling rule: condition c(x) plus the label it forces. Among
/// condition-satisfying training examples a seeded minority share
/// (breaker_fraction) receives the opposite label instead.
struct rule {
    std::variant<halfspace_condition, box_condition> condition;
    int forced_label = 1;
    double breaker_fraction = 0.0;

    bool satisfies(const vec& x) const {
        return std::visit([&](const auto& c) { return c(x); }, condition);
    }

    void validate(std::size_t dim) const {
        if (forced_label != 0 && forced_label != 1)
            throw argument_error("rule: forced_label must be 0 or 1");
        if (!(breaker_fraction >= 0.0 && breaker_fraction <= 0.5))
            throw argument_error("rule: breaker_fraction must lie in [0, 0.5]");
        if (const auto* h = std::get_if<halfspace_condition>(&condition)) {
            if (h->w.size() != dim)
                throw argument_error("rule: halfspace weight dimension does not match dataset");
        } else {
            for (const auto& iv : std::get<box_condition>(condition).intervals)
                if (iv.coord >= dim)
                    throw argument_error("rule: box coordinate out of range");
        }
    }
};

struct rule_application {
    dataset data;
    std::vector<example_id> followers;
    std::vector<example_id> breakers;
    std::vector<example_id> untouched;
};

/// Relabels condition-satisfying examples: a seeded breaker_fraction share
/// gets the opposite of forced_label, the rest get forced_label. Features,
/// counts and IDs never change; the three ID sets partition the dataset.
inline rule_application apply_rule(const dataset& data, const rule& r, std::uint64_t seed) {
    r.validate(data.dim());
    std::vector<std::size_t> satisfying;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (r.satisfies(data[i].x)) satisfying.push_back(i);
    if (satisfying.empty())
        throw rule_error("apply_rule: no example satisfies the rule condition");
    if (satisfying.size() < 2)
        throw rule_error("apply_rule: need at least 2 condition-satisfying examples");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(satisfying);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_breakers = static_cast<std::size_t>(
        r.breaker_fraction * static_cast<double>(satisfying.size()));

    std::set<std::size_t> breaker_idx(order.begin(), order.begin() + n_breakers);
    std::vector<labeled_example> examples = data.examples();
    rule_application out;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (!std::binary_search(satisfying.begin(), satisfying.end(), i)) {
            out.untouched.push_back(examples[i].id);
            continue;
        }
        if (breaker_idx.count(i)) {
            examples[i].y = 1 - r.forced_label;
            out.breakers.push_back(examples[i].id);
        } else {
            examples[i].y = r.forced_label;
            out.followers.push_back(examples[i].id);
        }
    }
    out.data = dataset(std::move(examples), data.dim());
    return out;
}

/// Fresh examples sampled from the two-cluster generative model, rejected
/// until they satisfy the rule, labeled forced_label. Held out from training;
/// used to test whether the model learned the rule.
inline dataset generate_rule_test(std::size_t count, std::size_t dim, double separation,
                                  const rule& r, std::uint64_t seed) {
    if (count < 1) throw argument_error("generate_rule_test: count must be >= 1");
    r.validate(dim);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<int> coin(0, 1);
    std::vector<labeled_example> examples;
    std::size_t attempts = 0;
    const std::size_t max_attempts = 200000 * count;
    while (examples.size() < count) {
        if (++attempts > max_attempts)
            throw rule_error("generate_rule_test: rule region has negligible probability "
                             "under the data distribution");
        vec x(dim);
        for (auto& v : x) v = gauss(rng);
        if (coin(rng) == 1) x[0] += separation;
        if (!r.satisfies(x)) continue;
        labeled_example e;
        e.id = static_cast<example_id>(examples.size());
        e.x = std::move(x);
        e.y = r.forced_label;
        examples.push_back(std::move(e));
    }
    return dataset(std::move(examples), dim);
}

/// The three checks that the model actually learned an injected rule:
/// accuracy on held-out rule samples, log-likelihood shift of intervened vs
/// untouched points, and the share of points whose predicted label changed.
struct rule_verification {
    double accuracy_on_rule = 0.0;
    double ll_intervened_before = 0.0;
    double ll_intervened_after = 0.0;
    double ll_untouched_before = 0.0;
    double ll_untouched_after = 0.0;
    double ps_intervened = 0.0;  // percentage in [0, 100]
    double ps_untouched = 0.0;
};

namespace detail {

inline double mean_log_likelihood(const model_params& p, const dataset& data,
                                  const std::vector<example_id>& ids) {
    double total = 0.0;
    for (example_id id : ids) {
        const auto& e = data.by_id(id);
        const double prob = clamp_prob(predict_proba(p, e.x));
        total += e.y == 1 ? std::log(prob) : std::log(1.0 - prob);
    }
    return total / static_cast<double>(ids.size());
}

inline double percent_changed(const model_params& before, const model_params& after,
                              const dataset& data, const std::vector<example_id>& ids) {
    std::size_t changed = 0;
    for (example_id id : ids) {
        const auto& e = data.by_id(id);
        changed += (predict_label(before, e.x) != predict_label(after, e.x));
    }
    return 100.0 * static_cast<double>(changed) / static_cast<double>(ids.size());
}

}  // namespace detail

inline rule_verification verify_rule_learning(const model_params& model_before,
                                              const model_params& model_after,
                                              const dataset& data_after,
                                              const dataset& rule_test,
                                              const std::vector<example_id>& intervened,
                                              const std::vector<example_id>& untouched) {
    if (intervened.empty()) throw argument_error("verify_rule_learning: no intervened points");
    if (rule_test.empty()) throw argument_error("verify_rule_learning: empty rule test set");

    rule_verification v;
    v.accuracy_on_rule = training_accuracy(model_after, rule_test);
    v.ll_intervened_before = detail::mean_log_likelihood(model_before, data_after, intervened);
    v.ll_intervened_after = detail::mean_log_likelihood(model_after, data_after, intervened);
    if (!untouched.empty()) {
        v.ll_untouched_before = detail::mean_log_likelihood(model_before, data_after, untouched);
        v.ll_untouched_after = detail::mean_log_likelihood(model_after, data_after, untouched);
        v.ps_untouched = detail::percent_changed(model_before, model_after, data_after, untouched);
    }
    v.ps_intervened = detail::percent_changed(model_before, model_after, data_after, intervened);
    return v;
}

inline nlohmann::json rule_verification_to_json(const rule_verification& v) {
    return {{"accuracy_on_rule", v.accuracy_on_rule},
            {"ll_intervened_before", v.ll_intervened_before},
            {"ll_intervened_after", v.ll_intervened_after},
            {"ll_untouched_before", v.ll_untouched_before},
            {"ll_untouched_after", v.ll_untouched_after},
            {"ps_intervened", v.ps_intervened},
            {"ps_untouched", v.ps_untouched}};
}

/// CSV row mirroring the verification table layout.
inline std::string rule_verification_csv(const rule_verification& v) {
    auto f = [](double x) { return detail::format_double(x); };
    return "acc,ll_i_before,ll_i_after,ll_u_before,ll_u_after,ps_i,ps_u\n" +
           f(v.accuracy_on_rule) + ',' + f(v.ll_intervened_before) + ',' +
           f(v.ll_intervened_after) + ',' + f(v.ll_untouched_before) + ',' +
           f(v.ll_untouched_after) + ',' + f(v.ps_intervened) + ',' + f(v.ps_untouched) + '\n';
}

/// Mean over explanations of the share of members satisfying the rule
/// condition. Every explanandum must itself satisfy the condition.
inline double correctness(const std::vector<explanation>& explanations, const dataset& train,
                          const rule& r, const explananda_map& explananda) {
    if (explanations.empty()) throw argument_error("correctness: no explanations");
    double total = 0.0;
    for (const auto& e : explanations) {
        const vec& t = detail::resolve_explanandum(explananda, e.explanandum_id);
        if (!r.satisfies(t))
            throw argument_error("correctness: explanandum " +
                                 std::to_string(e.explanandum_id) +
                                 " does not satisfy the rule condition");
        if (e.members.empty()) throw argument_error("correctness: empty explanation");
        std::size_t hits = 0;
        for (const auto& mem : e.members) hits += r.satisfies(train.by_id(mem.id).x);
        total += static_cast<double>(hits) / static_cast<double>(e.members.size());
    }
    return total / static_cast<double>(explanations.size());
}

}  // namespace exeval
