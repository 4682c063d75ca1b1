#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "exeval/common.hpp"
#include "exeval/dataset.hpp"
#include "exeval/errors.hpp"
#include "exeval/explainers.hpp"
#include "exeval/model.hpp"

namespace exeval {

/// Clamped cosine similarity: max(0, cos(a, b)). The clamp keeps the value
/// in [0,1] while preserving "orthogonal = irrelevant = 0". Zero vectors
/// have similarity 0 to everything.
inline double similarity(const vec& a, const vec& b) {
    if (a.size() != b.size())
        throw argument_error("similarity: dimension mismatch (" + std::to_string(a.size()) +
                             " vs " + std::to_string(b.size()) + ")");
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::max(0.0, dot(a, b) / (na * nb));
}

using explananda_map = std::map<example_id, vec>;

namespace detail {

inline const vec& resolve_explanandum(const explananda_map& xs, example_id id) {
    auto it = xs.find(id);
    if (it == xs.end())
        throw reference_error("metrics: unknown explanandum id " + std::to_string(id));
    return it->second;
}

}  // namespace detail

/// Mean over explanations of the average similarity between the explanandum
/// and its members.
inline double relevance(const std::vector<explanation>& explanations, const dataset& train,
                        const explananda_map& explananda) {
    if (explanations.empty()) throw argument_error("relevance: no explanations");
    double total = 0.0;
    for (const auto& e : explanations) {
        const vec& t = detail::resolve_explanandum(explananda, e.explanandum_id);
        if (e.members.empty()) throw argument_error("relevance: empty explanation");
        double s = 0.0;
        for (const auto& mem : e.members) s += similarity(t, train.by_id(mem.id).x);
        total += s / static_cast<double>(e.members.size());
    }
    return total / static_cast<double>(explanations.size());
}

/// For each training example, the fraction of explanations containing it.
/// Every training ID is present in the map; absent examples map to 0.
inline std::map<example_id, double> popularity(const std::vector<explanation>& explanations,
                                               const dataset& train) {
    if (explanations.empty()) throw argument_error("popularity: no explanations");
    std::map<example_id, double> pop;
    for (const auto& e : train.examples()) pop[e.id] = 0.0;
    for (const auto& e : explanations) {
        for (const auto& mem : e.members) {
            auto it = pop.find(mem.id);
            if (it == pop.end())
                throw reference_error("popularity: member id " + std::to_string(mem.id) +
                                      " not in training set");
            it->second += 1.0;
        }
    }
    const double denom = static_cast<double>(explanations.size());
    for (auto& [id, count] : pop) count /= denom;
    return pop;
}

struct active_domain_result {
    std::size_t count = 0;
    double normalized = 0.0;
};

/// Number of distinct training examples appearing in any explanation of the
/// evaluation set, and the same normalized by |train|.
inline active_domain_result active_domain(const std::vector<explanation>& explanations,
                                          const dataset& train) {
    if (explanations.empty()) throw argument_error("active_domain: no explanations");
    std::set<example_id> used;
    for (const auto& e : explanations)
        for (const auto& mem : e.members) {
            if (!train.contains(mem.id))
                throw reference_error("active_domain: member id " + std::to_string(mem.id) +
                                      " not in training set");
            used.insert(mem.id);
        }
    return {used.size(), static_cast<double>(used.size()) / static_cast<double>(train.size())};
}

struct overlap_result {
    double value = 0.0;
    bool sampled = false;
};

constexpr std::size_t overlap_exact_pair_limit = 1000000;

inline double jaccard(const std::vector<example_id>& a, const std::vector<example_id>& b) {
    // inputs sorted ascending
    std::size_t i = 0, j = 0, inter = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] == b[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a[i] < b[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean Jaccard similarity of member-ID sets over unordered pairs of
/// explanations; exact when the pair count is at most 10^6, otherwise a
/// seeded uniform sample of 10^6 pairs (flagged in the result).
inline overlap_result overlap(const std::vector<explanation>& explanations,
                              std::uint64_t sample_seed = 0) {
    const std::size_t t = explanations.size();
    if (t < 2) throw argument_error("overlap: need at least 2 explanations");

    std::vector<std::vector<example_id>> sets(t);
    for (std::size_t i = 0; i < t; ++i) {
        sets[i].reserve(explanations[i].members.size());
        for (const auto& mem : explanations[i].members) sets[i].push_back(mem.id);
        std::sort(sets[i].begin(), sets[i].end());
    }

    const std::size_t pairs = t * (t - 1) / 2;
    double total = 0.0;
    if (pairs <= overlap_exact_pair_limit) {
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = i + 1; j < t; ++j) total += jaccard(sets[i], sets[j]);
        return {total / static_cast<double>(pairs), false};
    }
    std::mt19937_64 rng(sample_seed);
    std::uniform_int_distribution<std::size_t> pick(0, t - 1);
    for (std::size_t k = 0; k < overlap_exact_pair_limit; ++k) {
        std::size_t i = pick(rng), j = pick(rng);
        while (j == i) j = pick(rng);
        total += jaccard(sets[i], sets[j]);
    }
    return {total / static_cast<double>(overlap_exact_pair_limit), true};
}

struct popularity_loss_point {
    example_id id = 0;
    double popularity = 0.0;
    double loss = 0.0;  // per-example data loss, l2 term excluded
};

/// Joins example popularity with per-example training loss under the given
/// parameters, sorted by ID. Feeds the popularity-vs-loss plot export.
inline std::vector<popularity_loss_point> popularity_vs_loss(
    const std::map<example_id, double>& pop, const model_params& params,
    const dataset& train) {
    std::vector<popularity_loss_point> out;
    out.reserve(train.size());
    for (const auto& e : train.examples()) {
        auto it = pop.find(e.id);
        const double p = it == pop.end() ? 0.0 : it->second;
        out.push_back({e.id, p, loss(params, e, 0.0)});
    }
    std::sort(out.begin(), out.end(),
              [](const popularity_loss_point& a, const popularity_loss_point& b) {
                  return a.id < b.id;
              });
    return out;
}

/// All metric values for one explainer/N combination.
struct metric_report {
    std::string method;
    std::size_t n = 0;  // requested explanation size
    std::size_t n_explananda = 0;
    double relevance = 0.0;
    active_domain_result domain;
    overlap_result over;
    std::optional<double> correctness;
    std::map<example_id, double> pop;
    std::vector<popularity_loss_point> pop_loss;
    std::vector<std::string> warnings;
};

inline nlohmann::json metrics_to_json(const metric_report& r) {
    nlohmann::json pop = nlohmann::json::array();
    for (const auto& [id, p] : r.pop) pop.push_back({{"id", id}, {"pop", p}});
    nlohmann::json pl = nlohmann::json::array();
    for (const auto& p : r.pop_loss)
        pl.push_back({{"id", p.id}, {"pop", p.popularity}, {"loss", p.loss}});
    nlohmann::json j{
        {"N", r.n},
        {"n_explananda", r.n_explananda},
        {"relevance", r.relevance},
        {"active_domain", {{"count", r.domain.count}, {"normalized", r.domain.normalized}}},
        {"overlap", {{"value", r.over.value}, {"sampled", r.over.sampled}}},
        {"popularity", pop},
        {"popularity_vs_loss", pl},
    };
    if (r.correctness)
        j["correctness"] = *r.correctness;
    else
        j["correctness"] = nullptr;
    return j;
}

/// Spearman rank correlation with average ranks for ties. Used by the study
/// pipeline for the popularity-vs-loss association.
inline double spearman(const vec& a, const vec& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw argument_error("spearman: need two equal-length sequences of size >= 2");
    auto ranks = [](const vec& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(),
                  [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        vec r(v.size());
        std::size_t i = 0;
        while (i < idx.size()) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const vec ra = ranks(a);
    const vec rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace exeval
