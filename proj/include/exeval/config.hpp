#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "exeval/dataset.hpp"
#include "exeval/errors.hpp"
#include "exeval/explainers.hpp"
#include "exeval/model.hpp"
#include "exeval/rules.hpp"

namespace exeval {

struct generator_config {
    std::size_t n_per_class = 100;
    std::size_t dim = 8;
    double separation = 6.0;
};

struct file_config {
    std::string path;
    std::optional<dataset_format> format;  // inferred from extension when absent
    bool header = false;
};

struct dataset_section {
    std::optional<generator_config> generator;
    std::optional<file_config> file;
    std::optional<outlier_spec> outliers;
    double test_fraction = 0.25;
};

struct model_section {
    arch::family family = arch::family::logreg;
    std::size_t hidden = 16;  // mlp only
    train_config train;
};

struct explainer_section {
    std::string method;  // IF | RIF | TraceIn | DataModels
    if_config influence;
    tracein_config tracein;
    std::string checkpoint_dir;  // TraceIn: reuse checkpoints from an earlier run
    datamodels_config datamodels;
};

struct evaluation_section {
    std::vector<std::size_t> n_values{2, 5, 10};
    bool relevance = true;
    bool active_domain = true;
    bool overlap = true;
    bool correctness = true;
    std::optional<rule> labeling_rule;
    std::size_t rule_test_size = 50;
};

struct output_section {
    std::string dir = "out";
    bool save_checkpoints = false;
    std::size_t top_k = 2;
};

struct run_config {
    std::uint64_t seed = 0;
    dataset_section dataset;
    model_section model;
    std::vector<explainer_section> explainers;
    evaluation_section evaluation;
    output_section output;

    nlohmann::json effective;  // fully defaulted config, as materialized
};

namespace detail {

struct config_reader {
    std::vector<std::string> problems;

    void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
        if (!obj.is_object()) {
            problems.push_back(where + ": expected an object");
            return;
        }
        for (const auto& [key, _] : obj.items())
            if (!allowed.count(key)) problems.push_back(where + ": unknown key '" + key + "'");
    }

    template <class T>
    std::optional<T> get(const nlohmann::json& obj, const std::string& key,
                         const std::string& where) {
        if (!obj.is_object() || !obj.contains(key)) return std::nullopt;
        try {
            return obj.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            problems.push_back(where + "." + key + ": wrong type");
            return std::nullopt;
        }
    }

    void require(bool ok, const std::string& message) {
        if (!ok) problems.push_back(message);
    }
};

inline rule parse_rule(const nlohmann::json& j, config_reader& r) {
    rule out;
    r.check_keys(j, {"type", "w", "b", "intervals", "forced_label", "breaker_fraction"},
                 "evaluation.rule");
    const auto type = r.get<std::string>(j, "type", "evaluation.rule").value_or("");
    if (type == "halfspace") {
        halfspace_condition h;
        if (auto w = r.get<vec>(j, "w", "evaluation.rule")) h.w = *w;
        h.b = r.get<double>(j, "b", "evaluation.rule").value_or(0.0);
        r.require(!h.w.empty(), "evaluation.rule: halfspace requires a weight vector 'w'");
        out.condition = std::move(h);
    } else if (type == "box") {
        box_condition b;
        if (j.contains("intervals") && j["intervals"].is_array()) {
            for (const auto& iv : j["intervals"]) {
                r.check_keys(iv, {"coord", "lo", "hi"}, "evaluation.rule.intervals[]");
                box_condition::interval out_iv;
                out_iv.coord = r.get<std::size_t>(iv, "coord", "evaluation.rule.intervals[]")
                                   .value_or(0);
                if (auto lo = r.get<double>(iv, "lo", "evaluation.rule.intervals[]"))
                    out_iv.lo = *lo;
                if (auto hi = r.get<double>(iv, "hi", "evaluation.rule.intervals[]"))
                    out_iv.hi = *hi;
                b.intervals.push_back(out_iv);
            }
        }
        r.require(!b.intervals.empty(), "evaluation.rule: box requires at least one interval");
        out.condition = std::move(b);
    } else {
        r.problems.push_back("evaluation.rule.type: expected 'halfspace' or 'box', got '" +
                             type + "'");
    }
    out.forced_label = r.get<int>(j, "forced_label", "evaluation.rule").value_or(1);
    out.breaker_fraction =
        r.get<double>(j, "breaker_fraction", "evaluation.rule").value_or(0.0);
    r.require(out.forced_label == 0 || out.forced_label == 1,
              "evaluation.rule.forced_label: must be 0 or 1");
    r.require(out.breaker_fraction >= 0.0 && out.breaker_fraction <= 0.5,
              "evaluation.rule.breaker_fraction: must lie in [0, 0.5]");
    return out;
}

}  // namespace detail

/// Parses and validates a run config, collecting every problem in one pass.
/// The returned config carries the fully materialized effective JSON
/// (defaults the paper leaves open are pinned here and recorded).
inline run_config parse_run_config(const nlohmann::json& j,
                                   const std::filesystem::path& base_dir = ".") {
    detail::config_reader r;
    run_config cfg;

    r.check_keys(j, {"seed", "dataset", "model", "explainers", "evaluation", "output"},
                 "config");
    cfg.seed = r.get<std::uint64_t>(j, "seed", "config").value_or(0);

    // dataset section
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        r.check_keys(d, {"generator", "file", "outliers", "split"}, "dataset");
        if (d.contains("generator")) {
            const auto& g = d["generator"];
            r.check_keys(g, {"type", "n_per_class", "dim", "separation"}, "dataset.generator");
            generator_config gc;
            const auto type =
                r.get<std::string>(g, "type", "dataset.generator").value_or("two_cluster");
            r.require(type == "two_cluster",
                      "dataset.generator.type: only 'two_cluster' is supported");
            gc.n_per_class =
                r.get<std::size_t>(g, "n_per_class", "dataset.generator").value_or(100);
            gc.dim = r.get<std::size_t>(g, "dim", "dataset.generator").value_or(8);
            gc.separation =
                r.get<double>(g, "separation", "dataset.generator").value_or(6.0);
            r.require(gc.n_per_class >= 1, "dataset.generator.n_per_class: must be >= 1");
            r.require(gc.dim >= 1, "dataset.generator.dim: must be >= 1");
            r.require(gc.separation > 0.0, "dataset.generator.separation: must be positive");
            cfg.dataset.generator = gc;
        }
        if (d.contains("file")) {
            const auto& f = d["file"];
            r.check_keys(f, {"path", "format", "header"}, "dataset.file");
            file_config fc;
            fc.path = r.get<std::string>(f, "path", "dataset.file").value_or("");
            if (auto fmt = r.get<std::string>(f, "format", "dataset.file")) {
                if (*fmt == "csv")
                    fc.format = dataset_format::csv;
                else if (*fmt == "jsonl")
                    fc.format = dataset_format::jsonl;
                else
                    r.problems.push_back("dataset.file.format: expected 'csv' or 'jsonl'");
            }
            fc.header = r.get<bool>(f, "header", "dataset.file").value_or(false);
            if (fc.path.empty()) {
                r.problems.push_back("dataset.file.path: required");
            } else {
                const auto resolved = std::filesystem::path(fc.path).is_absolute()
                                          ? std::filesystem::path(fc.path)
                                          : base_dir / fc.path;
                if (!std::filesystem::exists(resolved))
                    r.problems.push_back("dataset.file.path: no such file: " + fc.path);
                fc.path = resolved.string();
            }
            cfg.dataset.file = fc;
        }
        r.require(cfg.dataset.generator.has_value() != cfg.dataset.file.has_value(),
                  "dataset: exactly one of 'generator' or 'file' is required");
        if (d.contains("outliers")) {
            const auto& o = d["outliers"];
            r.check_keys(o, {"fraction", "mode", "blend_weight"}, "dataset.outliers");
            outlier_spec spec;
            spec.fraction = r.get<double>(o, "fraction", "dataset.outliers").value_or(0.0);
            const auto mode =
                r.get<std::string>(o, "mode", "dataset.outliers").value_or("label-flip");
            if (mode == "label-flip")
                spec.mode = outlier_mode::label_flip;
            else if (mode == "boundary-blend")
                spec.mode = outlier_mode::boundary_blend;
            else
                r.problems.push_back(
                    "dataset.outliers.mode: expected 'label-flip' or 'boundary-blend'");
            spec.blend_weight =
                r.get<double>(o, "blend_weight", "dataset.outliers").value_or(0.5);
            r.require(spec.fraction >= 0.0 && spec.fraction <= 0.5,
                      "dataset.outliers.fraction: must lie in [0, 0.5]");
            r.require(spec.blend_weight >= 0.0 && spec.blend_weight <= 1.0,
                      "dataset.outliers.blend_weight: must lie in [0, 1]");
            cfg.dataset.outliers = spec;
        }
        if (d.contains("split")) {
            r.check_keys(d["split"], {"test_fraction"}, "dataset.split");
            cfg.dataset.test_fraction =
                r.get<double>(d["split"], "test_fraction", "dataset.split").value_or(0.25);
        }
        r.require(cfg.dataset.test_fraction > 0.0 && cfg.dataset.test_fraction < 1.0,
                  "dataset.split.test_fraction: must lie in (0, 1)");
    } else {
        r.problems.push_back("dataset: section is required");
    }

    // model section
    bool is_mlp = false;
    if (j.contains("model")) {
        const auto& m = j["model"];
        r.check_keys(m, {"arch", "train"}, "model");
        if (m.contains("arch")) {
            const auto& a = m["arch"];
            r.check_keys(a, {"type", "hidden"}, "model.arch");
            const auto type = r.get<std::string>(a, "type", "model.arch").value_or("logreg");
            if (type == "logreg") {
                cfg.model.family = arch::family::logreg;
            } else if (type == "mlp") {
                cfg.model.family = arch::family::mlp;
                is_mlp = true;
                cfg.model.hidden = r.get<std::size_t>(a, "hidden", "model.arch").value_or(16);
                r.require(cfg.model.hidden >= 1, "model.arch.hidden: must be >= 1");
            } else {
                r.problems.push_back("model.arch.type: expected 'logreg' or 'mlp'");
            }
        }
        if (m.contains("train")) {
            const auto& t = m["train"];
            r.check_keys(t,
                         {"epochs", "batch_size", "learning_rate", "l2_reg",
                          "checkpoint_every"},
                         "model.train");
            cfg.model.train.epochs =
                r.get<std::size_t>(t, "epochs", "model.train").value_or(30);
            cfg.model.train.batch_size =
                r.get<std::size_t>(t, "batch_size", "model.train").value_or(32);
            cfg.model.train.learning_rate =
                r.get<double>(t, "learning_rate", "model.train").value_or(0.1);
            cfg.model.train.l2_reg = r.get<double>(t, "l2_reg", "model.train").value_or(1e-3);
            cfg.model.train.checkpoint_every =
                r.get<std::size_t>(t, "checkpoint_every", "model.train").value_or(0);
            r.require(cfg.model.train.epochs >= 1, "model.train.epochs: must be >= 1");
            r.require(cfg.model.train.batch_size >= 1,
                      "model.train.batch_size: must be >= 1");
            r.require(cfg.model.train.learning_rate > 0.0,
                      "model.train.learning_rate: must be positive");
            r.require(cfg.model.train.l2_reg >= 0.0, "model.train.l2_reg: must be >= 0");
        }
    }
    cfg.model.train.seed = derive_seed(cfg.seed, "train");

    // explainers section
    if (j.contains("explainers") && j["explainers"].is_array()) {
        for (const auto& e : j["explainers"]) {
            explainer_section es;
            const std::string where = "explainers[" + std::to_string(cfg.explainers.size()) + "]";
            es.method = r.get<std::string>(e, "method", where).value_or("");
            if (es.method == "IF" || es.method == "RIF") {
                r.check_keys(e, {"method", "damping", "cg_tol", "max_iter"}, where);
                es.influence.damping = r.get<double>(e, "damping", where).value_or(0.01);
                es.influence.cg_tol = r.get<double>(e, "cg_tol", where).value_or(1e-8);
                es.influence.max_iter =
                    r.get<std::size_t>(e, "max_iter", where).value_or(1000);
                r.require(es.influence.damping > 0.0, where + ".damping: must be positive");
                r.require(es.influence.cg_tol > 0.0, where + ".cg_tol: must be positive");
                if (is_mlp)
                    r.require(es.influence.cg_tol >= 1e-6,
                              where + ".cg_tol: must be >= 1e-6 for mlp models (the HVP is a "
                                      "finite difference of gradients)");
            } else if (es.method == "TraceIn") {
                r.check_keys(e, {"method", "checkpoint_steps", "checkpoint_dir"}, where);
                if (auto steps = r.get<std::vector<long>>(e, "checkpoint_steps", where))
                    es.tracein.steps = *steps;
                es.checkpoint_dir = r.get<std::string>(e, "checkpoint_dir", where).value_or("");
            } else if (es.method == "DataModels") {
                r.check_keys(e, {"method", "num_subsets", "subset_fraction", "ridge_penalty"},
                             where);
                es.datamodels.num_subsets =
                    r.get<std::size_t>(e, "num_subsets", where).value_or(0);
                es.datamodels.subset_fraction =
                    r.get<double>(e, "subset_fraction", where).value_or(0.5);
                es.datamodels.ridge_penalty =
                    r.get<double>(e, "ridge_penalty", where).value_or(0.0);
                r.require(es.datamodels.subset_fraction > 0.0 &&
                              es.datamodels.subset_fraction < 1.0,
                          where + ".subset_fraction: must lie in (0, 1)");
                r.require(es.datamodels.num_subsets == 0 || es.datamodels.num_subsets >= 10,
                          where + ".num_subsets: must be >= 10 (or 0 for the 5*n default)");
                es.datamodels.base_seed = derive_seed(cfg.seed, "datamodels");
            } else {
                r.problems.push_back(where + ".method: expected IF, RIF, TraceIn or DataModels");
            }
            cfg.explainers.push_back(std::move(es));
        }
    }
    r.require(!cfg.explainers.empty(), "explainers: at least one explainer is required");

    // evaluation section
    if (j.contains("evaluation")) {
        const auto& ev = j["evaluation"];
        r.check_keys(ev, {"n_values", "metrics", "rule", "rule_test_size"}, "evaluation");
        if (auto ns = r.get<std::vector<long>>(ev, "n_values", "evaluation")) {
            cfg.evaluation.n_values.clear();
            for (long n : *ns) {
                r.require(n >= 1, "evaluation.n_values: every N must be >= 1");
                if (n >= 1) cfg.evaluation.n_values.push_back(static_cast<std::size_t>(n));
            }
        }
        if (ev.contains("metrics")) {
            const auto& mt = ev["metrics"];
            r.check_keys(mt, {"relevance", "active_domain", "overlap", "correctness"},
                         "evaluation.metrics");
            cfg.evaluation.relevance =
                r.get<bool>(mt, "relevance", "evaluation.metrics").value_or(true);
            cfg.evaluation.active_domain =
                r.get<bool>(mt, "active_domain", "evaluation.metrics").value_or(true);
            cfg.evaluation.overlap =
                r.get<bool>(mt, "overlap", "evaluation.metrics").value_or(true);
            cfg.evaluation.correctness =
                r.get<bool>(mt, "correctness", "evaluation.metrics").value_or(true);
        }
        if (ev.contains("rule") && !ev["rule"].is_null())
            cfg.evaluation.labeling_rule = detail::parse_rule(ev["rule"], r);
        cfg.evaluation.rule_test_size =
            r.get<std::size_t>(ev, "rule_test_size", "evaluation").value_or(50);
        r.require(cfg.evaluation.rule_test_size >= 1,
                  "evaluation.rule_test_size: must be >= 1");
    }
    r.require(!cfg.evaluation.n_values.empty(),
              "evaluation.n_values: at least one N is required");

    // output section
    if (j.contains("output")) {
        const auto& o = j["output"];
        r.check_keys(o, {"dir", "save_checkpoints", "top_k"}, "output");
        cfg.output.dir = r.get<std::string>(o, "dir", "output").value_or("out");
        cfg.output.save_checkpoints =
            r.get<bool>(o, "save_checkpoints", "output").value_or(false);
        cfg.output.top_k = r.get<std::size_t>(o, "top_k", "output").value_or(2);
        r.require(cfg.output.top_k >= 1, "output.top_k: must be >= 1");
    }

    if (!r.problems.empty()) throw validation_error(std::move(r.problems));

    // materialize the effective config (defaults included) for printing and
    // for the run MANIFEST
    nlohmann::json eff;
    eff["seed"] = cfg.seed;
    if (cfg.dataset.generator) {
        const auto& g = *cfg.dataset.generator;
        eff["dataset"]["generator"] = {{"type", "two_cluster"},
                                       {"n_per_class", g.n_per_class},
                                       {"dim", g.dim},
                                       {"separation", g.separation}};
    } else {
        const auto& f = *cfg.dataset.file;
        eff["dataset"]["file"] = {
            {"path", f.path},
            {"format", !f.format ? "auto"
                                 : (*f.format == dataset_format::csv ? "csv" : "jsonl")},
            {"header", f.header}};
    }
    if (cfg.dataset.outliers) {
        const auto& o = *cfg.dataset.outliers;
        eff["dataset"]["outliers"] = {
            {"fraction", o.fraction},
            {"mode", o.mode == outlier_mode::label_flip ? "label-flip" : "boundary-blend"},
            {"blend_weight", o.blend_weight}};
    }
    eff["dataset"]["split"] = {{"test_fraction", cfg.dataset.test_fraction}};
    eff["model"]["arch"] =
        cfg.model.family == arch::family::logreg
            ? nlohmann::json{{"type", "logreg"}}
            : nlohmann::json{{"type", "mlp"}, {"hidden", cfg.model.hidden}};
    eff["model"]["train"] = {{"epochs", cfg.model.train.epochs},
                             {"batch_size", cfg.model.train.batch_size},
                             {"learning_rate", cfg.model.train.learning_rate},
                             {"l2_reg", cfg.model.train.l2_reg},
                             {"checkpoint_every", cfg.model.train.checkpoint_every}};
    eff["explainers"] = nlohmann::json::array();
    for (const auto& e : cfg.explainers) {
        nlohmann::json je{{"method", e.method}};
        if (e.method == "IF" || e.method == "RIF") {
            je["damping"] = e.influence.damping;
            je["cg_tol"] = e.influence.cg_tol;
            je["max_iter"] = e.influence.max_iter;
        } else if (e.method == "TraceIn") {
            je["checkpoint_steps"] = e.tracein.steps;
            if (!e.checkpoint_dir.empty()) je["checkpoint_dir"] = e.checkpoint_dir;
        } else if (e.method == "DataModels") {
            je["num_subsets"] = e.datamodels.num_subsets;
            je["subset_fraction"] = e.datamodels.subset_fraction;
            je["ridge_penalty"] = e.datamodels.ridge_penalty;
        }
        eff["explainers"].push_back(std::move(je));
    }
    eff["evaluation"]["n_values"] = cfg.evaluation.n_values;
    eff["evaluation"]["metrics"] = {{"relevance", cfg.evaluation.relevance},
                                    {"active_domain", cfg.evaluation.active_domain},
                                    {"overlap", cfg.evaluation.overlap},
                                    {"correctness", cfg.evaluation.correctness}};
    if (cfg.evaluation.labeling_rule) {
        const auto& ru = *cfg.evaluation.labeling_rule;
        nlohmann::json jr;
        if (const auto* h = std::get_if<halfspace_condition>(&ru.condition)) {
            jr["type"] = "halfspace";
            jr["w"] = h->w;
            jr["b"] = h->b;
        } else {
            jr["type"] = "box";
            jr["intervals"] = nlohmann::json::array();
            for (const auto& iv : std::get<box_condition>(ru.condition).intervals) {
                nlohmann::json ji{{"coord", iv.coord}};
                // infinite bounds stay implicit (JSON has no infinity literal)
                if (std::isfinite(iv.lo)) ji["lo"] = iv.lo;
                if (std::isfinite(iv.hi)) ji["hi"] = iv.hi;
                jr["intervals"].push_back(std::move(ji));
            }
        }
        jr["forced_label"] = ru.forced_label;
        jr["breaker_fraction"] = ru.breaker_fraction;
        eff["evaluation"]["rule"] = jr;
        eff["evaluation"]["rule_test_size"] = cfg.evaluation.rule_test_size;
    }
    eff["output"] = {{"dir", cfg.output.dir},
                     {"save_checkpoints", cfg.output.save_checkpoints},
                     {"top_k", cfg.output.top_k}};
    eff["similarity"] = "cosine-clamped-at-zero";
    cfg.effective = std::move(eff);
    return cfg;
}

inline run_config validate_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error({std::string("config is not valid JSON: ") + e.what()});
    }
    return parse_run_config(j, path.parent_path().empty() ? "." : path.parent_path());
}

}  // namespace exeval
