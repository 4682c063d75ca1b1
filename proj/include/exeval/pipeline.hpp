#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exeval/common.hpp"
#include "exeval/config.hpp"
#include "exeval/dataset.hpp"
#include "exeval/errors.hpp"
#include "exeval/explainers.hpp"
#include "exeval/loo.hpp"
#include "exeval/metrics.hpp"
#include "exeval/model.hpp"
#include "exeval/rules.hpp"

namespace exeval {

namespace detail {

inline std::string hash_hex(const std::string& content) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(content);
    return os.str();
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

/// Tracks emitted files and writes the MANIFEST (every file with a content
/// hash, the effective config, and run-resolved values).
class output_writer {
public:
    explicit output_writer(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    const std::filesystem::path& dir() const { return dir_; }

    void write(const std::string& name, const std::string& content) {
        const auto path = dir_ / name;
        if (name.find('/') != std::string::npos)
            std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw io_error("cannot write output file: " + path.string());
        out << content;
        files_.push_back({name, detail::hash_hex(content)});
    }

    void write_manifest(const nlohmann::json& config, const nlohmann::json& resolved,
                        bool complete, const std::string& failed_stage = "",
                        const std::string& error_message = "") {
        nlohmann::json m;
        m["complete"] = complete;
        if (!complete) {
            m["failed_stage"] = failed_stage;
            m["error"] = error_message;
        }
        m["config"] = config;
        m["resolved"] = resolved;
        m["files"] = nlohmann::json::array();
        for (const auto& [name, hash] : files_)
            m["files"].push_back({{"name", name}, {"hash", hash}});
        m["generated_at"] = detail::utc_timestamp();
        std::ofstream out(dir_ / "MANIFEST.json", std::ios::binary);
        if (!out) throw io_error("cannot write MANIFEST in " + dir_.string());
        out << m.dump(2) << '\n';
    }

private:
    std::filesystem::path dir_;
    std::vector<std::pair<std::string, std::string>> files_;
};

struct run_artifacts {
    dataset train;
    dataset test;
    model_params model;  // the model explainers attribute against
    std::optional<model_params> model_before;
    std::vector<checkpoint> checkpoints;
    std::vector<example_id> outlier_ids;
    std::vector<example_id> followers, breakers, untouched;
    std::optional<rule_verification> verification;
    std::vector<metric_report> reports;
};

namespace detail {

inline nlohmann::json explainer_params_json(const explainer_section& es,
                                            std::size_t n_train) {
    nlohmann::json p{{"method", es.method}};
    if (es.method == "IF" || es.method == "RIF") {
        p["damping"] = es.influence.damping;
        p["cg_tol"] = es.influence.cg_tol;
        p["max_iter"] = es.influence.max_iter;
    } else if (es.method == "TraceIn") {
        p["checkpoint_steps"] = es.tracein.steps;
    } else if (es.method == "DataModels") {
        const std::size_t m = es.datamodels.effective_subsets(n_train);
        p["num_subsets"] = m;
        p["subset_fraction"] = es.datamodels.subset_fraction;
        p["ridge_penalty"] = es.datamodels.effective_ridge(m);
    }
    p["similarity"] = "cosine-clamped-at-zero";
    return p;
}

inline nlohmann::json report_to_json(const metric_report& r, const nlohmann::json& params) {
    nlohmann::json j;
    j["method"] = r.method;
    j["params"] = params;
    j["metrics"] = metrics_to_json(r);
    j["warnings"] = r.warnings;
    return j;
}

inline std::string report_filename(const std::string& method, std::size_t n) {
    return "report_" + method + "_N" + std::to_string(n) + ".json";
}

inline metric_report build_report(const std::string& method, std::size_t n,
                                  const std::vector<explanation>& explanations,
                                  const dataset& train, const explananda_map& xs,
                                  const model_params& model,
                                  const evaluation_section& eval,
                                  const std::optional<rule>& labeling_rule,
                                  std::uint64_t overlap_seed,
                                  std::vector<std::string> warnings) {
    metric_report rep;
    rep.method = method;
    rep.n = n;
    rep.n_explananda = explanations.size();
    rep.warnings = std::move(warnings);
    rep.pop = popularity(explanations, train);
    rep.pop_loss = popularity_vs_loss(rep.pop, model, train);
    if (eval.relevance) rep.relevance = relevance(explanations, train, xs);
    if (eval.active_domain) rep.domain = active_domain(explanations, train);
    if (eval.overlap && explanations.size() >= 2) rep.over = overlap(explanations, overlap_seed);
    if (eval.correctness && labeling_rule) {
        std::vector<explanation> satisfying;
        for (const auto& e : explanations)
            if (labeling_rule->satisfies(resolve_explanandum(xs, e.explanandum_id)))
                satisfying.push_back(e);
        if (!satisfying.empty())
            rep.correctness = correctness(satisfying, train, *labeling_rule, xs);
        else
            rep.warnings.push_back("correctness skipped: no rule-satisfying explananda");
    }
    return rep;
}

inline void print_summary_table(const std::vector<metric_report>& reports,
                                const std::vector<std::size_t>& n_values, std::ostream& os) {
    std::vector<std::string> methods;
    for (const auto& r : reports)
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
            methods.push_back(r.method);
    auto find = [&](const std::string& m, std::size_t n) -> const metric_report* {
        for (const auto& r : reports)
            if (r.method == m && r.n == n) return &r;
        return nullptr;
    };
    const std::vector<std::pair<std::string, int>> groups = {
        {"Relevance", 0}, {"Active Domain", 1}, {"Overlap", 2}, {"Correctness", 3}};
    os << '\n' << std::left << std::setw(12) << "";
    for (const auto& [label, _] : groups) {
        std::size_t width = 9 * n_values.size();
        os << "| " << std::setw(width) << label;
    }
    os << '\n' << std::setw(12) << "";
    for (std::size_t g = 0; g < groups.size(); ++g) {
        os << "| ";
        for (auto n : n_values) os << std::setw(9) << ("N=" + std::to_string(n));
    }
    os << '\n';
    os << std::string(12 + groups.size() * (2 + 9 * n_values.size()), '-') << '\n';
    for (const auto& m : methods) {
        os << std::setw(12) << m;
        for (const auto& [label, which] : groups) {
            os << "| ";
            for (auto n : n_values) {
                const auto* r = find(m, n);
                std::ostringstream cell;
                if (r == nullptr) {
                    cell << "-";
                } else {
                    cell << std::fixed << std::setprecision(3);
                    switch (which) {
                        case 0: cell << r->relevance; break;
                        case 1: cell << r->domain.normalized; break;
                        case 2: cell << r->over.value; break;
                        case 3:
                            if (r->correctness)
                                cell << *r->correctness;
                            else
                                cell << "-";
                            break;
                    }
                }
                os << std::setw(9) << cell.str();
            }
        }
        os << '\n';
    }
    os << '\n';
}

inline std::string summary_csv(const std::vector<metric_report>& reports) {
    std::ostringstream os;
    os << "method,N,relevance,active_domain_count,active_domain,overlap,correctness\n";
    for (const auto& r : reports) {
        os << r.method << ',' << r.n << ',' << format_double(r.relevance) << ','
           << r.domain.count << ',' << format_double(r.domain.normalized) << ','
           << format_double(r.over.value) << ',';
        if (r.correctness) os << format_double(*r.correctness);
        os << '\n';
    }
    return os.str();
}

}  // namespace detail

/// Executes the full pipeline: data, models, explainers, metrics, outputs.
/// Worker count parallelizes independent units only and never changes any
/// output value.
inline run_artifacts run_pipeline(const run_config& cfg, unsigned workers,
                                  std::ostream& log = std::cout) {
    output_writer out(cfg.output.dir);
    nlohmann::json resolved;
    std::string stage = "dataset";
    try {
        // --- dataset stage ---------------------------------------------
        dataset full;
        if (cfg.dataset.generator) {
            const auto& g = *cfg.dataset.generator;
            full = generate_two_cluster(g.n_per_class, g.dim, g.separation,
                                        derive_seed(cfg.seed, "dataset"));
        } else {
            const auto& f = *cfg.dataset.file;
            const auto format = f.format ? *f.format : format_from_path(f.path);
            full = load_dataset(f.path, format, f.header);
        }
        auto split = train_test_split(full, cfg.dataset.test_fraction,
                                      derive_seed(cfg.seed, "split"));
        run_artifacts art{.train = std::move(split.train),
                          .test = std::move(split.test),
                          .model = {}};
        if (cfg.dataset.outliers && cfg.dataset.outliers->fraction > 0.0) {
            auto injected = inject_outliers(art.train, *cfg.dataset.outliers,
                                            derive_seed(cfg.seed, "outliers"));
            art.train = std::move(injected.data);
            art.outlier_ids = std::move(injected.outlier_ids);
        }

        const dataset pre_rule_train = art.train;
        std::optional<dataset> rule_test;
        if (cfg.evaluation.labeling_rule) {
            auto applied = apply_rule(art.train, *cfg.evaluation.labeling_rule,
                                      derive_seed(cfg.seed, "rule"));
            art.train = std::move(applied.data);
            art.followers = std::move(applied.followers);
            art.breakers = std::move(applied.breakers);
            art.untouched = std::move(applied.untouched);
            if (cfg.dataset.generator) {
                rule_test = generate_rule_test(
                    cfg.evaluation.rule_test_size, cfg.dataset.generator->dim,
                    cfg.dataset.generator->separation, *cfg.evaluation.labeling_rule,
                    derive_seed(cfg.seed, "rule-test"));
            } else {
                // no generative model for file datasets: hold out the
                // rule-satisfying test points, labeled by the rule
                std::vector<labeled_example> held;
                for (const auto& e : art.test.examples())
                    if (cfg.evaluation.labeling_rule->satisfies(e.x)) {
                        auto copy = e;
                        copy.y = cfg.evaluation.labeling_rule->forced_label;
                        copy.id = static_cast<example_id>(held.size());
                        held.push_back(std::move(copy));
                    }
                if (held.empty())
                    throw rule_error("run: no rule-satisfying test points to verify with");
                rule_test = dataset(std::move(held), art.test.dim());
            }
        }
        resolved["n_train"] = art.train.size();
        resolved["n_test"] = art.test.size();
        resolved["outlier_ids"] = art.outlier_ids;
        out.write("train.jsonl", [&] {
            std::ostringstream os;
            for (const auto& e : art.train.examples()) {
                nlohmann::json rec{{"id", e.id}, {"x", e.x}, {"y", e.y}};
                os << rec.dump() << '\n';
            }
            return os.str();
        }());
        out.write("test.jsonl", [&] {
            std::ostringstream os;
            for (const auto& e : art.test.examples()) {
                nlohmann::json rec{{"id", e.id}, {"x", e.x}, {"y", e.y}};
                os << rec.dump() << '\n';
            }
            return os.str();
        }());

        // --- training stage ---------------------------------------------
        stage = "train";
        const arch a = cfg.model.family == arch::family::logreg
                           ? arch::logreg(art.train.dim())
                           : arch::mlp(art.train.dim(), cfg.model.hidden);
        auto trained = train(a, art.train, cfg.model.train);
        art.model = trained.params;
        art.checkpoints = trained.checkpoints;
        if (cfg.evaluation.labeling_rule) {
            auto before = train(a, pre_rule_train, cfg.model.train);
            art.model_before = before.params;
        }
        if (cfg.output.save_checkpoints) {
            for (const auto& c : art.checkpoints) {
                nlohmann::json jc{{"step", c.step},
                                  {"learning_rate", c.learning_rate},
                                  {"theta", c.theta}};
                std::ostringstream name;
                name << "checkpoints/checkpoint_" << std::setw(6) << std::setfill('0')
                     << c.step << ".json";
                out.write(name.str(), jc.dump(2) + "\n");
            }
            resolved["checkpoints_saved"] = art.checkpoints.size();
        }

        // --- rule verification -------------------------------------------
        if (cfg.evaluation.labeling_rule) {
            stage = "rule-verification";
            std::vector<example_id> intervened;
            intervened.reserve(art.followers.size() + art.breakers.size());
            intervened.insert(intervened.end(), art.followers.begin(), art.followers.end());
            intervened.insert(intervened.end(), art.breakers.begin(), art.breakers.end());
            std::sort(intervened.begin(), intervened.end());
            art.verification = verify_rule_learning(*art.model_before, art.model, art.train,
                                                    *rule_test, intervened, art.untouched);
            nlohmann::json jv = rule_verification_to_json(*art.verification);
            jv["followers"] = art.followers;
            jv["breakers"] = art.breakers;
            jv["untouched"] = art.untouched;
            out.write("rule_verification.json", jv.dump(2) + "\n");
            out.write("rule_verification.csv", rule_verification_csv(*art.verification));
        }

        // --- explainer + metrics stage ------------------------------------
        const explananda_map xs = [&] {
            explananda_map m;
            for (const auto& e : art.test.examples()) m[e.id] = e.x;
            return m;
        }();
        std::vector<explanandum> ts;
        ts.reserve(art.test.size());
        for (const auto& e : art.test.examples()) ts.push_back({e.id, e.x});
        resolved["n_explananda"] = ts.size();

        for (const auto& es : cfg.explainers) {
            stage = "explain:" + es.method;
            std::unique_ptr<explainer> ex;
            std::vector<std::string> warnings;
            if (es.method == "IF") {
                ex = std::make_unique<influence_explainer>(art.model, art.train,
                                                           cfg.model.train.l2_reg,
                                                           es.influence, false, workers);
            } else if (es.method == "RIF") {
                ex = std::make_unique<influence_explainer>(art.model, art.train,
                                                           cfg.model.train.l2_reg,
                                                           es.influence, true, workers);
            } else if (es.method == "TraceIn") {
                // a checkpoint_dir reuses checkpoints from an earlier run
                const auto& ckpts = es.checkpoint_dir.empty()
                                        ? art.checkpoints
                                        : load_checkpoints(es.checkpoint_dir);
                ex = std::make_unique<tracein_explainer>(art.model, art.train, ckpts,
                                                         cfg.model.train.l2_reg, es.tracein);
            } else {
                auto dm = es.datamodels;
                auto dme = std::make_unique<datamodels_explainer>(art.model, art.train, a,
                                                                  cfg.model.train, dm);
                ex = std::move(dme);
            }
            const auto scores = ex->score_all(ts, workers);
            if (const auto* dme = dynamic_cast<const datamodels_explainer*>(ex.get()))
                warnings = dme->warnings();

            stage = "metrics:" + es.method;
            const auto params = detail::explainer_params_json(es, art.train.size());
            for (std::size_t n : cfg.evaluation.n_values) {
                std::vector<explanation> explanations;
                explanations.reserve(ts.size());
                for (std::size_t i = 0; i < ts.size(); ++i)
                    explanations.push_back(make_explanation(
                        ts[i].id, predict_label(art.model, ts[i].x), scores[i], art.train, n));
                {
                    std::ostringstream os;
                    for (const auto& e : explanations)
                        os << explanation_to_json(e).dump() << '\n';
                    out.write("explanations_" + es.method + "_N" + std::to_string(n) + ".jsonl",
                              os.str());
                }
                auto rep = detail::build_report(es.method, n, explanations, art.train, xs,
                                                art.model, cfg.evaluation,
                                                cfg.evaluation.labeling_rule,
                                                derive_seed(cfg.seed, "overlap"), warnings);
                out.write(detail::report_filename(es.method, n),
                          detail::report_to_json(rep, params).dump(2) + "\n");
                art.reports.push_back(std::move(rep));
            }
        }

        // --- summary -------------------------------------------------------
        stage = "output";
        out.write("summary.csv", detail::summary_csv(art.reports));
        detail::print_summary_table(art.reports, cfg.evaluation.n_values, log);
        out.write_manifest(cfg.effective, resolved, true);
        return art;
    } catch (const std::exception& e) {
        out.write_manifest(cfg.effective, resolved, false, stage, e.what());
        throw error("stage '" + stage + "': " + e.what());
    }
}

/// Per-explainer plot data from a finished run directory: popularity CSVs,
/// popularity-vs-loss CSVs, and the top-K most popular examples with their
/// losses.
inline std::vector<std::string> export_plots(const std::filesystem::path& run_dir,
                                             std::size_t top_k = 2) {
    if (!std::filesystem::is_directory(run_dir))
        throw io_error("export_plots: no such run directory: " + run_dir.string());
    std::vector<std::filesystem::path> reports;
    for (const auto& entry : std::filesystem::directory_iterator(run_dir)) {
        const auto name = entry.path().filename().string();
        if (name.starts_with("report_") && name.ends_with(".json"))
            reports.push_back(entry.path());
    }
    if (reports.empty())
        throw io_error("export_plots: no report files in " + run_dir.string());
    std::sort(reports.begin(), reports.end());

    std::vector<std::string> written;
    for (const auto& path : reports) {
        std::ifstream in(path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw parse_error("bad report file " + path.string() + ": " + e.what());
        }
        const std::string stem = path.stem().string().substr(std::string("report_").size());
        struct row {
            example_id id;
            double pop;
            double loss;
        };
        std::vector<row> rows;
        for (const auto& p : j.at("metrics").at("popularity_vs_loss"))
            rows.push_back({p.at("id").get<example_id>(), p.at("pop").get<double>(),
                            p.at("loss").get<double>()});

        auto write_file = [&](const std::string& name, const std::string& content) {
            std::ofstream out(run_dir / name, std::ios::binary);
            if (!out) throw io_error("cannot write " + name);
            out << content;
            written.push_back(name);
        };
        {
            std::ostringstream os;
            os << "id,pop\n";
            for (const auto& r : rows)
                os << r.id << ',' << detail::format_double(r.pop) << '\n';
            write_file("popularity_" + stem + ".csv", os.str());
        }
        {
            std::ostringstream os;
            os << "id,pop,loss\n";
            for (const auto& r : rows)
                os << r.id << ',' << detail::format_double(r.pop) << ','
                   << detail::format_double(r.loss) << '\n';
            write_file("pop_vs_loss_" + stem + ".csv", os.str());
        }
        {
            auto sorted = rows;
            std::sort(sorted.begin(), sorted.end(), [](const row& a, const row& b) {
                if (a.pop != b.pop) return a.pop > b.pop;
                return a.id < b.id;
            });
            if (sorted.size() > top_k) sorted.resize(top_k);
            std::ostringstream os;
            os << "id,pop,loss\n";
            for (const auto& r : sorted)
                os << r.id << ',' << detail::format_double(r.pop) << ','
                   << detail::format_double(r.loss) << '\n';
            write_file("top_popular_" + stem + ".csv", os.str());
        }
    }
    return written;
}

/// Metrics over externally produced explanations: rebuilds the dataset and
/// model stages from the config (deterministic), resolves members against
/// the given training corpus, and writes reports alongside the built-in path.
inline std::vector<metric_report> ingest_explanations(
    const run_config& cfg, const std::filesystem::path& explanations_path,
    const std::filesystem::path& train_path, const std::string& method_label,
    std::ostream& log = std::cout) {
    // training corpus the explanation members refer to
    dataset train_corpus = [&] {
        std::ifstream probe(train_path);
        if (!probe) throw io_error("cannot open dataset file: " + train_path.string());
        std::string first_line;
        std::getline(probe, first_line);
        if (!first_line.empty() && first_line.front() == '{') {
            // JSONL with explicit ids (as written by run outputs)
            std::vector<labeled_example> examples;
            std::ifstream in(train_path);
            std::string line;
            std::size_t line_no = 0;
            std::optional<std::size_t> dim;
            while (std::getline(in, line)) {
                ++line_no;
                if (line.empty()) continue;
                nlohmann::json rec;
                try {
                    rec = nlohmann::json::parse(line);
                } catch (const nlohmann::json::exception& e) {
                    throw parse_error("line " + std::to_string(line_no) + ": " + e.what());
                }
                labeled_example e;
                e.id = rec.contains("id") ? rec.at("id").get<example_id>()
                                          : static_cast<example_id>(examples.size());
                e.x = rec.at("x").get<vec>();
                e.y = rec.at("y").get<int>();
                if (!dim) dim = e.x.size();
                examples.push_back(std::move(e));
            }
            if (examples.empty()) throw parse_error("empty dataset: " + train_path.string());
            return dataset(std::move(examples), *dim);
        }
        return load_dataset(train_path, format_from_path(train_path));
    }();

    auto explanations = load_explanations(explanations_path);
    if (explanations.empty())
        throw argument_error("ingest: no explanations in " + explanations_path.string());
    const std::size_t n = explanations.front().members.size();

    // rebuild the dataset and model stages to recover explananda features and
    // per-example losses; both are deterministic functions of the config
    dataset full;
    if (cfg.dataset.generator) {
        const auto& g = *cfg.dataset.generator;
        full = generate_two_cluster(g.n_per_class, g.dim, g.separation,
                                    derive_seed(cfg.seed, "dataset"));
    } else {
        const auto& f = *cfg.dataset.file;
        full = load_dataset(f.path, f.format ? *f.format : format_from_path(f.path), f.header);
    }
    auto split = train_test_split(full, cfg.dataset.test_fraction, derive_seed(cfg.seed, "split"));
    dataset train_built = std::move(split.train);
    if (cfg.dataset.outliers && cfg.dataset.outliers->fraction > 0.0)
        train_built =
            inject_outliers(train_built, *cfg.dataset.outliers, derive_seed(cfg.seed, "outliers"))
                .data;
    if (cfg.evaluation.labeling_rule)
        train_built =
            apply_rule(train_built, *cfg.evaluation.labeling_rule, derive_seed(cfg.seed, "rule"))
                .data;
    const arch a = cfg.model.family == arch::family::logreg
                       ? arch::logreg(train_built.dim())
                       : arch::mlp(train_built.dim(), cfg.model.hidden);
    const auto model = train(a, train_built, cfg.model.train).params;

    explananda_map xs;
    for (const auto& e : split.test.examples()) xs[e.id] = e.x;

    auto rep = detail::build_report(method_label, n, explanations, train_corpus, xs, model,
                                    cfg.evaluation, cfg.evaluation.labeling_rule,
                                    derive_seed(cfg.seed, "overlap"), {});
    output_writer out(std::filesystem::path(cfg.output.dir) / "ingested");
    nlohmann::json params{{"method", method_label}, {"source", "external"}};
    params["similarity"] = "cosine-clamped-at-zero";
    out.write(detail::report_filename(method_label, n),
              detail::report_to_json(rep, params).dump(2) + "\n");
    detail::print_summary_table({rep}, {n}, log);
    return {rep};
}

}  // namespace exeval
