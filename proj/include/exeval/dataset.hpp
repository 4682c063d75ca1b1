#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "exeval/common.hpp"
#include "exeval/errors.hpp"

namespace exeval {

using example_id = std::int64_t;

struct labeled_example {
    example_id id = 0;
    vec x;
    int y = 0;  // binary label in {0, 1}
};

/// Immutable training corpus: ordered examples with stable IDs and a shared
/// feature dimension.
class dataset {
public:
    dataset() = default;

    dataset(std::vector<labeled_example> examples, std::size_t dim)
        : examples_(std::move(examples)), dim_(dim) {
        index_.reserve(examples_.size());
        for (std::size_t i = 0; i < examples_.size(); ++i) {
            const auto& e = examples_[i];
            if (e.x.size() != dim_)
                throw argument_error("dataset: example " + std::to_string(e.id) +
                                     " has dimension " + std::to_string(e.x.size()) +
                                     ", expected " + std::to_string(dim_));
            if (!all_finite(e.x))
                throw argument_error("dataset: example " + std::to_string(e.id) +
                                     " has non-finite features");
            if (e.y != 0 && e.y != 1)
                throw argument_error("dataset: example " + std::to_string(e.id) +
                                     " has label outside {0,1}");
            if (!index_.emplace(e.id, i).second)
                throw argument_error("dataset: duplicate example id " + std::to_string(e.id));
        }
    }

    std::size_t size() const { return examples_.size(); }
    bool empty() const { return examples_.empty(); }
    std::size_t dim() const { return dim_; }

    const labeled_example& operator[](std::size_t i) const { return examples_[i]; }
    const std::vector<labeled_example>& examples() const { return examples_; }

    bool contains(example_id id) const { return index_.count(id) != 0; }

    const labeled_example& by_id(example_id id) const {
        auto it = index_.find(id);
        if (it == index_.end())
            throw reference_error("dataset: unknown example id " + std::to_string(id));
        return examples_[it->second];
    }

    std::size_t count_label(int y) const {
        std::size_t c = 0;
        for (const auto& e : examples_) c += (e.y == y);
        return c;
    }

    bool has_both_classes() const { return count_label(0) > 0 && count_label(1) > 0; }

private:
    std::vector<labeled_example> examples_;
    std::size_t dim_ = 0;
    std::unordered_map<example_id, std::size_t> index_;
};

enum class outlier_mode { label_flip, boundary_blend };

/// How class outliers are manufactured: either flip labels in place
/// (high loss under a well-fit model) or blend features toward a random
/// example of the opposite class while keeping the label.
struct outlier_spec {
    double fraction = 0.0;  // in [0, 0.5]
    outlier_mode mode = outlier_mode::label_flip;
    double blend_weight = 0.5;  // boundary-blend only, in [0, 1]

    void validate() const {
        if (!(fraction >= 0.0 && fraction <= 0.5))
            throw argument_error("outlier_spec: fraction must lie in [0, 0.5]");
        if (!(blend_weight >= 0.0 && blend_weight <= 1.0))
            throw argument_error("outlier_spec: blend_weight must lie in [0, 1]");
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::size_t line_no) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    while (first != last && (*first == ' ' || *first == '\t')) ++first;
    while (last != first && (*(last - 1) == ' ' || *(last - 1) == '\t' || *(last - 1) == '\r'))
        --last;
    auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last)
        throw parse_error("line " + std::to_string(line_no) + ": not a number: '" +
                          std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

}  // namespace detail

enum class dataset_format { csv, jsonl };

inline dataset_format format_from_path(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".csv") return dataset_format::csv;
    if (ext == ".jsonl" || ext == ".ndjson") return dataset_format::jsonl;
    throw argument_error("cannot infer dataset format from extension '" + ext +
                         "'; expected .csv or .jsonl");
}

/// Loads a dataset from disk. CSV rows are d feature columns followed by one
/// label column; JSONL records are {"x": [...], "y": 0|1}. IDs are assigned
/// 0..n-1 in file order; the dimension is inferred from the first record.
inline dataset load_dataset(const std::filesystem::path& path, dataset_format format,
                            bool header = false) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open dataset file: " + path.string());

    std::vector<labeled_example> examples;
    std::optional<std::size_t> dim;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (header && line_no == 1 && format == dataset_format::csv) continue;
        if (line.empty() || line == "\r") continue;

        labeled_example ex;
        ex.id = static_cast<example_id>(examples.size());
        if (format == dataset_format::csv) {
            const auto fields = detail::split_csv(line);
            if (fields.size() < 2)
                throw parse_error("line " + std::to_string(line_no) +
                                  ": expected at least one feature and a label");
            ex.x.reserve(fields.size() - 1);
            for (std::size_t i = 0; i + 1 < fields.size(); ++i)
                ex.x.push_back(detail::parse_double(fields[i], line_no));
            const double y = detail::parse_double(fields.back(), line_no);
            if (y != 0.0 && y != 1.0)
                throw parse_error("line " + std::to_string(line_no) +
                                  ": label outside {0,1}");
            ex.y = static_cast<int>(y);
        } else {
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw parse_error("line " + std::to_string(line_no) + ": " + e.what());
            }
            if (!rec.contains("x") || !rec["x"].is_array() || !rec.contains("y"))
                throw parse_error("line " + std::to_string(line_no) +
                                  ": expected {\"x\": [...], \"y\": 0|1}");
            for (const auto& v : rec["x"]) {
                if (!v.is_number())
                    throw parse_error("line " + std::to_string(line_no) +
                                      ": non-numeric feature");
                ex.x.push_back(v.get<double>());
            }
            if (!rec["y"].is_number_integer() ||
                (rec["y"].get<int>() != 0 && rec["y"].get<int>() != 1))
                throw parse_error("line " + std::to_string(line_no) +
                                  ": label outside {0,1}");
            ex.y = rec["y"].get<int>();
        }
        if (!dim) {
            dim = ex.x.size();
        } else if (ex.x.size() != *dim) {
            throw parse_error("line " + std::to_string(line_no) + ": dimension " +
                              std::to_string(ex.x.size()) + " does not match " +
                              std::to_string(*dim));
        }
        if (!all_finite(ex.x))
            throw parse_error("line " + std::to_string(line_no) + ": non-finite feature");
        examples.push_back(std::move(ex));
    }
    if (examples.empty()) throw parse_error("empty dataset: " + path.string());
    return dataset(std::move(examples), *dim);
}

/// Writes d feature columns then the label, no header. Doubles use the
/// shortest round-trip representation so save/load is exact.
inline void save_csv(const dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write dataset file: " + path.string());
    for (const auto& e : data.examples()) {
        for (double v : e.x) out << detail::format_double(v) << ',';
        out << e.y << '\n';
    }
}

inline void save_jsonl(const dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write dataset file: " + path.string());
    for (const auto& e : data.examples()) {
        nlohmann::json rec;
        rec["x"] = e.x;
        rec["y"] = e.y;
        out << rec.dump() << '\n';
    }
}

/// Two isotropic unit-variance Gaussian clusters: class 0 at the origin,
/// class 1 at `separation` along the first axis. Pure function of its
/// arguments, including the seed.
inline dataset generate_two_cluster(std::size_t n_per_class, std::size_t dim,
                                    double separation, std::uint64_t seed) {
    if (n_per_class < 1) throw argument_error("generate_two_cluster: n_per_class must be >= 1");
    if (dim < 1) throw argument_error("generate_two_cluster: dim must be >= 1");
    if (!(separation > 0.0))
        throw argument_error("generate_two_cluster: separation must be positive");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<labeled_example> examples;
    examples.reserve(2 * n_per_class);
    for (int cls = 0; cls < 2; ++cls) {
        for (std::size_t i = 0; i < n_per_class; ++i) {
            labeled_example e;
            e.id = static_cast<example_id>(examples.size());
            e.y = cls;
            e.x.resize(dim);
            for (auto& v : e.x) v = gauss(rng);
            if (cls == 1) e.x[0] += separation;
            examples.push_back(std::move(e));
        }
    }
    return dataset(std::move(examples), dim);
}

struct outlier_injection {
    dataset data;
    std::vector<example_id> outlier_ids;  // sorted ascending
};

/// Converts floor(fraction * n) uniformly chosen examples into class outliers.
/// Only labels (label-flip) or features (boundary-blend) of the chosen
/// examples change; n, dim and all IDs are preserved.
inline outlier_injection inject_outliers(const dataset& data, const outlier_spec& spec,
                                         std::uint64_t seed) {
    spec.validate();
    if (data.count_label(0) < 2 || data.count_label(1) < 2)
        throw argument_error("inject_outliers: need at least 2 examples per class");

    const std::size_t n_outliers =
        static_cast<std::size_t>(spec.fraction * static_cast<double>(data.size()));
    if (n_outliers == 0) return {data, {}};

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(n_outliers);

    std::vector<labeled_example> examples = data.examples();
    std::vector<example_id> ids;
    ids.reserve(n_outliers);
    for (std::size_t idx : order) {
        auto& e = examples[idx];
        if (spec.mode == outlier_mode::label_flip) {
            e.y = 1 - e.y;
        } else {
            // blend toward a random example of the opposite class (drawn from
            // the original data)
            std::vector<std::size_t> opposite;
            for (std::size_t j = 0; j < data.size(); ++j)
                if (data[j].y != data[idx].y) opposite.push_back(j);
            std::uniform_int_distribution<std::size_t> pick(0, opposite.size() - 1);
            const auto& other = data[opposite[pick(rng)]];
            for (std::size_t k = 0; k < e.x.size(); ++k)
                e.x[k] = spec.blend_weight * e.x[k] + (1.0 - spec.blend_weight) * other.x[k];
        }
        ids.push_back(e.id);
    }
    std::sort(ids.begin(), ids.end());
    return {dataset(std::move(examples), data.dim()), std::move(ids)};
}

struct split_result {
    dataset train;
    dataset test;
};

/// Stratified disjoint partition preserving original IDs. Per class,
/// floor(test_fraction * class size) examples go to the test part.
inline split_result train_test_split(const dataset& data, double test_fraction,
                                     std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw argument_error("train_test_split: test_fraction must lie in (0, 1)");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> test_idx;
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data[i].y == cls) members.push_back(i);
        std::shuffle(members.begin(), members.end(), rng);
        const auto n_test =
            static_cast<std::size_t>(test_fraction * static_cast<double>(members.size()));
        test_idx.insert(test_idx.end(), members.begin(), members.begin() + n_test);
    }
    std::sort(test_idx.begin(), test_idx.end());

    std::vector<labeled_example> train_ex, test_ex;
    std::size_t next = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (next < test_idx.size() && test_idx[next] == i) {
            test_ex.push_back(data[i]);
            ++next;
        } else {
            train_ex.push_back(data[i]);
        }
    }
    if (train_ex.empty() || test_ex.empty())
        throw argument_error("train_test_split: fraction leaves a part empty");
    return {dataset(std::move(train_ex), data.dim()), dataset(std::move(test_ex), data.dim())};
}

}  // namespace exeval
