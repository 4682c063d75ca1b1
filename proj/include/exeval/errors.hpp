#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace exeval {

/// Base class for all library errors.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed input file (carries a human-readable location in the message).
struct parse_error : error {
    using error::error;
};

struct argument_error : error {
    using error::error;
};

/// Iterative solve failed to reach the requested tolerance.
struct convergence_error : error {
    double residual;
    convergence_error(const std::string& msg, double residual_)
        : error(msg), residual(residual_) {}
};

/// Training produced non-finite values or failed to converge.
struct training_error : error {
    long step;
    training_error(const std::string& msg, long step_) : error(msg), step(step_) {}
};

/// An ID could not be resolved against the dataset it should refer to.
struct reference_error : error {
    using error::error;
};

struct rule_error : error {
    using error::error;
};

struct io_error : error {
    using error::error;
};

/// Config validation failure. Collects every problem found in one pass.
struct validation_error : error {
    std::vector<std::string> problems;
    explicit validation_error(std::vector<std::string> problems_)
        : error(join(problems_)), problems(std::move(problems_)) {}

private:
    static std::string join(const std::vector<std::string>& ps) {
        std::string out = "config validation failed:";
        for (const auto& p : ps) {
            out += "\n  - ";
            out += p;
        }
        return out;
    }
};

}  // namespace exeval
