#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "exeval/common.hpp"
#include "exeval/errors.hpp"

namespace exeval {

/// Small dense row-major matrix. Sized for desk-scale problems (a few hundred
/// rows); no attempt at blocking or vectorization.
struct dense_matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    dense_matrix() = default;
    dense_matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

inline vec matvec(const dense_matrix& m, const vec& x) {
    vec y(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

/// In-place lower Cholesky factor of a symmetric positive definite matrix.
inline dense_matrix cholesky_factor(dense_matrix m) {
    const std::size_t n = m.rows;
    for (std::size_t j = 0; j < n; ++j) {
        double d = m(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= m(j, k) * m(j, k);
        if (!(d > 0.0))
            throw argument_error("cholesky: matrix is not positive definite at pivot " +
                                 std::to_string(j));
        const double ljj = std::sqrt(d);
        m(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = m(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= m(i, k) * m(j, k);
            m(i, j) = s / ljj;
        }
        for (std::size_t k = j + 1; k < n; ++k) m(j, k) = 0.0;
    }
    return m;
}

/// Solves L L^T x = b given the lower factor L.
inline vec cholesky_solve(const dense_matrix& l, const vec& b) {
    const std::size_t n = l.rows;
    vec y(b);
    for (std::size_t i = 0; i < n; ++i) {
        double s = y[i];
        for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
        y[i] = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * y[k];
        y[ii] = s / l(ii, ii);
    }
    return y;
}

inline vec solve_spd(const dense_matrix& m, const vec& b) {
    return cholesky_solve(cholesky_factor(m), b);
}

struct cg_result {
    std::size_t iterations = 0;
    double relative_residual = 0.0;
    bool converged = false;
};

/// Conjugate gradient on an abstract SPD operator. `apply(x)` must return the
/// operator applied to x. Converges when ||Ax - b|| <= tol * ||b||; x is
/// overwritten with the solution (the zero right-hand side returns x = 0 in
/// zero iterations).
template <class Op>
cg_result conjugate_gradient(Op&& apply, const vec& b, vec& x, double tol,
                             std::size_t max_iter) {
    const std::size_t n = b.size();
    x.assign(n, 0.0);
    const double b_norm = norm(b);
    if (b_norm == 0.0) return {0, 0.0, true};

    vec r(b);  // r = b - A*0
    vec p(r);
    double rr = dot(r, r);
    const double stop = tol * b_norm;

    for (std::size_t it = 0; it < max_iter; ++it) {
        if (std::sqrt(rr) <= stop) return {it, std::sqrt(rr) / b_norm, true};
        vec q = apply(p);
        const double pq = dot(p, q);
        if (!(pq > 0.0))
            throw argument_error("conjugate gradient: operator is not positive definite");
        const double alpha = rr / pq;
        axpy(alpha, p, x);
        axpy(-alpha, q, r);
        const double rr_new = dot(r, r);
        const double beta = rr_new / rr;
        rr = rr_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    if (std::sqrt(rr) <= stop) return {max_iter, std::sqrt(rr) / b_norm, true};
    return {max_iter, std::sqrt(rr) / b_norm, false};
}

}  // namespace exeval
