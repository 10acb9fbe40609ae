#include "cliptune/eig.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cliptune {

namespace {

double off_diagonal_norm(const MatD& a) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) sum += a.at(i, j) * a.at(i, j);
    return std::sqrt(sum);
}

}  // namespace

EigResult sym_eig(const MatD& s) {
    if (s.rows() != s.cols()) {
        throw std::invalid_argument("sym_eig: matrix is " + std::to_string(s.rows()) + "x" +
                                    std::to_string(s.cols()) + ", not square");
    }
    const std::size_t n = s.rows();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::fabs(s.at(i, j) - s.at(j, i)) > 1e-9) {
                throw std::invalid_argument("sym_eig: input not symmetric at (" +
                                            std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }

    MatD a = s;
    MatD v = MatD::identity(n);

    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::fabs(a.at(i, i)));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) scale = std::max(scale, std::fabs(a.at(i, j)));
    const double tol = std::max(scale, 1.0) * 1e-14 * static_cast<double>(n);

    const int max_sweeps = 100;
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        if (off_diagonal_norm(a) <= tol) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::fabs(apq) <= tol / static_cast<double>(n * n)) continue;
                const double app = a.at(p, p);
                const double aqq = a.at(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                // Smaller-magnitude root keeps rotations stable.
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;

                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p);
                    const double akq = a.at(k, q);
                    a.at(k, p) = c * akp - sn * akq;
                    a.at(k, q) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k);
                    const double aqk = a.at(q, k);
                    a.at(p, k) = c * apk - sn * aqk;
                    a.at(q, k) = sn * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p);
                    const double vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - sn * vkq;
                    v.at(k, q) = sn * vkp + c * vkq;
                }
            }
        }
    }
    if (sweep == max_sweeps && off_diagonal_norm(a) > tol) {
        throw std::runtime_error("sym_eig: no convergence after " + std::to_string(max_sweeps) +
                                 " sweeps");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return a.at(x, x) < a.at(y, y); });

    EigResult res;
    res.eigenvalues.resize(n);
    res.eigenvectors = MatD(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        res.eigenvalues[j] = a.at(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) res.eigenvectors.at(i, j) = v.at(i, order[j]);
    }
    return res;
}

}  // namespace cliptune
