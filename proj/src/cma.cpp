#include "cliptune/cma.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cliptune/eig.hpp"

namespace cliptune {
namespace {

constexpr double kEigenFloor = 1e-14;

// Refresh (B, scale) from C when stale; floors non-positive eigenvalues and
// writes the repaired C back.
void ensure_eigen(CmaState& s) {
    if (s.eigen_age < s.eigen_interval) return;
    EigResult eig = sym_eig(s.C);
    bool repaired = false;
    for (double& v : eig.eigenvalues) {
        if (v < kEigenFloor) {
            v = kEigenFloor;
            repaired = true;
        }
    }
    if (repaired) {
        ++s.repair_count;
        const std::size_t n = s.dim;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    acc += eig.eigenvectors.at(i, k) * eig.eigenvalues[k] *
                           eig.eigenvectors.at(j, k);
                }
                s.C.at(i, j) = acc;
                s.C.at(j, i) = acc;
            }
        }
    }
    s.eig_basis = std::move(eig.eigenvectors);
    s.eig_scale.resize(s.dim);
    for (std::size_t i = 0; i < s.dim; ++i) s.eig_scale[i] = std::sqrt(eig.eigenvalues[i]);
    s.eigen_age = 0;
}

}  // namespace

CmaState cma_init(std::size_t dim, std::size_t lambda, double sigma0,
                  const std::vector<double>& m0, uint64_t seed) {
    if (dim < 1) throw std::invalid_argument("cma_init: dim must be at least 1");
    if (lambda < 2) throw std::invalid_argument("cma_init: lambda must be at least 2");
    if (!(sigma0 > 0.0)) throw std::invalid_argument("cma_init: sigma0 must be positive");
    if (!m0.empty() && m0.size() != dim) {
        throw std::invalid_argument("cma_init: m0 has length " + std::to_string(m0.size()) +
                                    ", expected " + std::to_string(dim));
    }

    CmaState s;
    s.dim = dim;
    s.lambda = lambda;
    s.mu = lambda / 2;
    s.mean = m0.empty() ? std::vector<double>(dim, 0.0) : m0;
    s.sigma = sigma0;
    s.C = MatD::identity(dim);
    s.p_sigma.assign(dim, 0.0);
    s.p_c.assign(dim, 0.0);

    s.weights.resize(s.mu);
    double wsum = 0.0;
    for (std::size_t i = 0; i < s.mu; ++i) {
        s.weights[i] = std::log(double(s.mu) + 0.5) - std::log(double(i + 1));
        wsum += s.weights[i];
    }
    double wsq = 0.0;
    for (double& w : s.weights) {
        w /= wsum;
        wsq += w * w;
    }
    s.mu_eff = 1.0 / wsq;

    const double n = double(dim);
    s.c_sigma = (s.mu_eff + 2.0) / (n + s.mu_eff + 5.0);
    s.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mu_eff - 1.0) / (n + 1.0)) - 1.0) +
                s.c_sigma;
    s.c_c = (4.0 + s.mu_eff / n) / (n + 4.0 + 2.0 * s.mu_eff / n);
    s.c1 = 2.0 / ((n + 1.3) * (n + 1.3) + s.mu_eff);
    s.c_mu = std::min(1.0 - s.c1, 2.0 * (s.mu_eff - 2.0 + 1.0 / s.mu_eff) /
                                      ((n + 2.0) * (n + 2.0) + s.mu_eff));
    s.chi_n = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

    s.eigen_interval =
        std::max<std::size_t>(1, std::size_t(1.0 / ((s.c1 + s.c_mu) * n * 10.0)));
    s.eig_basis = MatD::identity(dim);
    s.eig_scale.assign(dim, 1.0);
    s.eigen_age = 0;
    s.rng = RngStream(seed);
    return s;
}

std::vector<IntrinsicVector> cma_ask(CmaState& s) {
    ensure_eigen(s);
    std::vector<IntrinsicVector> out(s.lambda);
    for (auto& cand : out) {
        const std::vector<double> n = s.rng.gaussian_vector(s.dim);
        cand.values.resize(s.dim);
        for (std::size_t i = 0; i < s.dim; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < s.dim; ++k) {
                acc += s.eig_basis.at(i, k) * s.eig_scale[k] * n[k];
            }
            cand.values[i] = s.mean[i] + s.sigma * acc;
        }
    }
    return out;
}

void cma_tell(CmaState& s, const std::vector<IntrinsicVector>& candidates,
              const std::vector<double>& fitnesses) {
    if (candidates.size() != s.lambda || fitnesses.size() != s.lambda) {
        throw std::invalid_argument("cma_tell: need exactly lambda candidates and fitnesses");
    }
    for (double f : fitnesses) {
        if (std::isnan(f)) throw std::invalid_argument("cma_tell: fitness must not be NaN");
    }
    for (const auto& c : candidates) {
        if (c.dim() != s.dim) throw std::invalid_argument("cma_tell: candidate dim mismatch");
    }

    // Ascending fitness, ties broken by candidate index.
    std::vector<std::size_t> order(s.lambda);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (fitnesses[a] != fitnesses[b]) return fitnesses[a] < fitnesses[b];
        return a < b;
    });

    const std::size_t n = s.dim;
    const std::vector<double> m_old = s.mean;

    // y_i = (x_i - m_old) / sigma for the mu best; y_w = sum w_i y_i.
    MatD y(s.mu, n);
    std::vector<double> y_w(n, 0.0);
    for (std::size_t r = 0; r < s.mu; ++r) {
        const auto& x = candidates[order[r]].values;
        for (std::size_t i = 0; i < n; ++i) {
            const double yi = (x[i] - m_old[i]) / s.sigma;
            y.at(r, i) = yi;
            y_w[i] += s.weights[r] * yi;
        }
    }

    for (std::size_t i = 0; i < n; ++i) s.mean[i] = m_old[i] + s.sigma * y_w[i];

    // p_sigma update needs C^(-1/2) y_w = B diag(1/scale) B^T y_w, using the
    // same basis that produced the samples.
    std::vector<double> tmp(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += s.eig_basis.at(i, k) * y_w[i];
        tmp[k] = acc / s.eig_scale[k];
    }
    std::vector<double> c_inv_sqrt_yw(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) acc += s.eig_basis.at(i, k) * tmp[k];
        c_inv_sqrt_yw[i] = acc;
    }

    const double ps_factor = std::sqrt(s.c_sigma * (2.0 - s.c_sigma) * s.mu_eff);
    double ps_norm_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s.p_sigma[i] = (1.0 - s.c_sigma) * s.p_sigma[i] + ps_factor * c_inv_sqrt_yw[i];
        ps_norm_sq += s.p_sigma[i] * s.p_sigma[i];
    }
    const double ps_norm = std::sqrt(ps_norm_sq);

    const double g = double(s.generation + 1);
    const double expected = std::sqrt(1.0 - std::pow(1.0 - s.c_sigma, 2.0 * g));
    const bool h_sigma = ps_norm / expected < (1.4 + 2.0 / (double(n) + 1.0)) * s.chi_n;

    const double pc_factor = std::sqrt(s.c_c * (2.0 - s.c_c) * s.mu_eff);
    for (std::size_t i = 0; i < n; ++i) {
        s.p_c[i] = (1.0 - s.c_c) * s.p_c[i] + (h_sigma ? pc_factor * y_w[i] : 0.0);
    }

    // C <- (1 - c1 - cmu) C + c1 (p_c p_c^T + delta(h) C) + cmu sum w_i y_i y_i^T
    const double delta_h = h_sigma ? 0.0 : s.c_c * (2.0 - s.c_c);
    const double keep = 1.0 - s.c1 - s.c_mu + s.c1 * delta_h;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double rank_mu = 0.0;
            for (std::size_t r = 0; r < s.mu; ++r) {
                rank_mu += s.weights[r] * y.at(r, i) * y.at(r, j);
            }
            const double v = keep * s.C.at(i, j) + s.c1 * s.p_c[i] * s.p_c[j] +
                             s.c_mu * rank_mu;
            s.C.at(i, j) = v;
            s.C.at(j, i) = v;
        }
    }

    s.sigma *= std::exp((s.c_sigma / s.d_sigma) * (ps_norm / s.chi_n - 1.0));
    ++s.generation;
    ++s.eigen_age;
}

RandomSearchState random_search_init(std::size_t dim, double sigma, uint64_t seed) {
    if (dim < 1) throw std::invalid_argument("random_search_init: dim must be at least 1");
    if (!(sigma > 0.0)) throw std::invalid_argument("random_search_init: sigma must be positive");
    RandomSearchState s;
    s.dim = dim;
    s.sigma = sigma;
    s.rng = RngStream(seed);
    return s;
}

IntrinsicVector random_search_propose(RandomSearchState& s) {
    IntrinsicVector z;
    z.values = s.rng.gaussian_vector(s.dim);
    for (double& v : z.values) v *= s.sigma;
    return z;
}

void random_search_update(RandomSearchState& s, const IntrinsicVector& z, double fitness) {
    if (std::isnan(fitness)) {
        throw std::invalid_argument("random_search_update: fitness must not be NaN");
    }
    ++s.evals;
    if (fitness < s.best_fitness) {
        s.best_fitness = fitness;
        s.best_z = z.values;
    }
}

double random_search_step(RandomSearchState& s,
                          const std::function<double(const IntrinsicVector&)>& evaluate) {
    const IntrinsicVector z = random_search_propose(s);
    random_search_update(s, z, evaluate(z));
    return s.best_fitness;
}

}  // namespace cliptune
