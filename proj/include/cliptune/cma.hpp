#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "cliptune/matrix.hpp"
#include "cliptune/prompting.hpp"
#include "cliptune/rng.hpp"

namespace cliptune {

// Rank-based evolutionary search over R^dim with the standard mean /
// step-size / covariance adaptation. Minimization convention: smaller
// fitness is better.
struct CmaState {
    std::size_t dim = 0;
    std::size_t lambda = 0;  // population per generation
    std::size_t mu = 0;      // parents, lambda / 2

    std::vector<double> mean;
    double sigma = 1.0;
    MatD C;
    std::vector<double> p_sigma;
    std::vector<double> p_c;

    std::vector<double> weights;  // mu recombination weights, sum 1
    double mu_eff = 0.0;
    double c_sigma = 0.0, d_sigma = 0.0;
    double c_c = 0.0, c1 = 0.0, c_mu = 0.0;
    double chi_n = 0.0;  // E ||N(0, I)||

    std::size_t generation = 0;

    // Eigendecomposition of C, refreshed lazily every eigen_interval
    // generations (sampling tolerates a slightly stale basis).
    MatD eig_basis;                 // columns are eigenvectors
    std::vector<double> eig_scale;  // sqrt eigenvalues
    std::size_t eigen_interval = 1;
    std::size_t eigen_age = 0;      // generations since last decomposition
    std::size_t repair_count = 0;   // times eigenvalue flooring fired

    RngStream rng{0};
};

// C = identity, paths zero, weights proportional to ln(mu + 1/2) - ln(i).
// Empty m0 means the origin.
CmaState cma_init(std::size_t dim, std::size_t lambda, double sigma0,
                  const std::vector<double>& m0, uint64_t seed);

// lambda candidates m + sigma * B * (scale ∘ n), n standard normal.
std::vector<IntrinsicVector> cma_ask(CmaState& state);

// Rank candidates by (fitness, index) ascending and apply the mean,
// evolution-path, covariance and step-size updates.
void cma_tell(CmaState& state, const std::vector<IntrinsicVector>& candidates,
              const std::vector<double>& fitnesses);

// Pure random search baseline: fresh draws from N(0, sigma^2 I), keep the
// argmin.
struct RandomSearchState {
    std::size_t dim = 0;
    double sigma = 1.0;
    std::vector<double> best_z;
    double best_fitness = std::numeric_limits<double>::infinity();
    std::size_t evals = 0;
    RngStream rng{0};
};

RandomSearchState random_search_init(std::size_t dim, double sigma, uint64_t seed);
IntrinsicVector random_search_propose(RandomSearchState& state);
void random_search_update(RandomSearchState& state, const IntrinsicVector& z, double fitness);

// Propose, evaluate, keep the better of old best and new draw; returns the
// updated best fitness.
double random_search_step(RandomSearchState& state,
                          const std::function<double(const IntrinsicVector&)>& evaluate);

}  // namespace cliptune
