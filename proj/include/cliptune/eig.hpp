#pragma once

#include <utility>
#include <vector>

#include "cliptune/matrix.hpp"

namespace cliptune {

struct EigResult {
    std::vector<double> eigenvalues;  // ascending
    MatD eigenvectors;                // columns, orthonormal; s = V diag(w) V^T
};

// Symmetric eigendecomposition by cyclic Jacobi rotations. Input must be
// symmetric within 1e-9. Throws if the sweep limit is hit before the
// off-diagonal mass converges.
EigResult sym_eig(const MatD& s);

}  // namespace cliptune
