#pragma once

#include "pqnet/tensor.hpp"

namespace pqnet {

/// Singular values below kRankTolerance * sigma_max are treated as zero.
inline constexpr double kRankTolerance = 1e-6;

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
struct SymmetricEigen {
    DTensor values;   // [d]
    DTensor vectors;  // [d x d], column i is the eigenvector of values[i]
};

SymmetricEigen symmetric_eigen(const DTensor& sym);

/// Orthogonal projector a⁺a onto the row space of `a`, built from the
/// Gram matrix aᵀa.
DTensor projector_from_gram(const DTensor& g, double rtol = kRankTolerance);

/// Minimum-norm least-squares solution of a·x ≈ a·b, i.e. a⁺a·b.
/// `b` is a d-vector or a d×r matrix; the result has the same shape.
DTensor lstsq_min_norm(const DTensor& a, const DTensor& b, double rtol = kRankTolerance);

}  // namespace pqnet
