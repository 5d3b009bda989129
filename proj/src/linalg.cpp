#include "pqnet/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace pqnet {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

SymmetricEigen symmetric_eigen(const DTensor& sym) {
    const std::size_t d = sym.rows();
    if (sym.cols() != d) throw ShapeError("symmetric_eigen: matrix is not square");
    Eigen::Map<const RowMatrix> m(sym.data().data(), d, d);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m.cast<double>());
    if (solver.info() != Eigen::Success) throw Error("symmetric_eigen: no convergence");

    SymmetricEigen out{DTensor({d}), DTensor({d, d})};
    for (std::size_t i = 0; i < d; ++i) {
        out.values[i] = solver.eigenvalues()(static_cast<Eigen::Index>(i));
        for (std::size_t j = 0; j < d; ++j) {
            out.vectors(j, i) =
                solver.eigenvectors()(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
        }
    }
    return out;
}

DTensor projector_from_gram(const DTensor& g, double rtol) {
    const std::size_t d = g.rows();
    const auto eig = symmetric_eigen(g);
    const double lambda_max = d ? std::max(0.0, eig.values[d - 1]) : 0.0;
    // sigma_i < rtol * sigma_max  <=>  lambda_i < rtol^2 * lambda_max
    const double cutoff = rtol * rtol * lambda_max;
    DTensor p({d, d});
    if (lambda_max <= 0.0) return p;
    for (std::size_t e = 0; e < d; ++e) {
        if (eig.values[e] <= cutoff) continue;
        for (std::size_t i = 0; i < d; ++i) {
            const double vi = eig.vectors(i, e);
            for (std::size_t j = 0; j < d; ++j) p(i, j) += vi * eig.vectors(j, e);
        }
    }
    return p;
}

DTensor lstsq_min_norm(const DTensor& a, const DTensor& b, double rtol) {
    const std::size_t d = a.cols();
    if (a.rows() == 0 || d == 0) throw ArgumentError("lstsq_min_norm: empty matrix");
    const bool is_vector = b.rank() == 1;
    if (b.dim(0) != d || b.rank() > 2) {
        throw ShapeError("lstsq_min_norm: rhs " + shape_str(b.shape()) + " incompatible with " +
                         shape_str(a.shape()));
    }
    const DTensor p = projector_from_gram(gram(a), rtol);
    const DTensor rhs = is_vector ? b.reshaped({d, 1}) : b;
    DTensor x = matmul(p, rhs);
    return is_vector ? x.reshaped({d}) : x;
}

}  // namespace pqnet
