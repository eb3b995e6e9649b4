#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "dfm/rng.hpp"

namespace dfm {

struct SymmetricEigen {
    Eigen::VectorXd values;   // descending
    Eigen::MatrixXd vectors;  // column j pairs with values[j]
    int sweeps = 0;
};

// Cyclic Jacobi rotations. Stops once every off-diagonal magnitude is below
// rel_tol * |A|_F.
SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& a, double rel_tol = 1e-12, int max_sweeps = 100);

// Appends `count` orthonormal columns orthogonal to the columns of `basis`
// (assumed orthonormal). Random candidates are projected twice; candidates
// whose residual norm falls below 1e-8 are redrawn.
Eigen::MatrixXd orthonormal_complement(const Eigen::MatrixXd& basis, Eigen::Index count, Rng& rng);

// Closed-form maximizer of tr(M^T D) subject to D 1 = 0 and D D^T = n I, for a
// k x n matrix M (the binary codes, or real embeddings during warm start).
// Requires k <= n - 1; throws DataError otherwise.
Eigen::MatrixXd update_delegate(const Eigen::MatrixXd& m, std::uint64_t seed);

// Orthogonal k x k rotation R that locally maximizes |R V|_1, i.e. makes R V
// as close to its own sign pattern as possible. Alternates B = sgn(R V) with
// the Procrustes solution for R, from `restarts` random starting rotations,
// `iters` alternations each; keeps the best start.
Eigen::MatrixXd quantization_rotation(const Eigen::MatrixXd& v, int restarts, int iters, Rng& rng);

struct DelegateViolation {
    double balance = 0.0;       // |D 1|_inf
    double decorrelation = 0.0; // |D D^T - n I|_max
};

DelegateViolation delegate_violation(const Eigen::MatrixXd& d);

// Within |D1|_inf <= 1e-8 sqrt(n) and |DD^T - nI|_max <= 1e-6 n.
bool is_feasible_delegate(const Eigen::MatrixXd& d);

}  // namespace dfm
