#include "dfm/delegate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "dfm/errors.hpp"

namespace dfm {

SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& input, double rel_tol, int max_sweeps) {
    const Eigen::Index k = input.rows();
    if (input.cols() != k) throw DataError("jacobi_eigen needs a square matrix");
    Eigen::MatrixXd a = 0.5 * (input + input.transpose());
    Eigen::MatrixXd v = Eigen::MatrixXd::Identity(k, k);
    const double threshold = rel_tol * a.norm();

    SymmetricEigen out;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < k; ++p)
            for (Eigen::Index q = p + 1; q < k; ++q) off = std::max(off, std::abs(a(p, q)));
        if (off <= threshold) break;
        ++out.sweeps;

        for (Eigen::Index p = 0; p < k; ++p) {
            for (Eigen::Index q = p + 1; q < k; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= threshold) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (Eigen::Index r = 0; r < k; ++r) {
                    const double arp = a(r, p), arq = a(r, q);
                    a(r, p) = c * arp - s * arq;
                    a(r, q) = s * arp + c * arq;
                }
                for (Eigen::Index r = 0; r < k; ++r) {
                    const double apr = a(p, r), aqr = a(q, r);
                    a(p, r) = c * apr - s * aqr;
                    a(q, r) = s * apr + c * aqr;
                }
                for (Eigen::Index r = 0; r < k; ++r) {
                    const double vrp = v(r, p), vrq = v(r, q);
                    v(r, p) = c * vrp - s * vrq;
                    v(r, q) = s * vrp + c * vrq;
                }
            }
        }
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });
    out.values.resize(k);
    out.vectors.resize(k, k);
    for (Eigen::Index j = 0; j < k; ++j) {
        out.values[j] = a(order[j], order[j]);
        out.vectors.col(j) = v.col(order[j]);
    }
    return out;
}

namespace {

// Two rounds of classical projection against the first `used` columns of q.
void project_out(Eigen::Ref<Eigen::VectorXd> x, const Eigen::MatrixXd& q, Eigen::Index used) {
    for (int round = 0; round < 2; ++round) {
        if (used == 0) return;
        const Eigen::VectorXd coeff = q.leftCols(used).transpose() * x;
        x -= q.leftCols(used) * coeff;
    }
}

}  // namespace

Eigen::MatrixXd orthonormal_complement(const Eigen::MatrixXd& basis, Eigen::Index count, Rng& rng) {
    const Eigen::Index n = basis.rows();
    if (basis.cols() + count > n) throw DataError("orthonormal complement larger than the space");
    Eigen::MatrixXd all(n, basis.cols() + count);
    all.leftCols(basis.cols()) = basis;
    Eigen::VectorXd x(n);
    for (Eigen::Index j = basis.cols(); j < all.cols(); ++j) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000) throw NumericError("Gram-Schmidt failed to find an independent direction");
            for (Eigen::Index i = 0; i < n; ++i) x[i] = uniform(rng, -1.0, 1.0);
            x.normalize();
            project_out(x, all, j);
            const double norm = x.norm();
            if (norm < 1e-8) continue;
            all.col(j) = x / norm;
            break;
        }
    }
    return all.rightCols(count);
}

Eigen::MatrixXd update_delegate(const Eigen::MatrixXd& m, std::uint64_t seed) {
    const Eigen::Index k = m.rows(), n = m.cols();
    if (k > n - 1) throw DataError("insufficient features for de-correlated delegate (k > n - 1)");

    // row-centered copy: M J with J = I - 11^T / n
    const Eigen::MatrixXd centered = m.colwise() - m.rowwise().mean();
    const SymmetricEigen eig = jacobi_eigen(centered * centered.transpose());

    const double largest = k > 0 ? eig.values[0] : 0.0;
    const double rank_tol =
        static_cast<double>(std::max(k, n)) * std::numeric_limits<double>::epsilon() * std::max(largest, 0.0);
    Eigen::Index rank = 0;
    while (rank < k && eig.values[rank] > rank_tol) ++rank;

    // Columns: [1/sqrt(n) | Q | Q_hat]. Q = centered^T P Sigma^{-1}, then
    // re-orthonormalized to remove rounding drift.
    Eigen::MatrixXd right(n, 1 + k);
    right.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
    for (Eigen::Index j = 0; j < rank; ++j) {
        Eigen::VectorXd q = centered.transpose() * eig.vectors.col(j) / std::sqrt(eig.values[j]);
        project_out(q, right, 1 + j);
        right.col(1 + j) = q.normalized();
    }
    Rng rng(seed);
    if (rank < k) right.rightCols(k - rank) = orthonormal_complement(right.leftCols(1 + rank), k - rank, rng);

    return std::sqrt(static_cast<double>(n)) * eig.vectors * right.rightCols(k).transpose();
}

Eigen::MatrixXd quantization_rotation(const Eigen::MatrixXd& v, int restarts, int iters, Rng& rng) {
    const Eigen::Index k = v.rows();
    Eigen::MatrixXd best = Eigen::MatrixXd::Identity(k, k);
    double best_l1 = v.lpNorm<1>();
    for (int r = 1; r < restarts + 1; ++r) {
        Eigen::MatrixXd g(k, k);
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = uniform(rng, -1.0, 1.0);
        Eigen::MatrixXd rot = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
        for (int it = 0; it < iters; ++it) {
            const Eigen::MatrixXd b = (rot * v).unaryExpr([](double x) { return x >= 0.0 ? 1.0 : -1.0; });
            // maximize tr(B^T R V) = tr(R V B^T)
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(v * b.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);
            rot = svd.matrixV() * svd.matrixU().transpose();
        }
        const double l1 = (rot * v).lpNorm<1>();
        if (l1 > best_l1) {
            best_l1 = l1;
            best = rot;
        }
    }
    return best;
}

DelegateViolation delegate_violation(const Eigen::MatrixXd& d) {
    const auto n = static_cast<double>(d.cols());
    DelegateViolation v;
    if (d.size() == 0) return v;
    v.balance = d.rowwise().sum().cwiseAbs().maxCoeff();
    const Eigen::MatrixXd gram = d * d.transpose() - n * Eigen::MatrixXd::Identity(d.rows(), d.rows());
    v.decorrelation = gram.cwiseAbs().maxCoeff();
    return v;
}

bool is_feasible_delegate(const Eigen::MatrixXd& d) {
    const auto n = static_cast<double>(d.cols());
    const auto v = delegate_violation(d);
    return v.balance <= 1e-8 * std::sqrt(n) && v.decorrelation <= 1e-6 * n;
}

}  // namespace dfm
