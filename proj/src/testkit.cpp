#include "devsafe/testkit.hpp"

#include <cmath>
#include <stdexcept>

namespace devsafe::testkit {

OracleReport make_report(const std::string& quantity, double reference,
                         double candidate, double rel_tolerance) {
    OracleReport r;
    r.quantity = quantity;
    r.reference = reference;
    r.candidate = candidate;
    r.abs_error = std::abs(reference - candidate);
    double denom = std::max(std::abs(reference), std::abs(candidate));
    r.rel_error = denom > 0.0 ? r.abs_error / denom : 0.0;
    r.tolerance = rel_tolerance;
    r.pass = r.rel_error <= rel_tolerance;
    return r;
}

std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& point, double step) {
    std::vector<double> grad(point.size());
    std::vector<double> probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + step;
        double hi = f(probe);
        probe[i] = point[i] - step;
        double lo = f(probe);
        probe[i] = point[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    return grad;
}

double dense_sigma_min(const std::vector<double>& matrix, int rows, int cols) {
    if (rows < 1 || cols < 1 ||
        matrix.size() != static_cast<std::size_t>(rows) * cols)
        throw std::invalid_argument("dense_sigma_min: bad dimensions");
    for (double v : matrix)
        if (!std::isfinite(v))
            throw std::invalid_argument("dense_sigma_min: non-finite entry");

    // Work on columns of A (or of A^T when rows < cols so that rows >= cols).
    int r = rows, c = cols;
    bool transposed = rows < cols;
    if (transposed) std::swap(r, c);
    std::vector<std::vector<double>> col(c, std::vector<double>(r));
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            double v = matrix[static_cast<std::size_t>(i) * cols + j];
            if (transposed)
                col[i][j] = v;
            else
                col[j][i] = v;
        }

    auto dot = [r](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (int i = 0; i < r; ++i) s += a[i] * b[i];
        return s;
    };

    const double tol = 1e-12;
    const int max_sweeps = 120;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < c - 1; ++p) {
            for (int q = p + 1; q < c; ++q) {
                double app = dot(col[p], col[p]);
                double aqq = dot(col[q], col[q]);
                double apq = dot(col[p], col[q]);
                double denom = std::sqrt(app * aqq);
                if (denom > 0.0) off = std::max(off, std::abs(apq) / denom);
                if (apq == 0.0) continue;
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double cs = 1.0 / std::sqrt(1.0 + t * t);
                double sn = cs * t;
                for (int i = 0; i < r; ++i) {
                    double vp = col[p][i], vq = col[q][i];
                    col[p][i] = cs * vp - sn * vq;
                    col[q][i] = sn * vp + cs * vq;
                }
            }
        }
        if (off < tol) break;
    }

    double smin = std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j) smin = std::min(smin, std::sqrt(dot(col[j], col[j])));
    return smin;
}

double compensated_sum(const std::vector<double>& values) {
    double sum = 0.0, comp = 0.0;
    for (double v : values) {
        double t = sum + v;
        if (std::abs(sum) >= std::abs(v))
            comp += (sum - t) + v;
        else
            comp += (v - t) + sum;
        sum = t;
    }
    return sum + comp;
}

double max_rel_grad_error(const std::function<double(const std::vector<double>&)>& f,
                          const std::vector<double>& point,
                          const std::vector<double>& candidate_grad,
                          double step, double floor) {
    std::vector<double> fd = finite_diff_grad(f, point, step);
    if (fd.size() != candidate_grad.size())
        throw std::invalid_argument("max_rel_grad_error: gradient size mismatch");
    // Norm-wise comparison: per-coordinate ratios blow up on analytically-zero
    // coordinates where central differences return pure round-off.
    double diff_sq = 0.0, fd_sq = 0.0, cand_sq = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
        double d = fd[i] - candidate_grad[i];
        diff_sq += d * d;
        fd_sq += fd[i] * fd[i];
        cand_sq += candidate_grad[i] * candidate_grad[i];
    }
    double denom = std::max({std::sqrt(fd_sq), std::sqrt(cand_sq), floor});
    return std::sqrt(diff_sq) / denom;
}

}  // namespace devsafe::testkit
