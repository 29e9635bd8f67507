#pragma once

#include <functional>
#include <string>
#include <vector>

// Independent numerical oracles used by tests. Everything here operates on
// primitive arrays and callables only, sharing no code with the library
// implementations it cross-checks.
namespace devsafe::testkit {

struct OracleReport {
    std::string quantity;
    double reference = 0.0;
    double candidate = 0.0;
    double abs_error = 0.0;
    double rel_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

OracleReport make_report(const std::string& quantity, double reference,
                         double candidate, double rel_tolerance);

// Central finite differences per coordinate.
std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& point, double step = 1e-5);

// Smallest singular value of a rows x cols matrix (row-major), by one-sided
// Jacobi orthogonalization of the columns to 1e-12 off-diagonal residual.
double dense_sigma_min(const std::vector<double>& matrix, int rows, int cols);

// Neumaier compensated summation.
double compensated_sum(const std::vector<double>& values);

// Largest relative error between a candidate gradient and the central
// finite-difference gradient of f (coordinates with both sides tiny are
// compared absolutely). Convenience wrapper used across the gradient suites.
double max_rel_grad_error(const std::function<double(const std::vector<double>&)>& f,
                          const std::vector<double>& point,
                          const std::vector<double>& candidate_grad,
                          double step = 1e-5, double floor = 1e-8);

}  // namespace devsafe::testkit
