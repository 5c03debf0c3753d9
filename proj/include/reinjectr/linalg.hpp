#pragma once

#include <cstdint>
#include <vector>

#include "reinjectr/matrix.hpp"

namespace reinjectr {

// Thin SVD a = u * diag(sigma) * vt with a deterministic sign convention:
// each U column is flipped so that its largest-magnitude entry (ties broken
// toward the smaller row index) is positive.
struct SvdResult {
    Matrix u;                   // m x r
    std::vector<double> sigma;  // r, descending, non-negative
    Matrix vt;                  // r x n
};

// Per-token (per-row) mean and std over the feature dimension.
// std = sqrt(population variance + eps), so std > 0 always and
// layer_norm followed by restore_stats with the same stats is the identity.
struct TokenStats {
    std::vector<double> mean;
    std::vector<double> std;
};

struct PcaModel {
    std::vector<double> mean;                // length d
    Matrix components;                       // q x d, orthonormal rows
    std::vector<double> explained_variance;  // length q, descending
};

SvdResult svd(const Matrix& a);

TokenStats token_stats(const Matrix& t, double eps);
Matrix layer_norm(const Matrix& t, double eps);
// Inverse of layer_norm given the stats of the original matrix:
// out[i][j] = t[i][j] * stats.std[i] + stats.mean[i].
Matrix restore_stats(const Matrix& t, const TokenStats& stats);

PcaModel pca_fit(const Matrix& x, std::size_t q);
Matrix pca_project(const PcaModel& m, const Matrix& x);

// Eigen-backed products; shapes validated.
Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix transpose(const Matrix& a);

double frobenius_norm(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double dot_flat(const Matrix& a, const Matrix& b);
double cosine_flat(const Matrix& a, const Matrix& b);

}  // namespace reinjectr
