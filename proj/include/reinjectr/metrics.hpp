#pragma once

#include <cstdint>
#include <vector>

#include "reinjectr/feature_stack.hpp"
#include "reinjectr/linalg.hpp"

namespace reinjectr {

struct CknnaConfig {
    std::size_t k = 10;
    double eps = 1e-8;  // cosine-kernel denominator guard
};

// Per-layer CKNNA against layer 0 plus shared-PCA trajectory coordinates.
struct DriftReport {
    std::vector<int> layer_ids;
    std::vector<double> cknna_scores;       // one per layer, in [0,1]
    std::vector<Matrix> pca_coords;         // one N x q matrix per layer
    std::vector<std::vector<double>> pca_centroids;  // one length-q vector per layer
    std::size_t k = 10;
    double kernel_eps = 1e-8;
    std::size_t pca_dims = 2;
};

// K[i][j] = <a_i, a_j> / (|a_i| |a_j| + eps)
Matrix cosine_kernel(const Matrix& a, double eps);

// H K H with H = I - (1/N) 11^T; row and column sums of the result are ~0.
Matrix center_kernel(const Matrix& k);

// For each row, the indices of the k largest off-diagonal entries, ties
// broken toward the smaller index. Returned sets are sorted ascending.
std::vector<std::vector<std::size_t>> knn_sets(const Matrix& k_centered, std::size_t k);

// Mean over tokens of |N_k^A(i) ∩ N_k^B(i)| / k on centered cosine kernels.
double cknna(const Matrix& a, const Matrix& b, const CknnaConfig& cfg);

DriftReport drift_report(const FeatureStack& stack, const CknnaConfig& cfg,
                         std::size_t pca_dims = 2);

}  // namespace reinjectr
