#include "reinjectr/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "reinjectr/parallel.hpp"

namespace reinjectr {

Matrix cosine_kernel(const Matrix& a, double eps) {
    require(a.rows >= 2, "cosine_kernel: need at least 2 rows");
    if (eps <= 0.0) throw invalid_input("cosine_kernel: eps must be > 0");
    if (!a.all_finite()) throw invalid_input("cosine_kernel: non-finite input");

    Matrix gram = matmul_nt(a, a);
    std::vector<double> norms(a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) norms[i] = std::sqrt(gram(i, i));

    Matrix k(a.rows, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.rows; ++j)
            k(i, j) = gram(i, j) / (norms[i] * norms[j] + eps);
    return k;
}

Matrix center_kernel(const Matrix& k) {
    require(k.rows == k.cols, "center_kernel: matrix must be square");
    const std::size_t n = k.rows;
    std::vector<double> row_mean(n, 0.0), col_mean(n, 0.0);
    double grand = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            row_mean[i] += k(i, j);
            col_mean[j] += k(i, j);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        grand += row_mean[i];
        row_mean[i] /= static_cast<double>(n);
    }
    for (std::size_t j = 0; j < n; ++j) col_mean[j] /= static_cast<double>(n);
    grand /= static_cast<double>(n) * static_cast<double>(n);

    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out(i, j) = k(i, j) - row_mean[i] - col_mean[j] + grand;
    return out;
}

std::vector<std::vector<std::size_t>> knn_sets(const Matrix& k_centered, std::size_t k) {
    require(k_centered.rows == k_centered.cols, "knn_sets: kernel must be square");
    const std::size_t n = k_centered.rows;
    if (k < 1 || k > n - 1) throw invalid_input("knn_sets: k out of range");

    std::vector<std::vector<std::size_t>> sets(n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) order.push_back(j);
        const double* row = k_centered.row(i);
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [row](std::size_t a, std::size_t b) {
                              if (row[a] != row[b]) return row[a] > row[b];
                              return a < b;  // tie-break toward the smaller index
                          });
        sets[i].assign(order.begin(), order.begin() + k);
        std::sort(sets[i].begin(), sets[i].end());
    }
    return sets;
}

namespace {

std::size_t overlap_count(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::size_t count = 0, i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] == b[j]) {
            ++count;
            ++i;
            ++j;
        } else if (a[i] < b[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return count;
}

}  // namespace

double cknna(const Matrix& a, const Matrix& b, const CknnaConfig& cfg) {
    require(a.rows == b.rows, "cknna: token counts differ");
    require(a.rows >= cfg.k + 1, "cknna: need at least k+1 tokens");

    auto sets_a = knn_sets(center_kernel(cosine_kernel(a, cfg.eps)), cfg.k);
    auto sets_b = knn_sets(center_kernel(cosine_kernel(b, cfg.eps)), cfg.k);

    std::size_t total = 0;
    for (std::size_t i = 0; i < sets_a.size(); ++i)
        total += overlap_count(sets_a[i], sets_b[i]);
    return static_cast<double>(total) /
           (static_cast<double>(a.rows) * static_cast<double>(cfg.k));
}

DriftReport drift_report(const FeatureStack& stack, const CknnaConfig& cfg,
                         std::size_t pca_dims) {
    stack.validate();
    require(stack.layer_count() >= 2, "drift_report: need at least 2 layers");
    require(stack.tokens() >= cfg.k + 1, "drift_report: need at least k+1 tokens");

    const std::size_t layers = stack.layer_count();
    DriftReport report;
    report.k = cfg.k;
    report.kernel_eps = cfg.eps;
    report.pca_dims = pca_dims;
    report.layer_ids.resize(layers);
    report.cknna_scores.resize(layers);

    parallel_for(layers, [&](std::size_t l) {
        report.cknna_scores[l] = cknna(stack.text[0], stack.text[l], cfg);
    });
    for (std::size_t l = 0; l < layers; ++l) report.layer_ids[l] = static_cast<int>(l);

    // Shared basis: PCA fitted once on all layers' tokens, equal weight
    // per token, then each layer projected into it.
    Matrix all(layers * stack.tokens(), stack.width());
    for (std::size_t l = 0; l < layers; ++l)
        std::copy(stack.text[l].data.begin(), stack.text[l].data.end(),
                  all.data.begin() + l * stack.text[l].data.size());
    PcaModel shared = pca_fit(all, pca_dims);

    report.pca_coords.resize(layers);
    report.pca_centroids.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        report.pca_coords[l] = pca_project(shared, stack.text[l]);
        std::vector<double> centroid(pca_dims, 0.0);
        const Matrix& coords = report.pca_coords[l];
        for (std::size_t i = 0; i < coords.rows; ++i)
            for (std::size_t q = 0; q < pca_dims; ++q) centroid[q] += coords(i, q);
        for (double& c : centroid) c /= static_cast<double>(coords.rows);
        report.pca_centroids[l] = std::move(centroid);
    }
    return report;
}

}  // namespace reinjectr
