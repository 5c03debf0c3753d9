#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "reinjectr/feature_stack.hpp"
#include "reinjectr/linalg.hpp"
#include "reinjectr/probe.hpp"

namespace testutil {

using reinjectr::Matrix;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

// Random orthogonal matrix via the polar factor of a Gaussian matrix.
inline Matrix random_orthogonal(std::size_t n, std::uint64_t seed) {
    Matrix g = random_matrix(n, n, seed);
    reinjectr::SvdResult dec = reinjectr::svd(g);
    return reinjectr::matmul(dec.u, dec.vt);
}

inline std::vector<double> ranks_with_ties(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> rx = ranks_with_ties(x);
    std::vector<double> ry = ranks_with_ties(y);
    double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
    double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
    double num = 0.0, dx = 0.0, dy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    return num / std::sqrt(dx * dy);
}

// Independent CKNNA oracle: naive kernels, explicit H K H centering, full
// sorts for neighbor selection. Shares only the published definition with
// the library path.
inline double cknna_bruteforce(const Matrix& a, const Matrix& b, std::size_t k, double eps) {
    const std::size_t n = a.rows;
    auto kernel = [eps](const Matrix& x) {
        Matrix out(x.rows, x.rows);
        for (std::size_t i = 0; i < x.rows; ++i) {
            for (std::size_t j = 0; j < x.rows; ++j) {
                double dot = 0.0, ni = 0.0, nj = 0.0;
                for (std::size_t c = 0; c < x.cols; ++c) {
                    dot += x(i, c) * x(j, c);
                    ni += x(i, c) * x(i, c);
                    nj += x(j, c) * x(j, c);
                }
                out(i, j) = dot / (std::sqrt(ni) * std::sqrt(nj) + eps);
            }
        }
        return out;
    };
    auto center = [](const Matrix& kmat) {
        const std::size_t nn = kmat.rows;
        Matrix h(nn, nn, -1.0 / static_cast<double>(nn));
        for (std::size_t i = 0; i < nn; ++i) h(i, i) += 1.0;
        return reinjectr::matmul(reinjectr::matmul(h, kmat), h);
    };
    auto neighbor_sets = [](const Matrix& kmat, std::size_t kk) {
        std::vector<std::vector<std::size_t>> sets(kmat.rows);
        for (std::size_t i = 0; i < kmat.rows; ++i) {
            std::vector<std::size_t> idx;
            for (std::size_t j = 0; j < kmat.rows; ++j)
                if (j != i) idx.push_back(j);
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
                if (kmat(i, x) != kmat(i, y)) return kmat(i, x) > kmat(i, y);
                return x < y;
            });
            sets[i].assign(idx.begin(), idx.begin() + kk);
            std::sort(sets[i].begin(), sets[i].end());
        }
        return sets;
    };

    auto sa = neighbor_sets(center(kernel(a)), k);
    auto sb = neighbor_sets(center(kernel(b)), k);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> inter;
        std::set_intersection(sa[i].begin(), sa[i].end(), sb[i].begin(), sb[i].end(),
                              std::back_inserter(inter));
        total += inter.size();
    }
    return static_cast<double>(total) / (static_cast<double>(n) * static_cast<double>(k));
}

// Synthetic drifting stack: every token sits on its category centroid and
// layer l adds noise of scale per_layer_noise * l. Layer 0 is the clean
// baseline, so recoverability decays with depth by construction.
struct DriftingStack {
    reinjectr::FeatureStack stack;
    reinjectr::LabeledTokenCorpus corpus;
};

inline DriftingStack make_drifting_stack(std::size_t tokens, std::size_t layers, std::size_t d,
                                         double per_layer_noise, std::size_t test_count,
                                         std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Matrix centroids(reinjectr::kCategoryCount, d);
    for (double& v : centroids.data) v = gauss(rng);
    for (std::size_t c = 0; c < centroids.rows; ++c) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += centroids(c, j) * centroids(c, j);
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) centroids(c, j) /= norm;
    }

    std::vector<reinjectr::TokenCategory> labels(tokens);
    std::vector<bool> is_test(tokens, false);
    for (std::size_t i = 0; i < tokens; ++i)
        labels[i] = static_cast<reinjectr::TokenCategory>(i % reinjectr::kCategoryCount);
    for (std::size_t i = 0; i < test_count; ++i) is_test[tokens - 1 - i] = true;

    DriftingStack out;
    out.corpus = reinjectr::single_token_corpus(labels, is_test);
    out.stack.timestep = 0.5f;
    for (std::size_t l = 0; l < layers; ++l) {
        Matrix layer(tokens, d);
        const double sigma = per_layer_noise * static_cast<double>(l);
        for (std::size_t i = 0; i < tokens; ++i) {
            const double* c = centroids.row(static_cast<std::size_t>(labels[i]));
            double* r = layer.row(i);
            for (std::size_t j = 0; j < d; ++j) r[j] = c[j] + sigma * gauss(rng);
        }
        out.stack.text.push_back(std::move(layer));
    }
    return out;
}

}  // namespace testutil
