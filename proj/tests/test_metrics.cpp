#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "common.hpp"
#include "reinjectr/metrics.hpp"

using namespace reinjectr;
using testutil::cknna_bruteforce;
using testutil::random_matrix;

TEST_CASE("cosine kernel identical unit rows") {
    Matrix a(2, 3);
    a(0, 0) = 1.0;
    a(1, 0) = 1.0;
    Matrix k = cosine_kernel(a, 1e-8);
    CHECK(k(0, 1) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(k(1, 0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cosine kernel orthogonal rows") {
    Matrix a(2, 2);
    a(0, 0) = 1.0;
    a(1, 1) = 1.0;
    Matrix k = cosine_kernel(a, 1e-8);
    CHECK(std::abs(k(0, 1)) < 1e-12);
}

TEST_CASE("cosine kernel antiparallel rows") {
    Matrix a(2, 3);
    for (std::size_t j = 0; j < 3; ++j) {
        a(0, j) = 1.0 + static_cast<double>(j);
        a(1, j) = -a(0, j);
    }
    Matrix k = cosine_kernel(a, 1e-10);
    CHECK(k(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("cosine kernel handles zero rows via eps guard") {
    Matrix a(2, 2);
    a(1, 0) = 1.0;
    Matrix k = cosine_kernel(a, 1e-8);
    CHECK(std::isfinite(k(0, 0)));
    CHECK(k(0, 1) == 0.0);
}

TEST_CASE("cosine kernel requires at least two rows") {
    Matrix a(1, 4, 1.0);
    CHECK_THROWS_AS(cosine_kernel(a, 1e-8), invalid_input);
}

TEST_CASE("center_kernel maps all-ones kernel to zero") {
    Matrix k(5, 5, 1.0);
    Matrix c = center_kernel(k);
    for (double v : c.data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("center_kernel is idempotent") {
    Matrix k = cosine_kernel(random_matrix(20, 6, 4), 1e-8);
    Matrix once = center_kernel(k);
    Matrix twice = center_kernel(once);
    CHECK(max_abs_diff(once, twice) < 1e-12);
}

TEST_CASE("center_kernel zeroes row and column sums") {
    Matrix raw = random_matrix(30, 30, 8);
    for (std::size_t i = 0; i < raw.rows; ++i)
        for (std::size_t j = 0; j < i; ++j) raw(i, j) = raw(j, i);
    Matrix c = center_kernel(raw);
    for (std::size_t i = 0; i < c.rows; ++i) {
        double rs = 0.0, cs = 0.0;
        for (std::size_t j = 0; j < c.cols; ++j) {
            rs += c(i, j);
            cs += c(j, i);
        }
        CHECK(std::abs(rs) < 1e-10);
        CHECK(std::abs(cs) < 1e-10);
    }
}

TEST_CASE("center_kernel rejects non-square input") {
    CHECK_THROWS_AS(center_kernel(Matrix(2, 3)), invalid_input);
}

TEST_CASE("knn_sets clear maximum") {
    Matrix k(3, 3, 0.0);
    k(0, 1) = 0.9;
    k(0, 2) = 0.1;
    auto sets = knn_sets(k, 1);
    REQUIRE(sets[0].size() == 1);
    CHECK(sets[0][0] == 1);
}

TEST_CASE("knn_sets exact tie prefers the smaller index") {
    Matrix k(3, 3, 0.0);
    k(0, 1) = 0.5;
    k(0, 2) = 0.5;
    auto sets = knn_sets(k, 1);
    CHECK(sets[0][0] == 1);
}

TEST_CASE("knn_sets matches brute-force selection on random kernels") {
    Matrix feats = random_matrix(200, 12, 21);
    Matrix k = center_kernel(cosine_kernel(feats, 1e-8));
    auto sets = knn_sets(k, 10);

    for (std::size_t i = 0; i < k.rows; ++i) {
        std::vector<std::size_t> idx;
        for (std::size_t j = 0; j < k.rows; ++j)
            if (j != i) idx.push_back(j);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (k(i, a) != k(i, b)) return k(i, a) > k(i, b);
            return a < b;
        });
        std::vector<std::size_t> expect(idx.begin(), idx.begin() + 10);
        std::sort(expect.begin(), expect.end());
        CHECK(sets[i] == expect);
    }
}

TEST_CASE("knn_sets rejects k out of range") {
    Matrix k(4, 4, 0.0);
    CHECK_THROWS_AS(knn_sets(k, 0), invalid_input);
    CHECK_THROWS_AS(knn_sets(k, 4), invalid_input);
}

TEST_CASE("cknna self-comparison is 1") {
    Matrix a = random_matrix(60, 8, 33);
    CknnaConfig cfg;
    cfg.k = 5;
    CHECK(cknna(a, a, cfg) == 1.0);
}

TEST_CASE("cknna is invariant to orthogonal rotation of one side") {
    Matrix a = random_matrix(80, 16, 12);
    Matrix q = testutil::random_orthogonal(16, 13);
    Matrix b = matmul(a, q);
    CknnaConfig cfg;
    cfg.k = 10;
    CHECK(cknna(a, b, cfg) == doctest::Approx(1.0));
}

TEST_CASE("cknna is invariant to positive scaling") {
    Matrix a = random_matrix(50, 6, 17);
    Matrix scaled = a;
    for (double& v : scaled.data) v *= 37.5;
    CknnaConfig cfg;
    cfg.k = 7;
    CHECK(cknna(a, scaled, cfg) == cknna(a, a, cfg));
}

TEST_CASE("cknna equals the brute-force oracle on independent inputs") {
    CknnaConfig cfg;
    cfg.k = 10;
    Matrix a = random_matrix(100, 12, 91);
    Matrix b = random_matrix(100, 12, 92);
    double lib = cknna(a, b, cfg);
    double ref = cknna_bruteforce(a, b, cfg.k, cfg.eps);
    CHECK(lib == ref);
    // Independent spaces: overlap should sit near the k/(N-1) chance level.
    double chance = 10.0 / 99.0;
    CHECK(lib == doctest::Approx(chance).epsilon(0.75));
}

TEST_CASE("cknna rejects shape mismatch") {
    CknnaConfig cfg;
    cfg.k = 2;
    CHECK_THROWS_AS(cknna(random_matrix(10, 4, 1), random_matrix(9, 4, 2), cfg), invalid_input);
    CHECK_THROWS_AS(cknna(random_matrix(2, 4, 1), random_matrix(2, 4, 2), cfg), invalid_input);
}

TEST_CASE("drift_report on a self-identical stack scores 1 everywhere") {
    Matrix layer = random_matrix(64, 10, 5);
    FeatureStack stack;
    for (int l = 0; l < 6; ++l) stack.text.push_back(layer);
    CknnaConfig cfg;
    cfg.k = 8;
    DriftReport report = drift_report(stack, cfg, 2);
    REQUIRE(report.cknna_scores.size() == 6);
    for (double s : report.cknna_scores) CHECK(s == 1.0);
}

TEST_CASE("drift_report declines on a synthetic drifting stack") {
    auto drift = testutil::make_drifting_stack(150, 10, 16, 0.35, 30, 2024);
    CknnaConfig cfg;
    cfg.k = 10;
    DriftReport report = drift_report(drift.stack, cfg, 2);

    std::vector<double> layer_idx(report.layer_ids.begin(), report.layer_ids.end());
    double rho = testutil::spearman(layer_idx, report.cknna_scores);
    CHECK(rho <= -0.9);
    for (double s : report.cknna_scores) {
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
    }
}

TEST_CASE("drift_report rejects single-layer stacks") {
    FeatureStack stack;
    stack.text.push_back(random_matrix(20, 4, 3));
    CknnaConfig cfg;
    cfg.k = 3;
    CHECK_THROWS_AS(drift_report(stack, cfg, 2), invalid_input);
}

TEST_CASE("drift_report layer coordinates agree with pca_project on the shared model") {
    FeatureStack stack;
    for (int l = 0; l < 4; ++l) stack.text.push_back(random_matrix(40, 6, 50 + l));
    CknnaConfig cfg;
    cfg.k = 5;
    DriftReport report = drift_report(stack, cfg, 2);

    Matrix all(4 * 40, 6);
    for (int l = 0; l < 4; ++l)
        std::copy(stack.text[l].data.begin(), stack.text[l].data.end(),
                  all.data.begin() + static_cast<std::size_t>(l) * stack.text[l].data.size());
    PcaModel shared = pca_fit(all, 2);
    Matrix expect = pca_project(shared, stack.text[0]);
    CHECK(max_abs_diff(report.pca_coords[0], expect) < 1e-12);
}
