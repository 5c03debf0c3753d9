#include "reinjectr/linalg.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <iostream>

namespace reinjectr {

namespace {

void default_warning_handler(const std::string& msg) {
    std::cerr << "[reinjectr] warning: " << msg << "\n";
}

void (*g_warning_handler)(const std::string&) = default_warning_handler;

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap as_eigen(const Matrix& m) {
    return ECMap(m.data.data(), static_cast<Eigen::Index>(m.rows),
                 static_cast<Eigen::Index>(m.cols));
}

Matrix from_eigen(const Eigen::MatrixXd& e) {
    Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    EMap(m.data.data(), e.rows(), e.cols()) = e;
    return m;
}

}  // namespace

void emit_warning(const std::string& msg) { g_warning_handler(msg); }

void set_warning_handler(void (*handler)(const std::string&)) {
    g_warning_handler = handler ? handler : default_warning_handler;
}

SvdResult svd(const Matrix& a) {
    require(a.rows >= 1 && a.cols >= 1, "svd: empty matrix");
    if (!a.all_finite()) throw invalid_input("svd: non-finite input");

    Eigen::MatrixXd m = as_eigen(a);
    // BDC falls back to Jacobi for small matrices; both are deterministic.
    Eigen::BDCSVD<Eigen::MatrixXd> dec(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success)
        throw numerical_failure("svd: decomposition did not converge");

    Eigen::MatrixXd u = dec.matrixU();
    Eigen::MatrixXd v = dec.matrixV();
    Eigen::VectorXd s = dec.singularValues();

    // Sign convention: largest-magnitude entry of each U column positive,
    // ties toward the smaller row index.
    for (Eigen::Index j = 0; j < u.cols(); ++j) {
        Eigen::Index best = 0;
        double best_abs = -1.0;
        for (Eigen::Index i = 0; i < u.rows(); ++i) {
            double av = std::abs(u(i, j));
            if (av > best_abs) {
                best_abs = av;
                best = i;
            }
        }
        if (u(best, j) < 0.0) {
            u.col(j) = -u.col(j);
            v.col(j) = -v.col(j);
        }
    }

    SvdResult out;
    out.u = from_eigen(u);
    out.sigma.assign(s.data(), s.data() + s.size());
    out.vt = from_eigen(v.transpose());
    return out;
}

TokenStats token_stats(const Matrix& t, double eps) {
    require(t.cols >= 1, "token_stats: matrix must have at least one column");
    if (eps <= 0.0) throw invalid_input("token_stats: eps must be > 0");
    if (!t.all_finite()) throw invalid_input("token_stats: non-finite input");

    TokenStats st;
    st.mean.resize(t.rows);
    st.std.resize(t.rows);
    const double inv_n = 1.0 / static_cast<double>(t.cols);
    for (std::size_t i = 0; i < t.rows; ++i) {
        const double* r = t.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < t.cols; ++j) mean += r[j];
        mean *= inv_n;
        double var = 0.0;
        for (std::size_t j = 0; j < t.cols; ++j) {
            double d = r[j] - mean;
            var += d * d;
        }
        var *= inv_n;  // population variance
        st.mean[i] = mean;
        st.std[i] = std::sqrt(var + eps);
    }
    return st;
}

Matrix layer_norm(const Matrix& t, double eps) {
    TokenStats st = token_stats(t, eps);
    Matrix out(t.rows, t.cols);
    for (std::size_t i = 0; i < t.rows; ++i) {
        const double* src = t.row(i);
        double* dst = out.row(i);
        const double inv = 1.0 / st.std[i];
        for (std::size_t j = 0; j < t.cols; ++j) dst[j] = (src[j] - st.mean[i]) * inv;
    }
    return out;
}

Matrix restore_stats(const Matrix& t, const TokenStats& stats) {
    require(stats.mean.size() == t.rows && stats.std.size() == t.rows,
            "restore_stats: stats length must equal row count");
    Matrix out(t.rows, t.cols);
    for (std::size_t i = 0; i < t.rows; ++i) {
        const double* src = t.row(i);
        double* dst = out.row(i);
        for (std::size_t j = 0; j < t.cols; ++j) dst[j] = src[j] * stats.std[i] + stats.mean[i];
    }
    return out;
}

PcaModel pca_fit(const Matrix& x, std::size_t q) {
    require(x.rows >= 2, "pca_fit: need at least 2 samples");
    const std::size_t limit = std::min(x.rows - 1, x.cols);
    if (q < 1 || q > limit) throw invalid_input("pca_fit: q out of range");
    if (!x.all_finite()) throw invalid_input("pca_fit: non-finite input");

    Eigen::MatrixXd m = as_eigen(x);
    Eigen::RowVectorXd mean = m.colwise().mean();
    Eigen::MatrixXd centered = m.rowwise() - mean;

    Eigen::BDCSVD<Eigen::MatrixXd> dec(centered, Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success)
        throw numerical_failure("pca_fit: SVD did not converge");
    Eigen::MatrixXd v = dec.matrixV();
    Eigen::VectorXd s = dec.singularValues();

    PcaModel model;
    model.mean.assign(mean.data(), mean.data() + mean.size());
    model.components = from_eigen(
        v.leftCols(static_cast<Eigen::Index>(q)).transpose());
    model.explained_variance.resize(q);
    const double inv_n = 1.0 / static_cast<double>(x.rows);
    for (std::size_t j = 0; j < q; ++j) {
        double sv = s(static_cast<Eigen::Index>(j));
        model.explained_variance[j] = sv * sv * inv_n;
    }
    return model;
}

Matrix pca_project(const PcaModel& model, const Matrix& x) {
    require(x.cols == model.components.cols, "pca_project: width mismatch");
    Eigen::MatrixXd m = as_eigen(x);
    Eigen::RowVectorXd mean = Eigen::Map<const Eigen::RowVectorXd>(
        model.mean.data(), static_cast<Eigen::Index>(model.mean.size()));
    Eigen::MatrixXd centered = m.rowwise() - mean;
    Eigen::MatrixXd proj = centered * as_eigen(model.components).transpose();
    return from_eigen(proj);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, "matmul: inner dimensions differ");
    return from_eigen(as_eigen(a) * as_eigen(b));
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    require(a.rows == b.rows, "matmul_tn: inner dimensions differ");
    return from_eigen(as_eigen(a).transpose() * as_eigen(b));
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    require(a.cols == b.cols, "matmul_nt: inner dimensions differ");
    return from_eigen(as_eigen(a) * as_eigen(b).transpose());
}

Matrix transpose(const Matrix& a) { return from_eigen(as_eigen(a).transpose()); }

double frobenius_norm(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v * v;
    return std::sqrt(acc);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

double dot_flat(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "dot_flat: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
    return acc;
}

double cosine_flat(const Matrix& a, const Matrix& b) {
    double na = frobenius_norm(a);
    double nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot_flat(a, b) / (na * nb);
}

}  // namespace reinjectr
