#pragma once

#include <cstddef>
#include <vector>

#include "streetsynth/util.hpp"

namespace streetsynth {

// Dense row-major matrix of doubles. The training path is double precision
// throughout so finite-difference gradient checks are meaningful.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, fill) {}

    double& operator()(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
    double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
    const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }

    void resize(int r, int c) {
        rows = r;
        cols = c;
        a.assign(static_cast<std::size_t>(r) * c, 0.0);
    }
    void zero() { std::fill(a.begin(), a.end(), 0.0); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// C = A * B
inline void matmul(const Matrix& A, const Matrix& B, Matrix& C) {
    if (A.cols != B.rows) throw ShapeMismatch("matmul: inner dimensions differ");
    C.resize(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i) {
        const double* arow = A.row(i);
        double* crow = C.row(i);
        for (int k = 0; k < A.cols; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = B.row(k);
            for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B
inline void matmul_acc(const Matrix& A, const Matrix& B, Matrix& C) {
    if (A.cols != B.rows || C.rows != A.rows || C.cols != B.cols)
        throw ShapeMismatch("matmul_acc: dimensions differ");
    for (int i = 0; i < A.rows; ++i) {
        const double* arow = A.row(i);
        double* crow = C.row(i);
        for (int k = 0; k < A.cols; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = B.row(k);
            for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
        }
    }
}

// C = A * B^T
inline void matmul_nt(const Matrix& A, const Matrix& B, Matrix& C) {
    if (A.cols != B.cols) throw ShapeMismatch("matmul_nt: inner dimensions differ");
    C.resize(A.rows, B.rows);
    for (int i = 0; i < A.rows; ++i) {
        const double* arow = A.row(i);
        double* crow = C.row(i);
        for (int j = 0; j < B.rows; ++j) {
            const double* brow = B.row(j);
            double s = 0.0;
            for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
            crow[j] = s;
        }
    }
}

// C += A^T * B  (the weight-gradient pattern)
inline void matmul_tn_acc(const Matrix& A, const Matrix& B, Matrix& C) {
    if (A.rows != B.rows || C.rows != A.cols || C.cols != B.cols)
        throw ShapeMismatch("matmul_tn_acc: dimensions differ");
    for (int k = 0; k < A.rows; ++k) {
        const double* arow = A.row(k);
        const double* brow = B.row(k);
        for (int i = 0; i < A.cols; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = C.row(i);
            for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void add_inplace(Matrix& x, const Matrix& y) {
    if (!x.same_shape(y)) throw ShapeMismatch("add_inplace: shapes differ");
    for (std::size_t i = 0; i < x.a.size(); ++i) x.a[i] += y.a[i];
}

// y = x * W + 1 b   (b is 1 x cols)
inline void linear_forward(const Matrix& x, const Matrix& w, const Matrix& b, Matrix& y) {
    matmul(x, w, y);
    for (int i = 0; i < y.rows; ++i) {
        double* row = y.row(i);
        for (int j = 0; j < y.cols; ++j) row[j] += b(0, j);
    }
}

// Accumulates dW, db and writes dx for y = x*W + b.
inline void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw,
                            Matrix& db, Matrix& dx) {
    matmul_tn_acc(x, dy, dw);
    for (int i = 0; i < dy.rows; ++i)
        for (int j = 0; j < dy.cols; ++j) db(0, j) += dy(i, j);
    matmul_nt(dy, w, dx);
}

}  // namespace streetsynth
