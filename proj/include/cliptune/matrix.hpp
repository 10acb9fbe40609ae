#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace cliptune {

// Dense row-major matrix. Float32 for model weights and activations,
// float64 for optimizer state.
template <typename T>
class MatrixT {
public:
    MatrixT() = default;
    MatrixT(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    MatrixT(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                        " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    T* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
    const T* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const MatrixT& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    static MatrixT identity(std::size_t n) {
        MatrixT m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.at(i, i) = T{1};
        return m;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using MatF = MatrixT<float>;
using MatD = MatrixT<double>;

// a (r x k) times b (k x c). Accumulates in double regardless of element type.
template <typename T>
MatrixT<T> matmul(const MatrixT<T>& a, const MatrixT<T>& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul shape mismatch: " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                                    "x" + std::to_string(b.cols()));
    }
    MatrixT<T> out(a.rows(), b.cols());
    const std::size_t k = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* arow = a.row_ptr(i);
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) {
                acc += static_cast<double>(arow[t]) * static_cast<double>(b.at(t, j));
            }
            out.at(i, j) = static_cast<T>(acc);
        }
    }
    return out;
}

// Numerically safe softmax (max-subtraction). Entries positive, sum 1.
std::vector<double> softmax(const std::vector<double>& logits);

}  // namespace cliptune
