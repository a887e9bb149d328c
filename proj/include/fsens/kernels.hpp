#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace fsens {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  /// Throws a shape error if rows are ragged.
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<const double> data() const { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

namespace kernels {

// Row block size for the parallel reductions. Partial sums are formed per
// block and merged in block order, so results do not depend on the number of
// threads.
inline constexpr std::size_t kRowBlock = 1024;

std::vector<double> column_means(const Matrix& m);

/// Per row: argmax_j (m(r, j) - offset[j]).
std::vector<std::size_t> offset_argmax(const Matrix& m, std::span<const double> offset);

/// Row-wise softmax (max-shifted).
Matrix softmax_rows(const Matrix& logits);

/// counts[g * cols + p]; labels must be < classes.
std::vector<std::int64_t> confusion_counts(std::span<const std::size_t> gold,
                                           std::span<const std::size_t> predicted, std::size_t classes);

/// Single-threaded reference versions, kept for testing and benchmarking.
namespace serial {

std::vector<double> column_means(const Matrix& m);
std::vector<std::size_t> offset_argmax(const Matrix& m, std::span<const double> offset);
Matrix softmax_rows(const Matrix& logits);
std::vector<std::int64_t> confusion_counts(std::span<const std::size_t> gold,
                                           std::span<const std::size_t> predicted, std::size_t classes);

}  // namespace serial
}  // namespace kernels
}  // namespace fsens
