#include "fsens/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "fsens/error.hpp"

namespace fsens {

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  const std::size_t cols = rows.front().size();
  Matrix m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) {
      throw Error(ErrorKind::shape, "ragged matrix: row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                                        " columns, expected " + std::to_string(cols));
    }
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

namespace kernels {
namespace serial {

std::vector<double> column_means(const Matrix& m) {
  std::vector<double> sums(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) sums[c] += m(r, c);
  }
  if (m.rows() > 0) {
    for (auto& s : sums) s /= static_cast<double>(m.rows());
  }
  return sums;
}

std::vector<std::size_t> offset_argmax(const Matrix& m, std::span<const double> offset) {
  std::vector<std::size_t> out(m.rows());
  std::vector<double> shifted(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) shifted[c] = m(r, c) - offset[c];
    out[r] = argmax(shifted);
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto in = logits.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) z += (out(r, c) = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < in.size(); ++c) out(r, c) /= z;
  }
  return out;
}

std::vector<std::int64_t> confusion_counts(std::span<const std::size_t> gold, std::span<const std::size_t> predicted,
                                           std::size_t classes) {
  std::vector<std::int64_t> counts(classes * classes, 0);
  for (std::size_t i = 0; i < gold.size(); ++i) ++counts[gold[i] * classes + predicted[i]];
  return counts;
}

}  // namespace serial

std::vector<double> column_means(const Matrix& m) {
  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  if (rows == 0 || cols == 0) return std::vector<double>(cols, 0.0);
  const std::size_t blocks = (rows + kRowBlock - 1) / kRowBlock;
  std::vector<double> partial(blocks * cols, 0.0);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(blocks); ++b) {
    double* acc = partial.data() + static_cast<std::size_t>(b) * cols;
    const std::size_t lo = static_cast<std::size_t>(b) * kRowBlock;
    const std::size_t hi = std::min(rows, lo + kRowBlock);
    for (std::size_t r = lo; r < hi; ++r) {
      for (std::size_t c = 0; c < cols; ++c) acc[c] += m(r, c);
    }
  }

  std::vector<double> sums(cols, 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t c = 0; c < cols; ++c) sums[c] += partial[b * cols + c];
  }
  for (auto& s : sums) s /= static_cast<double>(rows);
  return sums;
}

std::vector<std::size_t> offset_argmax(const Matrix& m, std::span<const double> offset) {
  if (offset.size() != m.cols()) throw Error(ErrorKind::shape, "offset_argmax: offset length does not match columns");
  if (m.rows() > 0 && m.cols() == 0) throw Error(ErrorKind::shape, "offset_argmax: matrix has no columns");
  std::vector<std::size_t> out(m.rows());
  const std::size_t cols = m.cols();

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(m.rows()); ++r) {
    const auto row = m.row(static_cast<std::size_t>(r));
    std::size_t best = 0;
    double best_value = row[0] - offset[0];
    for (std::size_t c = 1; c < cols; ++c) {
      const double v = row[c] - offset[c];
      if (v > best_value) {
        best_value = v;
        best = c;
      }
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  if (logits.rows() > 0 && logits.cols() == 0) throw Error(ErrorKind::shape, "softmax_rows: matrix has no columns");
  Matrix out(logits.rows(), logits.cols());

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t rr = 0; rr < static_cast<std::ptrdiff_t>(logits.rows()); ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const auto in = logits.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) z += (out(r, c) = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < in.size(); ++c) out(r, c) /= z;
  }
  return out;
}

std::vector<std::int64_t> confusion_counts(std::span<const std::size_t> gold, std::span<const std::size_t> predicted,
                                           std::size_t classes) {
  if (gold.size() != predicted.size()) throw Error(ErrorKind::shape, "confusion_counts: length mismatch");
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= classes || predicted[i] >= classes) {
      throw Error(ErrorKind::shape, "confusion_counts: label out of range at row " + std::to_string(i));
    }
  }
  const std::size_t cells = classes * classes;
  std::vector<std::int64_t> counts(cells, 0);

#pragma omp parallel
  {
    std::vector<std::int64_t> local(cells, 0);
#pragma omp for schedule(static) nowait
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(gold.size()); ++i) {
      ++local[gold[static_cast<std::size_t>(i)] * classes + predicted[static_cast<std::size_t>(i)]];
    }
#pragma omp critical
    for (std::size_t k = 0; k < cells; ++k) counts[k] += local[k];
  }
  return counts;
}

}  // namespace kernels
}  // namespace fsens
