#include <doctest.h>

#include <omp.h>

#include "fsens/error.hpp"
#include "fsens/kernels.hpp"
#include "fsens/rng.hpp"

using namespace fsens;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 5.0) {
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = (rng.uniform() - 0.5) * 2.0 * scale;
  }
  return m;
}

}  // namespace

TEST_CASE("argmax ties go low") {
  CHECK(argmax(std::vector<double>{1.0, 3.0, 3.0}) == 1);
  CHECK(argmax(std::vector<double>{-2.0}) == 0);
  CHECK(argmax(std::vector<double>{0.0, 0.0}) == 0);
}

TEST_CASE("parallel kernels match the serial reference exactly") {
  Rng rng(17);
  // Sizes straddle the row block so both single and multi-block paths run.
  for (std::size_t rows : {1UL, 7UL, 1023UL, 1024UL, 1025UL, 5000UL}) {
    for (std::size_t cols : {1UL, 2UL, 5UL}) {
      const auto m = random_matrix(rows, cols, rng);
      // Blocked summation differs from the serial loop only by rounding.
      const auto par = kernels::column_means(m);
      const auto ser = kernels::serial::column_means(m);
      for (std::size_t c = 0; c < cols; ++c) CHECK(par[c] == doctest::Approx(ser[c]).epsilon(1e-12));
      const auto means = kernels::serial::column_means(m);
      CHECK(kernels::offset_argmax(m, means) == kernels::serial::offset_argmax(m, means));
      const auto sp = kernels::softmax_rows(m);
      const auto ss = kernels::serial::softmax_rows(m);
      CHECK(std::equal(sp.data().begin(), sp.data().end(), ss.data().begin(), ss.data().end()));

      std::vector<std::size_t> gold(rows), pred(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        gold[i] = rng.below(cols + 1);
        pred[i] = rng.below(cols + 1);
      }
      CHECK(kernels::confusion_counts(gold, pred, cols + 1) == kernels::serial::confusion_counts(gold, pred, cols + 1));
    }
  }
}

TEST_CASE("parallel results do not depend on the thread count") {
  Rng rng(3);
  const auto m = random_matrix(10000, 4, rng);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto one = kernels::column_means(m);
  omp_set_num_threads(7);
  const auto seven = kernels::column_means(m);
  omp_set_num_threads(saved);
  CHECK(one == seven);
}

TEST_CASE("kernel values") {
  const auto m = Matrix::from_rows({{1.0, 2.0}, {3.0, 6.0}});
  CHECK(kernels::column_means(m) == std::vector<double>{2.0, 4.0});
  CHECK(kernels::offset_argmax(m, std::vector<double>{0.0, 10.0}) == std::vector<std::size_t>{0, 0});
  const auto sm = kernels::softmax_rows(Matrix::from_rows({{0.0, 0.0}, {1000.0, 0.0}}));
  CHECK(sm(0, 0) == doctest::Approx(0.5));
  CHECK(sm(1, 0) == doctest::Approx(1.0));
  CHECK(std::isfinite(sm(1, 1)));
  const std::vector<std::size_t> g{0, 1, 1}, p{0, 0, 1};
  CHECK(kernels::confusion_counts(g, p, 2) == std::vector<std::int64_t>{1, 0, 1, 1});
}

TEST_CASE("shape errors") {
  auto kind = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::undefined;
  };
  CHECK(kind([] { Matrix::from_rows({{1.0, 2.0}, {3.0}}); }) == ErrorKind::shape);
  const Matrix m(2, 2);
  CHECK(kind([&] { kernels::offset_argmax(m, std::vector<double>{1.0}); }) == ErrorKind::shape);
  const std::vector<std::size_t> g{0, 1}, p{0};
  CHECK(kind([&] { kernels::confusion_counts(g, p, 2); }) == ErrorKind::shape);
  const std::vector<std::size_t> out_of_range{3};
  CHECK(kind([&] { kernels::confusion_counts(out_of_range, out_of_range, 2); }) == ErrorKind::shape);
}
