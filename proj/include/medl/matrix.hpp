#ifndef MEDL_MATRIX_HPP
#define MEDL_MATRIX_HPP

#include <cstddef>
#include <span>
#include <vector>

namespace medl {

// Dense row-major matrix of doubles. Deliberately minimal: the networks in
// this toolkit are a few units wide, so plain loops beat a BLAS dependency.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  bool operator==(const Matrix&) const = default;
};

}  // namespace medl

#endif  // MEDL_MATRIX_HPP
