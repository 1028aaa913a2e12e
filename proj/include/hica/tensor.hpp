#pragma once

#include <cmath>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace hica {

// Dense row-major matrix of 64-bit reals. The only tensor shape in the
// project; batching is done by iteration.
struct Tensor2 {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor2() = default;
  Tensor2(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Tensor2: negative shape");
  }

  static Tensor2 full(int r, int c, double v) {
    Tensor2 t(r, c);
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor2 identity(int n) {
    Tensor2 t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  static Tensor2 from(std::initializer_list<std::initializer_list<double>> vals) {
    const int r = static_cast<int>(vals.size());
    const int c = r == 0 ? 0 : static_cast<int>(vals.begin()->size());
    Tensor2 t(r, c);
    int i = 0;
    for (const auto& row : vals) {
      if (static_cast<int>(row.size()) != c)
        throw std::invalid_argument("Tensor2::from: ragged rows");
      int j = 0;
      for (double v : row) t.at(i, j++) = v;
      ++i;
    }
    return t;
  }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  double* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const double* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

  int size() const { return rows * cols; }
  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

inline void check_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch, " + a.shape_str() +
                                " vs " + b.shape_str());
}

// Max |a-b| over all entries; shapes must match.
inline double max_abs_diff(const Tensor2& a, const Tensor2& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace hica
