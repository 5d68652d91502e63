#ifndef CHRONIDENT_TEST_HELPERS_HPP
#define CHRONIDENT_TEST_HELPERS_HPP

#include "chronident/model.hpp"

#include <cmath>

namespace testutil {

using chronident::Index;
using chronident::Mat;
using chronident::Vec;

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-300);
}

template <typename A, typename B>
double rel_norm_err(const A& got, const B& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-300);
}

/// Kronecker product by explicit index arithmetic.
inline Mat<double> kron(const Mat<double>& a, const Mat<double>& b) {
  Mat<double> out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      for (Index k = 0; k < b.rows(); ++k)
        for (Index l = 0; l < b.cols(); ++l) out(i * b.rows() + k, j * b.cols() + l) = a(i, j) * b(k, l);
  return out;
}

/// Ensemble with unit-order parameters so products of moments stay far
/// from the double-precision floor.
inline chronident::EnsembleParams<double> unit_scenario() {
  chronident::EnsembleParams<double> p;
  p.clocks = {{1.0, 0.1, 0.0}, {1.5, 2.0, 0.8}, {5.0, 1.5, 0.75}, {7.0, 2.5, 0.3}};
  p.R.resize(3, 3);
  p.R << 9, 6, 5, 6, 8.7, 4, 5, 4, 9.5;
  p.R *= 0.1;
  return p;
}

}  // namespace testutil

#endif
