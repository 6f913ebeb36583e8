#pragma once

#include <cstddef>
#include <cstdlib>
#include <string>

#include <Eigen/Core>

namespace ldl {

/// Number of threads tensor kernels may use. Results are bitwise reproducible
/// for a fixed thread count; 1 is the reference mode.
inline int& thread_count_slot() {
  static int count = [] {
    int n = 1;
    if (const char* env = std::getenv("LDL_THREADS")) {
      try {
        n = std::stoi(env);
      } catch (...) {
        n = 1;
      }
    }
    n = n < 1 ? 1 : n;
    Eigen::setNbThreads(n);
    return n;
  }();
  return count;
}

inline int num_threads() { return thread_count_slot(); }

inline void set_num_threads(int n) {
  n = n < 1 ? 1 : n;
  thread_count_slot() = n;
  Eigen::setNbThreads(n);
}

namespace linalg {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// C[m,n] (+)= op(A) * op(B), all row-major; op transposes when the flag is set.
/// Shapes are given after the op: op(A) is m×k, op(B) is k×n.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t n, std::size_t k,
          bool accumulate) {
  (void)num_threads();
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  MatrixMap<T> cm(c, mi, ni);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += ConstMatrixMap<T>(a, mi, ki) * ConstMatrixMap<T>(b, ki, ni);
  } else if (trans_a && !trans_b) {
    cm.noalias() += ConstMatrixMap<T>(a, ki, mi).transpose() * ConstMatrixMap<T>(b, ki, ni);
  } else if (!trans_a && trans_b) {
    cm.noalias() += ConstMatrixMap<T>(a, mi, ki) * ConstMatrixMap<T>(b, ni, ki).transpose();
  } else {
    cm.noalias() += ConstMatrixMap<T>(a, ki, mi).transpose() * ConstMatrixMap<T>(b, ni, ki).transpose();
  }
}

}  // namespace linalg
}  // namespace ldl
