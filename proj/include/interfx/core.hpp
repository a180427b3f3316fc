#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace interfx {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::RowVectorXd;

// Malformed or inconsistent input data (bad CSV row, non-finite entry, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// A matrix that must be invertible is numerically singular.
class SingularityError : public std::runtime_error {
 public:
  SingularityError(const std::string& what, double min_eigenvalue)
      : std::runtime_error(what + " (smallest eigenvalue " +
                           std::to_string(min_eigenvalue) + ")"),
        min_eigenvalue_(min_eigenvalue) {}
  double min_eigenvalue() const { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

enum class ModelVariant { basic, zero_restrictions, observed_phi, phi_and_common };

// Variant tag plus the factor split needed to evaluate the matching FOC system.
struct ModelSpec {
  ModelVariant variant = ModelVariant::basic;
  int r1 = -1;  // shared factors; -1 means "all of them"

  static ModelSpec basic() { return {ModelVariant::basic, -1}; }
  static ModelSpec zero(int r1) { return {ModelVariant::zero_restrictions, r1}; }
  static ModelSpec phi(int r1) { return {ModelVariant::observed_phi, r1}; }
  static ModelSpec phi_common(int r1) { return {ModelVariant::phi_and_common, r1}; }
};

inline void symmetrize(MatrixXd& a) { a = ((a + a.transpose()) * 0.5).eval(); }

inline double max_abs(const MatrixXd& a) {
  return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
}

inline bool all_finite(const MatrixXd& a) { return a.allFinite(); }

// SplitMix64; used to derive independent per-replication seed streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Eigenvalue clamp onto [lo, hi]; exact constrained Gaussian M-step projection.
inline MatrixXd clamp_spd(const MatrixXd& a, double lo, double hi) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
  VectorXd d = es.eigenvalues().cwiseMax(lo).cwiseMin(hi);
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace interfx
