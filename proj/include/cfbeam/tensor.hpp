#ifndef CFBEAM_TENSOR_HPP
#define CFBEAM_TENSOR_HPP

#include <cmath>
#include <complex>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "cfbeam/errors.hpp"

namespace cfbeam {

// Dense tensors, row-major over the stored dimension list. Activations use a
// channel-last convention: per-sample tensors are (width, height, channels)
// and batched tensors are (batch, width, height, channels), with each sample
// contiguous. File formats that serialize tensor data rely on this layout.

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : dims_(std::move(dims)), data_(count(dims_), fill) {}
  Tensor(std::initializer_list<std::size_t> dims, double fill = 0.0)
      : Tensor(std::vector<std::size_t>(dims), fill) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.dims_); }

  static Tensor scalar(double v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at2(std::size_t a, std::size_t b) { return data_[a * dims_[1] + b]; }
  double at2(std::size_t a, std::size_t b) const { return data_[a * dims_[1] + b]; }
  double& at3(std::size_t a, std::size_t b, std::size_t c) {
    return data_[(a * dims_[1] + b) * dims_[2] + c];
  }
  double at3(std::size_t a, std::size_t b, std::size_t c) const {
    return data_[(a * dims_[1] + b) * dims_[2] + c];
  }
  double& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
    return data_[((a * dims_[1] + b) * dims_[2] + c) * dims_[3] + d];
  }
  double at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return data_[((a * dims_[1] + b) * dims_[2] + c) * dims_[3] + d];
  }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& other) const {
    return dims_ == other.dims_ && data_ == other.data_;
  }

  static std::size_t count(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

/// Complex-valued companion of Tensor, same layout rules.
class CTensor {
 public:
  using value_type = std::complex<double>;

  CTensor() = default;
  explicit CTensor(std::vector<std::size_t> dims, value_type fill = {})
      : dims_(std::move(dims)), data_(Tensor::count(dims_), fill) {}
  CTensor(std::initializer_list<std::size_t> dims, value_type fill = {})
      : CTensor(std::vector<std::size_t>(dims), fill) {}

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_[i]; }
  std::size_t size() const { return data_.size(); }

  value_type* data() { return data_.data(); }
  const value_type* data() const { return data_.data(); }

  value_type& operator[](std::size_t i) { return data_[i]; }
  const value_type& operator[](std::size_t i) const { return data_[i]; }

  value_type& at2(std::size_t a, std::size_t b) { return data_[a * dims_[1] + b]; }
  const value_type& at2(std::size_t a, std::size_t b) const { return data_[a * dims_[1] + b]; }
  value_type& at3(std::size_t a, std::size_t b, std::size_t c) {
    return data_[(a * dims_[1] + b) * dims_[2] + c];
  }
  const value_type& at3(std::size_t a, std::size_t b, std::size_t c) const {
    return data_[(a * dims_[1] + b) * dims_[2] + c];
  }

  bool all_finite() const {
    for (const auto& v : data_) {
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
    }
    return true;
  }

  /// Conjugate transpose of a rank-2 tensor.
  CTensor conj_transpose() const {
    if (rank() != 2) throw ShapeError("conj_transpose requires a rank-2 tensor");
    CTensor out({dims_[1], dims_[0]});
    for (std::size_t r = 0; r < dims_[0]; ++r)
      for (std::size_t c = 0; c < dims_[1]; ++c) out.at2(c, r) = std::conj(at2(r, c));
    return out;
  }

  bool operator==(const CTensor& other) const {
    return dims_ == other.dims_ && data_ == other.data_;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<value_type> data_;
};

}  // namespace cfbeam

#endif  // CFBEAM_TENSOR_HPP
