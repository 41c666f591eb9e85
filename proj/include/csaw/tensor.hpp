#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace csaw {

/// Error raised for contract violations in csaw APIs.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Configuration / validation error (maps to CLI exit code 2).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Dense row-major double tensor with shared (copy-on-write) storage.
/// Copies are cheap; call mut()/ref() before writing.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor from(std::vector<int> shape, std::vector<double> data);
  static Tensor scalar(double v) { return from({1}, {v}); }

  bool empty() const { return !buf_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  std::int64_t numel() const;
  const std::vector<int>& shape() const { return shape_; }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  const double* data() const { return buf_ ? buf_->data() : nullptr; }
  /// Unique, writable view of the storage (deep-copies if shared).
  double* mut();

  double operator[](std::int64_t i) const { return (*buf_)[static_cast<size_t>(i)]; }
  double& ref(std::int64_t i) { return mut()[i]; }

  std::int64_t idx(std::initializer_list<int> ix) const;
  double at(std::initializer_list<int> ix) const { return (*this)[idx(ix)]; }
  double& ref(std::initializer_list<int> ix) { return ref(idx(ix)); }

  double item() const;
  bool all_finite() const;
  void fill(double v);
  Tensor clone() const;
  Tensor reshaped(std::vector<int> shape) const;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> buf_;
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

}  // namespace csaw
