#include "csaw/tensor.hpp"

#include <cmath>
#include <sstream>

namespace csaw {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("negative tensor dimension in " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  buf_ = std::make_shared<std::vector<double>>(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw Error("Tensor::from: " + shape_to_string(shape) + " does not hold " +
                std::to_string(data.size()) + " values");
  Tensor t;
  t.shape_ = std::move(shape);
  t.buf_ = std::make_shared<std::vector<double>>(std::move(data));
  return t;
}

std::int64_t Tensor::numel() const { return buf_ ? static_cast<std::int64_t>(buf_->size()) : 0; }

double* Tensor::mut() {
  if (!buf_) throw Error("mut() on empty tensor");
  if (buf_.use_count() > 1) buf_ = std::make_shared<std::vector<double>>(*buf_);
  return buf_->data();
}

std::int64_t Tensor::idx(std::initializer_list<int> ix) const {
  if (static_cast<int>(ix.size()) != rank())
    throw Error("index rank mismatch for tensor " + shape_str());
  std::int64_t flat = 0;
  auto it = ix.begin();
  for (int d = 0; d < rank(); ++d, ++it) {
    if (*it < 0 || *it >= shape_[static_cast<size_t>(d)])
      throw Error("index out of range for tensor " + shape_str());
    flat = flat * shape_[static_cast<size_t>(d)] + *it;
  }
  return flat;
}

double Tensor::item() const {
  if (numel() != 1) throw Error("item() on tensor " + shape_str());
  return (*buf_)[0];
}

bool Tensor::all_finite() const {
  if (!buf_) return true;
  for (double v : *buf_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) {
  double* p = mut();
  const std::int64_t n = numel();
  for (std::int64_t i = 0; i < n; ++i) p[i] = v;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  if (buf_) t.buf_ = std::make_shared<std::vector<double>>(*buf_);
  return t;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != numel())
    throw Error("reshape " + shape_str() + " -> " + shape_to_string(shape) + " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace csaw
