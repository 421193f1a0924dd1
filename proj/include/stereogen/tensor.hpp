#pragma once

// Dense row-major float tensor with shared storage. All model math runs on
// these; reductions accumulate in double to keep test tolerances honest.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgen {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = std::make_shared<std::vector<float>>(numel(shape_), 0.0f);
  }

  Tensor(std::vector<int> shape, float fill) : Tensor(std::move(shape)) {
    std::fill(data_->begin(), data_->end(), fill);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }

  static Tensor from_data(std::vector<int> shape, std::vector<float> values) {
    check_shape(shape);
    if (static_cast<size_t>(numel(shape)) != values.size())
      throw std::invalid_argument("Tensor::from_data: size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<float>>(std::move(values));
    return t;
  }

  static Tensor scalar(float v) { return from_data({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int size() const { return data_ ? static_cast<int>(data_->size()) : 0; }
  bool empty() const { return !data_; }

  const float* data() const { return data_->data(); }
  float* data() { return data_->data(); }

  float operator[](int i) const { return (*data_)[static_cast<size_t>(i)]; }
  float& operator[](int i) { return (*data_)[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Deep copy; plain copy construction shares storage.
  Tensor clone() const {
    if (!data_) return Tensor();
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<float>>(*data_);
    return t;
  }

  Tensor reshaped(std::vector<int> shape) const {
    check_shape(shape);
    if (numel(shape) != size()) throw std::invalid_argument("Tensor::reshaped: size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  double sum() const {
    double s = 0.0;
    for (float v : *data_) s += v;
    return s;
  }

  double mean() const { return size() == 0 ? 0.0 : sum() / size(); }

  float max_abs() const {
    float m = 0.0f;
    for (float v : *data_) m = std::max(m, std::fabs(v));
    return m;
  }

  bool all_finite() const {
    for (float v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    if (size() == 0) return true;
    return std::memcmp(data_->data(), o.data_->data(), sizeof(float) * static_cast<size_t>(size())) == 0;
  }

  static int numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static void check_shape(const std::vector<int>& shape) {
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
    for (int d : shape)
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<float>> data_;
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  float m = 0.0f;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace sgen
