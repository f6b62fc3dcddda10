#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "mbp/common.hpp"

namespace mbp {

// Dense row-major shape, rank 0..4 (rank 0 = scalar).
struct Shape {
  std::array<int, 4> d{0, 0, 0, 0};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    rank = static_cast<int>(dims.size());
    int i = 0;
    for (int v : dims) d[i++] = v;
  }

  int operator[](int i) const { return d[i]; }
  int& operator[](int i) { return d[i]; }

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= d[i];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    if (rank == 0) return "scalar";
    std::string s;
    for (int i = 0; i < rank; ++i) {
      if (i) s += 'x';
      s += std::to_string(d[i]);
    }
    return s;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s) : shape_(s), data_(static_cast<size_t>(s.numel()), T(0)) {}
  Tensor(Shape s, T fill) : shape_(s), data_(static_cast<size_t>(s.numel()), fill) {}

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor scalar(T v) {
    Tensor t{Shape{}};
    t.data_.assign(1, v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // rank-3 (c,h,w) accessors; the hot paths index manually.
  T& at(int c, int y, int x) {
    return data_[(static_cast<size_t>(c) * shape_.d[1] + y) * shape_.d[2] + x];
  }
  const T& at(int c, int y, int x) const {
    return data_[(static_cast<size_t>(c) * shape_.d[1] + y) * shape_.d[2] + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void set_zero() { fill(T(0)); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Video frame conventions: a frame is a 3xHxW tensor with values in [0,1];
// a sequence is an ordered list of frames with one common size.
template <typename T>
using FrameSeq = std::vector<Tensor<T>>;

template <typename T>
inline void check_frame(const Tensor<T>& f, const char* what = "frame") {
  if (f.shape().rank != 3 || f.shape()[0] != 3)
    throw ContractError(std::string(what) + ": expected a 3xHxW tensor, got " + f.shape().str());
  if (f.shape()[1] < 4 || f.shape()[2] < 4)
    throw ContractError(std::string(what) + ": frame must be at least 4x4, got " + f.shape().str());
  if (!f.all_finite()) throw ContractError(std::string(what) + ": non-finite values");
}

template <typename T>
inline void check_sequence(const FrameSeq<T>& seq, const char* what = "sequence") {
  if (seq.empty()) throw ContractError(std::string(what) + ": empty frame sequence");
  check_frame(seq.front(), what);
  for (size_t i = 1; i < seq.size(); ++i) {
    if (seq[i].shape() != seq.front().shape())
      throw ContractError(std::string(what) + ": frame " + std::to_string(i) + " has shape " +
                          seq[i].shape().str() + ", expected " + seq.front().shape().str());
    if (!seq[i].all_finite())
      throw ContractError(std::string(what) + ": frame " + std::to_string(i) + " has non-finite values");
  }
}

template <typename T>
inline T clamp01(T v) {
  return v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
}

}  // namespace mbp
