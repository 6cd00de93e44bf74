#pragma once

#include <Eigen/Core>

#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/memory.hpp"

namespace ssmvdm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

namespace detail {

// Flat buffer registered with the allocation tracker for its lifetime.
template <typename Scalar>
struct Storage {
  explicit Storage(Index n) : size(n) {
    data = static_cast<Scalar*>(Eigen::internal::aligned_malloc(sizeof(Scalar) * static_cast<std::size_t>(n)));
    ticket = MemoryTracker::instance().on_alloc(bytes());
  }
  ~Storage() {
    MemoryTracker::instance().on_free(bytes(), ticket);
    Eigen::internal::aligned_free(data);
  }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  std::size_t bytes() const { return sizeof(Scalar) * static_cast<std::size_t>(size); }

  Scalar* data = nullptr;
  Index size = 0;
  MemoryTracker::Ticket ticket;
};

}  // namespace detail

// Dense row-major tensor. Copies are shallow (shared storage); every op in
// this library returns a fresh tensor, so aliasing writes never occur on
// values in flight. Rank is always >= 1; scalars are shape (1).
template <typename Scalar>
class Tensor {
 public:
  using Flat = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstFlat = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using MatrixView = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixView =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;

  static Tensor empty(Shape shape) {
    validate_shape(shape);
    return Tensor(std::move(shape));
  }

  static Tensor zeros(Shape shape) {
    Tensor t = empty(std::move(shape));
    t.flat().setZero();
    return t;
  }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t = empty(std::move(shape));
    t.flat().setConstant(v);
    return t;
  }

  static Tensor scalar(Scalar v) { return full({1}, v); }

  static Tensor from_data(Shape shape, std::initializer_list<Scalar> values) {
    Tensor t = empty(std::move(shape));
    if (static_cast<Index>(values.size()) != t.numel())
      throw ShapeError("from_data: got " + std::to_string(values.size()) + " values for shape " +
                       shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor from_vector(Shape shape, const std::vector<Scalar>& values) {
    Tensor t = empty(std::move(shape));
    if (static_cast<Index>(values.size()) != t.numel())
      throw ShapeError("from_vector: got " + std::to_string(values.size()) + " values for shape " +
                       shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index numel() const { return storage_ ? storage_->size : 0; }
  std::size_t bytes() const { return storage_ ? storage_->bytes() : 0; }

  Scalar* data() { return storage_->data; }
  const Scalar* data() const { return storage_->data; }

  Scalar& operator[](Index i) { return storage_->data[i]; }
  Scalar operator[](Index i) const { return storage_->data[i]; }

  Flat flat() { return Flat(data(), numel()); }
  ConstFlat flat() const { return ConstFlat(data(), numel()); }

  // Views the flat buffer as a (rows, cols) row-major matrix.
  MatrixView matrix(Index rows, Index cols) {
    check_view(rows * cols);
    return MatrixView(data(), rows, cols);
  }
  ConstMatrixView matrix(Index rows, Index cols) const {
    check_view(rows * cols);
    return ConstMatrixView(data(), rows, cols);
  }

  // Rows = product of all axes but the last; cols = last extent.
  MatrixView as_rows() { return matrix(numel() / last_extent(), last_extent()); }
  ConstMatrixView as_rows() const { return matrix(numel() / last_extent(), last_extent()); }

  // Same storage, new shape. Element count must match.
  Tensor reshaped(Shape shape) const {
    validate_shape(shape);
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                       ": element count mismatch");
    Tensor t;
    t.storage_ = storage_;
    t.shape_ = std::move(shape);
    return t;
  }

  Tensor clone() const {
    Tensor t = empty(shape_);
    std::memcpy(t.data(), data(), bytes());
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const { return flat().isFinite().all(); }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data()[0];
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t = Tensor<Other>::empty(shape_);
    t.flat() = flat().template cast<Other>();
    return t;
  }

 private:
  explicit Tensor(Shape shape)
      : storage_(std::make_shared<detail::Storage<Scalar>>(shape_numel(shape))),
        shape_(std::move(shape)) {}

  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("rank-0 shapes are not supported");
    for (Index e : shape)
      if (e < 1) throw ShapeError("non-positive extent in shape " + shape_str(shape));
  }

  Index last_extent() const { return shape_.back(); }

  void check_view(Index n) const {
    if (n != numel())
      throw ShapeError("matrix view of " + std::to_string(n) + " elements over tensor " +
                       shape_str(shape_));
  }

  std::shared_ptr<detail::Storage<Scalar>> storage_;
  Shape shape_;
};

template <typename Scalar>
inline void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename Scalar>
inline void check_finite(const Tensor<Scalar>& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteError(std::string(what) + ": non-finite values in input");
}

}  // namespace ssmvdm
