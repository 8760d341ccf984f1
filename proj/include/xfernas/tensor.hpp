#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace xfernas {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Aligned operator new. On first use it keeps freed heap memory mapped, since
// every training step frees and reallocates the same buffers and returning
// them to the kernel costs a page fault per touched page on reuse.
void* tensor_allocate(std::size_t bytes, std::align_val_t align);

// Leaves new elements uninitialized so buffers that are about to be
// overwritten skip the zero fill. Storage is 64-byte aligned: vectorized
// reductions peel a different prefix for each alignment, so an unaligned
// buffer would make the rounding depend on where the heap put it.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  static constexpr std::align_val_t kAlign{64};
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  T* allocate(std::size_t n) { return static_cast<T*>(tensor_allocate(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t n) noexcept { ::operator delete(p, n * sizeof(T), kAlign); }
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

// Dense row-major array of doubles. Rank-0 tensors are scalars with one
// element. The matrix() views fold every trailing dimension into columns.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  // Contents are unspecified until written.
  static Tensor uninitialized(std::vector<std::size_t> shape);
  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.empty() ? 1 : data_.size() / shape_[0]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  MatrixMap matrix() { return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())}; }
  ConstMatrixMap matrix() const {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }

  void fill(double v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double, DefaultInitAllocator<double>> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// A learnable tensor plus its Adam state.
struct Parameter {
  Tensor value;
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t step = 0;
  bool decay = true;  // decoupled weight decay applies

  bool operator==(const Parameter&) const = default;
};

using Gradients = std::map<std::string, Tensor>;

class ParamStore {
 public:
  // Throws ContractViolation if the path already exists.
  Parameter& add(const std::string& path, Tensor value, bool decay = true);
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  Parameter& at(const std::string& path);
  const Parameter& at(const std::string& path) const;
  Tensor& value(const std::string& path) { return at(path).value; }
  const Tensor& value(const std::string& path) const { return at(path).value; }

  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool operator==(const ParamStore&) const = default;

 private:
  std::map<std::string, Parameter> params_;
};

enum class InitScheme { zeros, uniform_fan_in };

struct ParamSpec {
  std::string path;
  std::vector<std::size_t> shape;
  InitScheme scheme = InitScheme::uniform_fan_in;
  // uniform_fan_in draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); 0 means
  // "use the first dimension".
  std::size_t fan_in = 0;
  bool decay = true;
};

// Parameters are drawn in declaration order from a single seeded stream.
ParamStore init_params(std::uint64_t seed, const std::vector<ParamSpec>& specs);

// Binary checkpoint, little-endian:
//   "XFNPS\0" u16 version(=1) u32 count, then per parameter (sorted by path):
//   u32 path_len, path bytes, u8 decay, i64 step, u32 rank, u64 dims[rank],
//   f64 value[n], f64 first_moment[n], f64 second_moment[n].
void save_params(const ParamStore& store, const std::filesystem::path& file);
ParamStore load_params(const std::filesystem::path& file);

}  // namespace xfernas
