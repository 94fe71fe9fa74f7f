#pragma once

#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

namespace fedscape {

// Global NaN-guard switch. On in tests, off in benchmark runs.
bool checked_mode();
void set_checked_mode(bool on);

class TensorError : public std::exception {
 public:
  explicit TensorError(std::string msg) : msg_(std::move(msg)) {}
  const char* what() const noexcept override { return msg_.c_str(); }

 private:
  std::string msg_;
};

// Dense n-dimensional array of 32-bit reals, row-major. The universal
// numeric carrier: images, activations, parameters, gradients.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);  // zero-filled
  Tensor(std::vector<std::int64_t> shape, std::vector<float> data);

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::int64_t> shape, float v);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Indexed accessors for 2-d / 3-d / 4-d tensors.
  float& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  float at(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  float& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  float at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  float& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
    return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  float at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
    return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  Tensor reshaped(std::vector<std::int64_t> shape) const;

  void fill(float v);
  bool all_finite() const;
  // Throws TensorError in checked mode if any element is non-finite.
  void check_finite(const char* what) const;

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  std::vector<std::int64_t> shape_;
  std::vector<float> data_;
};

std::int64_t shape_product(const std::vector<std::int64_t>& shape);

// Stacks two tensors along dim 0; trailing dims must match. Either side may
// be empty (rank 0), in which case the other is returned unchanged.
Tensor concat_rows(const Tensor& a, const Tensor& b);

// Bitwise-exact hash of shape + payload; used for mutation checks.
std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed = 0xcbf29ce484222325ull);

// --- FSTN binary format -----------------------------------------------------
// magic "FSTN", u8 rank, u32 dims (little-endian), f32 payload row-major.
void write_tensor(std::string& out, const Tensor& t);
Tensor read_tensor(const std::string& in, std::size_t& offset);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace fedscape
