#include "fedscape/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fedscape/rng.hpp"

namespace fedscape {

namespace {
std::atomic<bool> g_checked{false};
}

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
  for (std::int64_t d : shape_) {
    if (d <= 0) throw TensorError("tensor dimensions must be positive");
  }
  data_.assign(static_cast<std::size_t>(shape_product(shape_)), 0.0f);
}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::int64_t d : shape_) {
    if (d <= 0) throw TensorError("tensor dimensions must be positive");
  }
  if (shape_product(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw TensorError("tensor data length does not match shape product");
  }
  check_finite("tensor construction");
}

Tensor Tensor::full(std::vector<std::int64_t> shape, float v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
  if (shape_product(shape) != size()) throw TensorError("reshape changes element count");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(float v) {
  for (float& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (float x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void Tensor::check_finite(const char* what) const {
  if (!checked_mode()) return;
  if (!all_finite()) {
    throw TensorError(std::string("non-finite value in ") + what);
  }
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0) return b;
  if (b.rank() == 0) return a;
  if (a.rank() != b.rank()) throw TensorError("concat_rows: rank mismatch");
  for (int i = 1; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) throw TensorError("concat_rows: trailing dims differ");
  }
  std::vector<std::int64_t> shape = a.shape();
  shape[0] = a.dim(0) + b.dim(0);
  Tensor out(std::move(shape));
  std::memcpy(out.data(), a.data(), static_cast<std::size_t>(a.size()) * sizeof(float));
  std::memcpy(out.data() + a.size(), b.data(), static_cast<std::size_t>(b.size()) * sizeof(float));
  return out;
}

std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  if (!t.shape().empty()) {
    h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(std::int64_t), h);
  }
  if (t.size() > 0) {
    h = fnv1a64(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float), h);
  }
  return h;
}

// --- FSTN io -----------------------------------------------------------------

namespace {

template <typename T>
void append_le(std::string& out, T v) {
  // Host is little-endian on all supported targets.
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_le(const std::string& in, std::size_t& offset) {
  if (offset + sizeof(T) > in.size()) throw TensorError("truncated tensor stream");
  T v;
  std::memcpy(&v, in.data() + offset, sizeof(T));
  offset += sizeof(T);
  return v;
}

}  // namespace

void write_tensor(std::string& out, const Tensor& t) {
  out.append("FSTN", 4);
  if (t.rank() > 255) throw TensorError("tensor rank exceeds format limit");
  append_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::int64_t d : t.shape()) {
    if (d < 0 || d > 0xffffffffll) throw TensorError("dimension exceeds u32");
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  std::size_t bytes = static_cast<std::size_t>(t.size()) * sizeof(float);
  std::size_t pos = out.size();
  out.resize(pos + bytes);
  std::memcpy(out.data() + pos, t.data(), bytes);
}

Tensor read_tensor(const std::string& in, std::size_t& offset) {
  if (offset + 4 > in.size() || std::memcmp(in.data() + offset, "FSTN", 4) != 0) {
    throw TensorError("bad tensor magic");
  }
  offset += 4;
  int rank = read_le<std::uint8_t>(in, offset);
  std::vector<std::int64_t> shape;
  shape.reserve(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    shape.push_back(static_cast<std::int64_t>(read_le<std::uint32_t>(in, offset)));
  }
  std::int64_t n = shape_product(shape);
  std::size_t bytes = static_cast<std::size_t>(n) * sizeof(float);
  if (offset + bytes > in.size()) throw TensorError("truncated tensor payload");
  Tensor t(std::move(shape));
  std::memcpy(t.data(), in.data() + offset, bytes);
  offset += bytes;
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::string buf;
  write_tensor(buf, t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw TensorError("cannot open for write: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw TensorError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorError("cannot open tensor file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();
  std::size_t offset = 0;
  return read_tensor(buf, offset);
}

}  // namespace fedscape
