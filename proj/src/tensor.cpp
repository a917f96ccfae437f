#include "relkit/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "relkit/error.hpp"

namespace relkit {

static_assert(std::endian::native == std::endian::little, "UBT I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'U', 'B', 'T', '1'};
constexpr std::size_t kMaxRank = 8;

std::size_t element_size(DType dtype) {
  switch (dtype) {
    case DType::f32:
    case DType::i32:
      return 4;
    case DType::f64:
      return 8;
  }
  return 0;
}

std::size_t checked_product(const Tensor::Dims& dims) {
  std::size_t n = 1;
  for (auto d : dims) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) {
      throw ValidationError("size mismatch: dims overflow");
    }
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename T>
void append_raw(std::vector<std::byte>& out, const T& value) {
  const auto* p = reinterpret_cast<const std::byte*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::f32:
      return "f32";
    case DType::f64:
      return "f64";
    case DType::i32:
      return "i32";
  }
  return "unknown";
}

Tensor::Tensor() : dims_{}, data_(std::vector<double>{0.0}) {}

Tensor::Tensor(Dims dims, Storage data) : dims_(std::move(dims)), data_(std::move(data)) {
  const std::size_t expected = checked_product(dims_);
  const std::size_t actual = std::visit([](const auto& v) { return v.size(); }, data_);
  if (dims_.size() > kMaxRank) {
    throw ValidationError("rank " + std::to_string(dims_.size()) + " exceeds 8");
  }
  if (expected != actual) {
    throw ValidationError("size mismatch: dims imply " + std::to_string(expected) +
                          " values, got " + std::to_string(actual));
  }
}

Tensor Tensor::f32(Dims dims, std::vector<float> values) { return Tensor(std::move(dims), std::move(values)); }
Tensor Tensor::f64(Dims dims, std::vector<double> values) { return Tensor(std::move(dims), std::move(values)); }
Tensor Tensor::i32(Dims dims, std::vector<std::int32_t> values) {
  return Tensor(std::move(dims), std::move(values));
}

DType Tensor::dtype() const {
  switch (data_.index()) {
    case 0:
      return DType::f32;
    case 1:
      return DType::f64;
    default:
      return DType::i32;
  }
}

std::size_t Tensor::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

std::span<const float> Tensor::f32_values() const {
  if (const auto* v = std::get_if<std::vector<float>>(&data_)) return *v;
  throw ValidationError("tensor dtype is " + to_string(dtype()) + ", expected f32");
}

std::span<const double> Tensor::f64_values() const {
  if (const auto* v = std::get_if<std::vector<double>>(&data_)) return *v;
  throw ValidationError("tensor dtype is " + to_string(dtype()) + ", expected f64");
}

std::span<const std::int32_t> Tensor::i32_values() const {
  if (const auto* v = std::get_if<std::vector<std::int32_t>>(&data_)) return *v;
  throw ValidationError("tensor dtype is " + to_string(dtype()) + ", expected i32");
}

double Tensor::at(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, data_);
}

std::vector<double> Tensor::to_f64() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
}

bool Tensor::all_finite() const {
  return std::visit(
      [](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        if constexpr (std::is_floating_point_v<T>) {
          return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
        } else {
          return true;
        }
      },
      data_);
}

std::span<const std::byte> Tensor::bytes() const {
  return std::visit([](const auto& v) { return std::as_bytes(std::span(v)); }, data_);
}

bool Tensor::operator==(const Tensor& other) const {
  if (dtype() != other.dtype() || dims_ != other.dims_) return false;
  auto a = bytes();
  auto b = other.bytes();
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size()) == 0;
}

std::vector<std::byte> encode_tensor(const Tensor& tensor) {
  if (!tensor.raw_scores() && !tensor.all_finite()) {
    throw ValidationError("non-finite value in tensor that requires finite values");
  }
  std::vector<std::byte> out;
  out.reserve(8 + 8 * tensor.rank() + tensor.bytes().size());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(tensor.dtype()));
  out.push_back(static_cast<std::byte>(tensor.rank()));
  out.push_back(std::byte{0});
  out.push_back(std::byte{0});
  for (auto d : tensor.dims()) append_raw(out, static_cast<std::uint64_t>(d));
  auto payload = tensor.bytes();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Tensor decode_tensor(std::span<const std::byte> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ValidationError("bad magic");
  }
  const auto code = static_cast<std::uint8_t>(bytes[4]);
  if (code < 1 || code > 3) {
    throw ValidationError("unknown dtype code " + std::to_string(code));
  }
  const auto dtype = static_cast<DType>(code);
  const auto rank = static_cast<std::size_t>(bytes[5]);
  if (rank > kMaxRank) throw ValidationError("rank " + std::to_string(rank) + " exceeds 8");
  const std::size_t header = 8 + 8 * rank;
  if (bytes.size() < header) throw ValidationError("size mismatch: truncated header");

  Tensor::Dims dims(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::memcpy(&dims[i], bytes.data() + 8 + 8 * i, 8);
  }
  const std::size_t count = checked_product(dims);
  const std::size_t payload = bytes.size() - header;
  if (payload % element_size(dtype) != 0 || payload / element_size(dtype) != count) {
    throw ValidationError("size mismatch: dims imply " + std::to_string(count) + " values, payload holds " +
                          std::to_string(payload / element_size(dtype)));
  }
  const std::byte* p = bytes.data() + header;
  switch (dtype) {
    case DType::f32: {
      std::vector<float> v(count);
      std::memcpy(v.data(), p, payload);
      return Tensor::f32(std::move(dims), std::move(v));
    }
    case DType::f64: {
      std::vector<double> v(count);
      std::memcpy(v.data(), p, payload);
      return Tensor::f64(std::move(dims), std::move(v));
    }
    case DType::i32: {
      std::vector<std::int32_t> v(count);
      std::memcpy(v.data(), p, payload);
      return Tensor::i32(std::move(dims), std::move(v));
    }
  }
  throw ValidationError("unknown dtype code");
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open tensor file " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(std::as_bytes(std::span(raw)));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ValidationError("expected a rank-2 tensor, got rank " + std::to_string(t.rank()));
  const auto rows = static_cast<Eigen::Index>(t.dim(0));
  const auto cols = static_cast<Eigen::Index>(t.dim(1));
  Eigen::MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = t.at(k++);
  return m;
}

Eigen::VectorXd to_vector(const Tensor& t) {
  if (t.rank() != 1) throw ValidationError("expected a rank-1 tensor, got rank " + std::to_string(t.rank()));
  Eigen::VectorXd v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) v(static_cast<Eigen::Index>(i)) = t.at(i);
  return v;
}

std::vector<int> to_ints(const Tensor& t) {
  auto values = t.i32_values();
  return {values.begin(), values.end()};
}

Tensor from_matrix(const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[k++] = m(i, j);
  return Tensor::f64({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, std::move(v));
}

Tensor from_vector(const Eigen::VectorXd& v) {
  return Tensor::f64({static_cast<std::uint64_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

Tensor from_ints(const std::vector<int>& values) {
  return Tensor::i32({static_cast<std::uint64_t>(values.size())},
                     std::vector<std::int32_t>(values.begin(), values.end()));
}

}  // namespace relkit
