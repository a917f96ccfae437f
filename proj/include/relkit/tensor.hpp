#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace relkit {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, i32 = 3 };

std::string to_string(DType dtype);

/// Dense row-major array with an explicit element type.
///
/// Tensors are value types. Unless marked as raw scores, every floating point
/// value must be finite; the check runs on save and during manifest loading.
class Tensor {
 public:
  using Dims = std::vector<std::uint64_t>;

  Tensor();  // rank-0 f64 zero

  static Tensor f32(Dims dims, std::vector<float> values);
  static Tensor f64(Dims dims, std::vector<double> values);
  static Tensor i32(Dims dims, std::vector<std::int32_t> values);

  DType dtype() const;
  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const;
  std::uint64_t dim(std::size_t axis) const { return dims_.at(axis); }

  std::span<const float> f32_values() const;
  std::span<const double> f64_values() const;
  std::span<const std::int32_t> i32_values() const;

  double at(std::size_t flat_index) const;
  std::vector<double> to_f64() const;

  bool raw_scores() const { return raw_scores_; }
  Tensor& mark_raw_scores(bool raw = true) {
    raw_scores_ = raw;
    return *this;
  }

  bool all_finite() const;

  // Bit-exact comparison of dtype, dims and payload bytes.
  bool operator==(const Tensor& other) const;

  std::span<const std::byte> bytes() const;

 private:
  using Storage = std::variant<std::vector<float>, std::vector<double>, std::vector<std::int32_t>>;
  Tensor(Dims dims, Storage data);

  Dims dims_;
  Storage data_;
  bool raw_scores_ = false;
};

/// Writes the UBT layout: "UBT1", dtype code, rank, two zero bytes, rank u64
/// dims, then the payload, all little-endian.
void save_tensor(const Tensor& tensor, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

std::vector<std::byte> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(std::span<const std::byte> bytes);

// Conversions to the Eigen types the numerical modules work in.
Eigen::MatrixXd to_matrix(const Tensor& tensor);
Eigen::VectorXd to_vector(const Tensor& tensor);
std::vector<int> to_ints(const Tensor& tensor);

Tensor from_matrix(const Eigen::MatrixXd& m);
Tensor from_vector(const Eigen::VectorXd& v);
Tensor from_ints(const std::vector<int>& values);

}  // namespace relkit
