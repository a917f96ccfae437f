#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <doctest.h>
#include <json.hpp>

#include "relkit/error.hpp"
#include "relkit/manifest.hpp"
#include "relkit/synthetic.hpp"
#include "relkit/tensor.hpp"
#include "test_util.hpp"

using namespace relkit;
namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("2x2 f32 identity is a 40-byte file with the documented header") {
  TempDir dir;
  const auto t = Tensor::f32({2, 2}, {1.f, 0.f, 0.f, 1.f});
  save_tensor(t, dir / "eye.ubt");
  const auto bytes = read_bytes(dir / "eye.ubt");
  REQUIRE(bytes.size() == 40);
  CHECK(std::memcmp(bytes.data(), "UBT1", 4) == 0);
  CHECK(bytes[4] == 1);  // f32
  CHECK(bytes[5] == 2);  // rank
  CHECK(bytes[6] == 0);
  CHECK(bytes[7] == 0);
  CHECK(bytes[8] == 2);  // dims, little-endian u64
  for (int i = 9; i < 16; ++i) CHECK(bytes[static_cast<std::size_t>(i)] == 0);
  float first = 0.f;
  std::memcpy(&first, bytes.data() + 24, 4);
  CHECK(first == 1.f);
}

TEST_CASE("rank-0 f64 scalar is header plus 8 data bytes") {
  TempDir dir;
  save_tensor(Tensor::f64({}, {3.5}), dir / "s.ubt");
  const auto bytes = read_bytes(dir / "s.ubt");
  REQUIRE(bytes.size() == 16);
  CHECK(bytes[4] == 2);
  CHECK(bytes[5] == 0);
  double v = 0.0;
  std::memcpy(&v, bytes.data() + 8, 8);
  CHECK(v == 3.5);
  const auto back = load_tensor(dir / "s.ubt");
  CHECK(back.rank() == 0);
  CHECK(back.at(0) == 3.5);
}

TEST_CASE("round trip preserves dtype, dims and bits") {
  TempDir dir;
  const std::vector<Tensor> cases = {
      Tensor::f32({3, 1, 2}, {1.5f, -0.f, 3e-38f, 7.f, -2.25f, 1e30f}),
      Tensor::f64({4}, {0.1, -1e-300, 5e300, -0.0}),
      Tensor::i32({2, 3}, {0, -1, 7, 2147483647, -2147483647 - 1, 5}),
      Tensor::f64({0, 3}, {}),
  };
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto path = dir / ("t" + std::to_string(i) + ".ubt");
    save_tensor(cases[i], path);
    CHECK(load_tensor(path) == cases[i]);
    CHECK(decode_tensor(encode_tensor(cases[i])) == cases[i]);
  }
}

TEST_CASE("load rejects corrupt files") {
  TempDir dir;
  save_tensor(Tensor::f64({2, 3}, {1, 2, 3, 4, 5, 6}), dir / "ok.ubt");
  auto bytes = read_bytes(dir / "ok.ubt");

  auto bad = bytes;
  bad[0] = 'X';
  write_bytes(dir / "magic.ubt", bad);
  CHECK(error_of([&] { load_tensor(dir / "magic.ubt"); }).find("bad magic") != std::string::npos);

  bad = bytes;
  bad[4] = 9;
  write_bytes(dir / "dtype.ubt", bad);
  CHECK(error_of([&] { load_tensor(dir / "dtype.ubt"); }).find("unknown dtype code") != std::string::npos);

  bad = bytes;
  bad.resize(bad.size() - 8);  // dims [2,3] with 5 values
  write_bytes(dir / "short.ubt", bad);
  CHECK(error_of([&] { load_tensor(dir / "short.ubt"); }).find("size mismatch") != std::string::npos);

  bad = bytes;
  bad.push_back(0);
  write_bytes(dir / "long.ubt", bad);
  CHECK(error_of([&] { load_tensor(dir / "long.ubt"); }).find("size mismatch") != std::string::npos);

  CHECK_THROWS_AS(load_tensor(dir / "missing.ubt"), ValidationError);
}

TEST_CASE("non-finite values are rejected unless marked as raw scores") {
  TempDir dir;
  auto t = Tensor::f64({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(save_tensor(t, dir / "nan.ubt"), ValidationError);
  t.mark_raw_scores();
  save_tensor(t, dir / "nan.ubt");
  CHECK(std::isnan(load_tensor(dir / "nan.ubt").at(1)));
}

TEST_CASE("tensor constructors validate the element count") {
  CHECK_THROWS_AS(Tensor::f64({2, 3}, {1, 2, 3, 4, 5}), ValidationError);
  CHECK_THROWS_AS(Tensor::f64({1, 1, 1, 1, 1, 1, 1, 1, 1}, {1}), ValidationError);
  const auto t = Tensor::i32({3}, {1, 2, 3});
  CHECK_THROWS_AS(t.f64_values(), ValidationError);
  CHECK(to_ints(t) == std::vector<int>{1, 2, 3});
}

TEST_CASE("Eigen conversions are row-major") {
  Eigen::MatrixXd m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const auto t = from_matrix(m);
  CHECK(t.dims() == Tensor::Dims{2, 3});
  CHECK(t.at(1) == 2.0);
  CHECK(t.at(3) == 4.0);
  CHECK(to_matrix(t) == m);
}

// ---------------------------------------------------------------------------

namespace {

// Minimal K=2 manifest with train and test splits written field by field.
struct ManifestFixture {
  TempDir dir;
  nlohmann::json doc;

  ManifestFixture() {
    save_tensor(Tensor::f32({4, 2}, {0, 0, 1, 1, 0, 1, 1, 0}), dir / "train_x.ubt");
    save_tensor(Tensor::i32({4}, {0, 1, 0, 1}), dir / "train_y.ubt");
    save_tensor(Tensor::f32({2, 2}, {0, 0, 1, 1}), dir / "test_x.ubt");
    save_tensor(Tensor::i32({2}, {1, 0}), dir / "test_y.ubt");
    doc = {{"name", "tiny"},
           {"classes", {"neg", "pos"}},
           {"splits",
            {{"train", {{"role", "train"}, {"embeddings", "train_x.ubt"}, {"labels", "train_y.ubt"}}},
             {"test", {{"role", "test"}, {"embeddings", "test_x.ubt"}, {"labels", "test_y.ubt"}}}}}};
  }

  fs::path write() {
    std::ofstream(dir / "manifest.json") << doc.dump();
    return dir / "manifest.json";
  }
};

}  // namespace

TEST_CASE("minimal valid manifest loads with two splits") {
  ManifestFixture f;
  const auto m = load_manifest(f.write());
  CHECK(m.name == "tiny");
  CHECK(m.num_classes() == 2);
  CHECK(m.splits.size() == 2);
  CHECK(m.first_with_role(SplitRole::test)->num_examples() == 2);
}

TEST_CASE("manifest row count mismatch names both counts") {
  ManifestFixture f;
  std::vector<int> labels(10, 0);
  save_tensor(Tensor::i32({10}, std::vector<std::int32_t>(labels.begin(), labels.end())), f.dir / "y10.ubt");
  save_tensor(Tensor::f32({9, 2}, std::vector<float>(18, 0.f)), f.dir / "x9.ubt");
  f.doc["splits"]["train"]["labels"] = "y10.ubt";
  f.doc["splits"]["train"]["embeddings"] = "x9.ubt";
  const auto msg = error_of([&] { load_manifest(f.write()); });
  CHECK(msg.find("9") != std::string::npos);
  CHECK(msg.find("10") != std::string::npos);
}

TEST_CASE("soft labels must sum to one per row") {
  ManifestFixture f;
  save_tensor(Tensor::f64({2, 2}, {0.7, 0.7, 0.5, 0.5}), f.dir / "soft.ubt");
  f.doc["splits"]["test"]["soft_labels"] = "soft.ubt";
  CHECK(error_of([&] { load_manifest(f.write()); }).find("row sum 1.4") != std::string::npos);
}

TEST_CASE("OOD label ids are only accepted in semantic_shift splits") {
  ManifestFixture f;
  f.doc["ood_classes"] = {"novel"};
  save_tensor(Tensor::i32({2}, {3, 0}), f.dir / "ood_y.ubt");
  f.doc["splits"]["test"]["labels"] = "ood_y.ubt";
  CHECK(error_of([&] { load_manifest(f.write()); }).find("label id 3") != std::string::npos);
  f.doc["splits"]["test"]["role"] = "semantic_shift";
  const auto m = load_manifest(f.write());
  CHECK(m.is_ood_label(3));
  CHECK_FALSE(m.is_ood_label(2));  // padding id
}

TEST_CASE("manifest schema errors") {
  ManifestFixture f;
  f.doc["splits"]["train"]["extra"] = 1;
  CHECK(error_of([&] { load_manifest(f.write()); }).find("unknown key") != std::string::npos);
  f.doc["splits"]["train"].erase("extra");
  f.doc["splits"]["train"]["role"] = "holdout";
  CHECK(error_of([&] { load_manifest(f.write()); }).find("unknown split role") != std::string::npos);
  f.doc["splits"]["train"]["role"] = "train";
  f.doc["classes"] = {"only"};
  CHECK(error_of([&] { load_manifest(f.write()); }).find("at least 2 classes") != std::string::npos);
  f.doc["classes"] = {"neg", "pos"};
  f.doc["splits"]["train"]["labels"] = "nope.ubt";
  CHECK(error_of([&] { load_manifest(f.write()); }).find("does not exist") != std::string::npos);
}

TEST_CASE("write_manifest round-trips every optional field") {
  TempDir dir;
  const auto m = synth::demo_dataset(5);
  const auto path = write_manifest(m, dir.path());
  auto back = load_manifest(path);
  // Loading renormalizes soft-label rows, which may move them by an ulp.
  auto& soft = back.splits.at("ambiguous").soft_labels;
  REQUIRE(soft.has_value());
  const auto& original = *m.splits.at("ambiguous").soft_labels;
  CHECK((to_matrix(*soft) - to_matrix(original)).cwiseAbs().maxCoeff() <= 1e-15);
  soft = original;
  CHECK(back == m);
  CHECK(back.first_with_role(SplitRole::subpopulation)->groups.has_value());
}
