#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "splitnas/tensor.hpp"
#include "test_support.hpp"

using namespace splitnas;

TEST_CASE("tensor shape and storage invariants", "[tensor]") {
  Tensor<float> t({2, 3, 4});
  REQUIRE(t.size() == 24);
  REQUIRE(numel(t.shape()) == static_cast<int64_t>(t.v().size()));
  REQUIRE_THROWS_AS(Tensor<float>({2, 0, 3}), DimensionError);
  REQUIRE_THROWS_AS(Tensor<float>::from({2, 2}, {1.f, 2.f, 3.f}), DimensionError);

  t.grad();
  REQUIRE(t.grad().size() == t.v().size());

  Tensor<float> alias = t;
  alias.v()[0] = 7.f;
  REQUIRE(t.v()[0] == 7.f);
  Tensor<float> deep = t.clone();
  deep.v()[0] = 9.f;
  REQUIRE(t.v()[0] == 7.f);
}

TEST_CASE("tensor blob round trip is bit-exact", "[tensor]") {
  auto check = [](auto tag) {
    using T = decltype(tag);
    std::mt19937_64 rng(42);
    for (int it = 0; it < 8; ++it) {
      int rank = 1 + static_cast<int>(rng() % 4);
      Shape shape;
      for (int r = 0; r < rank; ++r) shape.push_back(1 + static_cast<int64_t>(rng() % 5));
      Tensor<T> t = Tensor<T>::rand_uniform(shape, T(-3), T(3), rng);
      std::stringstream ss;
      blob::write(ss, t);
      std::string bytes = ss.str();
      std::stringstream ss2(bytes);
      Tensor<T> back = blob::read<T>(ss2);
      REQUIRE(back.shape() == t.shape());
      REQUIRE(std::memcmp(back.v().data(), t.v().data(), t.v().size() * sizeof(T)) == 0);
      // header layout: magic, version, dtype, rank, 4 reserved zeros
      REQUIRE(bytes.substr(0, 4) == "TBLB");
      REQUIRE(bytes[4] == 1);
      REQUIRE(bytes[5] == static_cast<char>(dtype_byte<T>::value));
      REQUIRE(bytes[6] == static_cast<char>(rank));
      for (int b = 7; b < 11; ++b) REQUIRE(bytes[static_cast<size_t>(b)] == 0);
    }
  };
  check(1.0f);
  check(1.0);
}

TEST_CASE("tensor blob rejects corruption", "[tensor]") {
  Tensor<double> t = testsup::rand_tensor<double>({3, 3}, 7);
  std::stringstream ss;
  blob::write(ss, t);
  std::string bytes = ss.str();

  {
    std::stringstream bad(bytes.substr(0, bytes.size() - 5));
    REQUIRE_THROWS_AS(blob::read<double>(bad), FormatError);
  }
  {
    std::string magic = bytes;
    magic[0] = 'X';
    std::stringstream bad(magic);
    REQUIRE_THROWS_AS(blob::read<double>(bad), FormatError);
  }
  {
    std::string ver = bytes;
    ver[4] = 9;
    std::stringstream bad(ver);
    REQUIRE_THROWS_AS(blob::read<double>(bad), FormatError);
  }
  {
    // dtype mismatch: stored f64, read as f32
    std::stringstream bad(bytes);
    REQUIRE_THROWS_AS(blob::read<float>(bad), FormatError);
  }
}

TEST_CASE("tensor blob file round trip", "[tensor]") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "splitnas_blob_test";
  fs::create_directories(dir);
  Tensor<float> t = testsup::rand_tensor<float>({4, 5}, 11);
  blob::save(dir / "t.tblb", t);
  Tensor<float> back = blob::load<float>(dir / "t.tblb");
  REQUIRE(std::memcmp(back.v().data(), t.v().data(), t.v().size() * sizeof(float)) == 0);
  REQUIRE(blob::peek_dtype(dir / "t.tblb") == 0);
  fs::remove_all(dir);
}
