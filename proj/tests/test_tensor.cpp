#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "cseg/tensor.hpp"
#include "test_util.hpp"

using namespace cseg;

TEST_CASE("shape and layout invariants") {
  Tensor t({2, 3, 4, 4, 4});
  CHECK(t.numel() == 2 * 3 * 64);
  CHECK(t.rank() == 5);
  // width is the fastest axis
  t.at5(0, 0, 0, 0, 1) = 7.0f;
  CHECK(t[1] == 7.0f);
  t.at5(1, 2, 3, 3, 3) = 9.0f;
  CHECK(t[t.numel() - 1] == 9.0f);

  CHECK_THROWS_AS(Tensor({0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor({1, 2, 3, 4, 5, 6}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST_CASE("finiteness guard") {
  Tensor t({2, 2});
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(ensure_finite(t, "test"), NumericError);
}

TEST_CASE("binary round trip preserves bytes") {
  Rng rng(42);
  Tensor t = testing::random_tensor_f({3, 2, 4, 5, 6}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  Tensor u = read_tensor<float>(ss);
  CHECK(u.shape() == t.shape());
  CHECK(checksum(u) == checksum(t));
}

TEST_CASE("format header layout") {
  Tensor t({2, 3});
  t[0] = 1.5f;
  std::stringstream ss;
  write_tensor(ss, t);
  std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 1 + 2 * 4 + 6 * 4);
  CHECK(bytes.substr(0, 4) == "CSTN");
  CHECK(bytes[4] == 2);
  // little-endian u32 extents
  CHECK(static_cast<unsigned char>(bytes[5]) == 2);
  CHECK(static_cast<unsigned char>(bytes[6]) == 0);
  CHECK(static_cast<unsigned char>(bytes[9]) == 3);
}

TEST_CASE("bad magic rejected") {
  std::stringstream ss;
  ss << "NOPE" << std::string(16, '\0');
  CHECK_THROWS_AS(read_tensor<float>(ss), IoError);
}

TEST_CASE("truncated payload rejected") {
  Tensor t({4, 4});
  std::stringstream ss;
  write_tensor(ss, t);
  std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_tensor<float>(cut), IoError);
}

TEST_CASE("concat and split are inverse") {
  Rng rng(7);
  Tensor a = testing::random_tensor_f({2, 3, 2, 2, 2}, rng);
  Tensor b = testing::random_tensor_f({2, 5, 2, 2, 2}, rng);
  Tensor c = concat_channels(a, b);
  CHECK(c.shape() == std::vector<int>({2, 8, 2, 2, 2}));
  auto [a2, b2] = split_channels(c, 3);
  CHECK(checksum(a2) == checksum(a));
  CHECK(checksum(b2) == checksum(b));
  for (int n = 0; n < 2; ++n)
    for (int ch = 0; ch < 3; ++ch) CHECK(c.at5(n, ch, 1, 0, 1) == a.at5(n, ch, 1, 0, 1));
}

TEST_CASE("file round trip") {
  Rng rng(3);
  Tensor t = testing::random_tensor_f({4, 4, 4}, rng);
  auto path = std::filesystem::temp_directory_path() / "cstn_roundtrip.bin";
  save_tensor(path.string(), t);
  Tensor u = load_tensor<float>(path.string());
  CHECK(checksum(u) == checksum(t));
  std::filesystem::remove(path);
}
