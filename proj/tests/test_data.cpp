#include <newton_cnn/data.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

using namespace newton_cnn;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("newton_cnn_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void be32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

// two 3x2 images with pixel value 10*i + row-major position
void write_tiny_idx(const TempDir& dir) {
  std::vector<unsigned char> img;
  be32(img, 0x803);
  be32(img, 2);   // images
  be32(img, 3);   // rows
  be32(img, 2);   // cols
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 6; ++k) img.push_back(static_cast<unsigned char>(10 * i + k));
  write_bytes(dir.file("img.idx"), img);

  std::vector<unsigned char> lab;
  be32(lab, 0x801);
  be32(lab, 2);
  lab.push_back(7);
  lab.push_back(2);
  write_bytes(dir.file("lab.idx"), lab);
}

}  // namespace

TEST_CASE("idx pair loads with the image laid out column-down", "[data]") {
  TempDir dir;
  write_tiny_idx(dir);
  Dataset ds = load_idx(dir.file("img.idx"), dir.file("lab.idx"));
  CHECK(ds.a == 3);
  CHECK(ds.b == 2);
  CHECK(ds.d == 1);
  REQUIRE(ds.size() == 2);
  CHECK(ds.raw_labels == std::vector<int>{7, 2});
  // source pixel (r, c) of image i has value 10*i + r*2 + c and must land
  // at column i*6 + r + c*3
  for (int i = 0; i < 2; ++i)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 2; ++c)
        CHECK(ds.images(0, i * 6 + r + c * 3) == double(10 * i + r * 2 + c));
}

TEST_CASE("idx loader rejects malformed files", "[data]") {
  TempDir dir;
  write_tiny_idx(dir);

  std::vector<unsigned char> bad;
  be32(bad, 0x802);
  be32(bad, 1);
  be32(bad, 1);
  be32(bad, 1);
  bad.push_back(0);
  write_bytes(dir.file("bad.idx"), bad);
  CHECK_THROWS_WITH(load_idx(dir.file("bad.idx"), dir.file("lab.idx")),
                    Catch::Matchers::ContainsSubstring("magic"));

  std::vector<unsigned char> lab3;
  be32(lab3, 0x801);
  be32(lab3, 3);
  lab3.insert(lab3.end(), {0, 1, 2});
  write_bytes(dir.file("lab3.idx"), lab3);
  CHECK_THROWS_WITH(load_idx(dir.file("img.idx"), dir.file("lab3.idx")),
                    Catch::Matchers::ContainsSubstring("does not match"));

  std::vector<unsigned char> trunc;
  be32(trunc, 0x803);
  be32(trunc, 2);
  be32(trunc, 3);
  be32(trunc, 2);
  for (int k = 0; k < 8; ++k) trunc.push_back(0);  // 4 pixels short
  write_bytes(dir.file("trunc.idx"), trunc);
  CHECK_THROWS_WITH(load_idx(dir.file("trunc.idx"), dir.file("lab.idx")),
                    Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("csv rows are label plus channel planes in row-major order", "[data]") {
  TempDir dir;
  {
    std::ofstream out(dir.file("d.csv"));
    // a=2, b=3, d=2: 12 pixels per row; plane 0 = 1..6, plane 1 = 101..106
    out << "4,1,2,3,4,5,6,101,102,103,104,105,106\n";
    out << "0,0,0,0,0,0,0,0,0,0,0,0,0\n";
  }
  Dataset ds = load_csv(dir.file("d.csv"), 2, 3, 2);
  REQUIRE(ds.size() == 2);
  CHECK(ds.raw_labels == std::vector<int>{4, 0});
  for (int j = 0; j < 2; ++j)
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        CHECK(ds.images(j, 0 * 6 + r + c * 2) == double(100 * j + r * 3 + c + 1));
}

TEST_CASE("csv loader names the offending line", "[data]") {
  TempDir dir;
  {
    std::ofstream out(dir.file("short.csv"));
    out << "1,1,2,3,4\n1,1,2,3\n";
  }
  CHECK_THROWS_WITH(load_csv(dir.file("short.csv"), 2, 2, 1),
                    Catch::Matchers::ContainsSubstring(":2:"));
  {
    std::ofstream out(dir.file("badlab.csv"));
    out << "1.5,1,2,3,4\n";
  }
  CHECK_THROWS_WITH(load_csv(dir.file("badlab.csv"), 2, 2, 1),
                    Catch::Matchers::ContainsSubstring("label"));
  {
    std::ofstream out(dir.file("garbage.csv"));
    out << "1,1,x,3,4\n";
  }
  CHECK_THROWS_WITH(load_csv(dir.file("garbage.csv"), 2, 2, 1),
                    Catch::Matchers::ContainsSubstring("expected a number"));
}

TEST_CASE("preprocessing scales per image then centres by the training mean", "[data]") {
  Dataset train;
  train.a = 2, train.b = 2, train.d = 1;
  train.raw_labels = {0, 1};
  train.images.resize(1, 8);
  train.images << 2, 4, 6, 10,   // image 0: min 2, max 10
      5, 5, 5, 5;                // image 1: constant, must map to zeros
  Dataset test = train;
  test.raw_labels = {1, 0};
  test.images << 0, 1, 2, 4, 1, 3, 1, 3;

  preprocess(train, &test);

  // scaled image 0: (v-2)/8 = 0, .25, .5, 1; image 1: zeros
  // training mean per position: half of image 0's scaled values
  Vector mean(4);
  mean << 0, 0.125, 0.25, 0.5;
  Vector img0(4), img1(4);
  img0 << 0, 0.25, 0.5, 1.0;
  img1 << 0, 0, 0, 0;
  for (int k = 0; k < 4; ++k) {
    CHECK(train.images(0, k) == Catch::Approx(img0[k] - mean[k]));
    CHECK(train.images(0, 4 + k) == Catch::Approx(img1[k] - mean[k]));
  }
  // test image 0 scales by its own min/max (0..4) then shifts by the train mean
  Vector t0(4);
  t0 << 0, 0.25, 0.5, 1.0;
  for (int k = 0; k < 4; ++k)
    CHECK(test.images(0, k) == Catch::Approx(t0[k] - mean[k]));
}

TEST_CASE("one-hot encoding and its range check", "[data]") {
  Dataset ds;
  ds.a = 1, ds.b = 1, ds.d = 1;
  ds.raw_labels = {2, 0, 1};
  ds.images = Matrix::Zero(1, 3);
  one_hot(ds, 3);
  Matrix expect(3, 3);
  expect << 0, 1, 0, 0, 0, 1, 1, 0, 0;
  CHECK((ds.labels - expect).cwiseAbs().maxCoeff() == 0.0);
  ds.raw_labels = {3};
  CHECK_THROWS_WITH(one_hot(ds, 3), Catch::Matchers::ContainsSubstring("outside"));
}

TEST_CASE("accuracy takes the smallest index on ties", "[data]") {
  Matrix out(3, 4);
  out << 1, 0, 5, 2,    //
      1, 3, 5, 2,       //
      0, 3, 5, 9;
  // argmax per column with ties to the smallest index: 0, 1, 0, 2
  CHECK(accuracy(out, {0, 1, 0, 2}) == 1.0);
  CHECK(accuracy(out, {0, 2, 1, 2}) == 0.5);
}

TEST_CASE("stratified subsampling keeps per-class proportions", "[data]") {
  Dataset ds;
  ds.a = 1, ds.b = 2, ds.d = 1;
  const int counts[3] = {10, 5, 1};
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < counts[c]; ++k) ds.raw_labels.push_back(c);
  const Index l = ds.size();
  ds.images.resize(1, 2 * l);
  for (Index i = 0; i < l; ++i) {
    ds.images(0, 2 * i) = double(i);  // identify the instance by its pixels
    ds.images(0, 2 * i + 1) = double(ds.raw_labels[static_cast<std::size_t>(i)]);
  }
  one_hot(ds, 3);

  Dataset sub = stratified_subset(ds, 0.4, 99);
  REQUIRE(sub.size() == 4 + 2 + 1);
  int got[3] = {0, 0, 0};
  double prev_id = -1.0;
  for (Index i = 0; i < sub.size(); ++i) {
    ++got[sub.raw_labels[static_cast<std::size_t>(i)]];
    // each copied image must be intact and in original order
    CHECK(sub.images(0, 2 * i + 1) == double(sub.raw_labels[static_cast<std::size_t>(i)]));
    CHECK(sub.images(0, 2 * i) > prev_id);
    prev_id = sub.images(0, 2 * i);
    CHECK(sub.labels(sub.raw_labels[static_cast<std::size_t>(i)], i) == 1.0);
  }
  CHECK(got[0] == 4);
  CHECK(got[1] == 2);
  CHECK(got[2] == 1);  // round(0.4) == 0 but a represented class keeps one

  // deterministic per seed
  Dataset again = stratified_subset(ds, 0.4, 99);
  CHECK(again.images == sub.images);
  CHECK(again.raw_labels == sub.raw_labels);
}
