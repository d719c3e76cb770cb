#pragma once

#include <newton_cnn/types.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

namespace newton_cnn {

// Images are stored the way every kernel consumes them: one matrix of
// d rows and a*b*l columns, instance blocks side by side, each block's
// columns running down the image first (element (r, c, channel j) of
// instance i sits at column i*a*b + r + c*a, row j).
struct Dataset {
  Matrix images;                // d x (a*b*l)
  Matrix labels;                // K x l one-hot (filled by one_hot)
  std::vector<int> raw_labels;  // l class ids, 0-based
  int a = 0, b = 0, d = 0;

  Index size() const { return static_cast<Index>(raw_labels.size()); }
  Index image_size() const { return Index(d) * a * b; }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& file) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) fail(file + ": truncated header");
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

}  // namespace detail

// Loads an images/labels pair in IDX format (big-endian headers, unsigned
// byte payloads: magic 0x00000803 for images, 0x00000801 for labels).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) fail(images_path + ": cannot open");
  const std::uint32_t img_magic = detail::read_be32(img, images_path);
  if (img_magic != 0x00000803)
    fail(images_path + ": bad magic " + std::to_string(img_magic) + " (expected 2051)");
  const std::uint32_t n = detail::read_be32(img, images_path);
  const std::uint32_t rows = detail::read_be32(img, images_path);
  const std::uint32_t cols = detail::read_be32(img, images_path);
  require(n > 0 && rows > 0 && cols > 0, images_path + ": empty image file");

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) fail(labels_path + ": cannot open");
  const std::uint32_t lab_magic = detail::read_be32(lab, labels_path);
  if (lab_magic != 0x00000801)
    fail(labels_path + ": bad magic " + std::to_string(lab_magic) + " (expected 2049)");
  const std::uint32_t n_lab = detail::read_be32(lab, labels_path);
  if (n_lab != n)
    fail(labels_path + ": label count " + std::to_string(n_lab) +
         " does not match image count " + std::to_string(n));

  Dataset ds;
  ds.a = static_cast<int>(rows);
  ds.b = static_cast<int>(cols);
  ds.d = 1;
  ds.images.resize(1, Index(rows) * cols * n);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!img) fail(images_path + ": truncated at image " + std::to_string(i));
    double* dst = ds.images.data() + Index(i) * rows * cols;
    // IDX pixels are row-major; our columns run down the image first.
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c)
        dst[r + Index(c) * rows] = double(buf[r * cols + c]);
  }
  ds.raw_labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    int ch = lab.get();
    if (ch < 0) fail(labels_path + ": truncated at label " + std::to_string(i));
    ds.raw_labels[i] = ch;
  }
  return ds;
}

// Loads rows of "label,pixel,pixel,..." with pixels in channel planes, each
// plane row-major.  Image dimensions come from the caller (the model config);
// every row must carry exactly d*a*b pixels.
inline Dataset load_csv(const std::string& path, int a, int b, int d) {
  require(a >= 1 && b >= 1 && d >= 1, "load_csv: image dimensions must be positive");
  std::ifstream in(path);
  if (!in) fail(path + ": cannot open");
  const Index per_image = Index(d) * a * b;
  std::vector<double> pixels;
  std::vector<int> labels;
  std::string line;
  int line_no = 0;
  std::vector<double> row;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    row.clear();
    const char* p = line.c_str();
    char* end = nullptr;
    while (true) {
      double v = std::strtod(p, &end);
      if (end == p)
        fail(path + ":" + std::to_string(line_no) + ": expected a number at '" +
             std::string(p).substr(0, 8) + "'");
      row.push_back(v);
      p = end;
      while (*p == ' ') ++p;
      if (*p == ',') { ++p; continue; }
      if (*p == '\0' || *p == '\r') break;
      fail(path + ":" + std::to_string(line_no) + ": unexpected character '" + *p + "'");
    }
    if (static_cast<Index>(row.size()) != per_image + 1)
      fail(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(per_image + 1) +
           " fields (label + " + std::to_string(per_image) + " pixels), got " +
           std::to_string(row.size()));
    const double lab = row[0];
    if (lab < 0 || lab != std::floor(lab))
      fail(path + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
    labels.push_back(static_cast<int>(lab));
    pixels.insert(pixels.end(), row.begin() + 1, row.end());
  }
  require(!labels.empty(), path + ": no data rows");
  Dataset ds;
  ds.a = a; ds.b = b; ds.d = d;
  ds.raw_labels = std::move(labels);
  const Index l = ds.size();
  ds.images.resize(d, Index(a) * b * l);
  for (Index i = 0; i < l; ++i) {
    const double* src = pixels.data() + i * per_image;   // planes, row-major
    double* dst = ds.images.data() + i * per_image;      // channel-fastest, column-major
    for (int j = 0; j < d; ++j)
      for (int r = 0; r < a; ++r)
        for (int c = 0; c < b; ++c)
          dst[(Index(r) + Index(c) * a) * d + j] = src[Index(j) * a * b + Index(r) * b + c];
  }
  return ds;
}

// Normalizes each image to [0,1] by its own min/max (a constant image maps
// to all zeros), then centres every pixel position by its mean over the
// training set.  The same training mean is subtracted from the test set.
inline void preprocess(Dataset& train, Dataset* test = nullptr) {
  auto minmax_scale = [](Dataset& ds) {
    const Index per = ds.image_size();
    for (Index i = 0; i < ds.size(); ++i) {
      double* v = ds.images.data() + i * per;
      double lo = v[0], hi = v[0];
      for (Index k = 1; k < per; ++k) { lo = std::min(lo, v[k]); hi = std::max(hi, v[k]); }
      if (hi > lo) {
        const double scale = 1.0 / (hi - lo);
        for (Index k = 0; k < per; ++k) v[k] = (v[k] - lo) * scale;
      } else {
        for (Index k = 0; k < per; ++k) v[k] = 0.0;
      }
    }
  };
  minmax_scale(train);
  if (test) {
    require(test->image_size() == train.image_size(),
            "preprocess: train and test image sizes differ");
    minmax_scale(*test);
  }
  const Index per = train.image_size();
  Vector mean = Vector::Zero(per);
  for (Index i = 0; i < train.size(); ++i)
    mean += Eigen::Map<const Vector>(train.images.data() + i * per, per);
  mean /= double(train.size());
  for (Index i = 0; i < train.size(); ++i)
    Eigen::Map<Vector>(train.images.data() + i * per, per) -= mean;
  if (test)
    for (Index i = 0; i < test->size(); ++i)
      Eigen::Map<Vector>(test->images.data() + i * per, per) -= mean;
}

// Fills the one-hot label matrix (K x l).  Every raw label must lie in [0, K).
inline void one_hot(Dataset& ds, int num_classes) {
  require(num_classes >= 1, "one_hot: class count must be positive");
  ds.labels = Matrix::Zero(num_classes, ds.size());
  for (Index i = 0; i < ds.size(); ++i) {
    const int c = ds.raw_labels[static_cast<std::size_t>(i)];
    require(c >= 0 && c < num_classes,
            "one_hot: label " + std::to_string(c) + " of instance " + std::to_string(i) +
            " is outside [0, " + std::to_string(num_classes) + ")");
    ds.labels(c, i) = 1.0;
  }
}

// Fraction of instances whose highest network output matches the label.
// Ties pick the smallest output index.
inline double accuracy(const Matrix& outputs, const std::vector<int>& raw_labels) {
  require(outputs.cols() == static_cast<Index>(raw_labels.size()),
          "accuracy: output/label count mismatch");
  require(outputs.rows() >= 1, "accuracy: empty outputs");
  Index hits = 0;
  for (Index i = 0; i < outputs.cols(); ++i) {
    int best = 0;
    for (int k = 1; k < outputs.rows(); ++k)
      if (outputs(k, i) > outputs(best, i)) best = k;
    if (best == raw_labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return double(hits) / double(outputs.cols());
}

// Per-class sample without replacement: class c contributes
// round(fraction * count_c) instances (at least one if the class is
// non-empty and fraction > 0).  Output preserves original instance order.
inline Dataset stratified_subset(const Dataset& ds, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "stratified_subset: fraction must be in (0, 1]");
  int num_classes = 0;
  for (int c : ds.raw_labels) num_classes = std::max(num_classes, c + 1);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(num_classes));
  for (Index i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.raw_labels[static_cast<std::size_t>(i)])].push_back(i);

  std::mt19937_64 gen(seed);
  std::vector<Index> chosen;
  for (auto& members : by_class) {
    if (members.empty()) continue;
    auto want = static_cast<std::size_t>(std::llround(fraction * double(members.size())));
    want = std::max<std::size_t>(want, 1);
    want = std::min(want, members.size());
    for (std::size_t k = 0; k < want; ++k) {  // partial Fisher-Yates
      std::uniform_int_distribution<std::size_t> pick(k, members.size() - 1);
      std::swap(members[k], members[pick(gen)]);
    }
    chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(want));
  }
  std::sort(chosen.begin(), chosen.end());

  Dataset out;
  out.a = ds.a; out.b = ds.b; out.d = ds.d;
  const Index per = ds.image_size();
  out.images.resize(ds.d, (per / ds.d) * static_cast<Index>(chosen.size()));
  out.raw_labels.resize(chosen.size());
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    Eigen::Map<Vector>(out.images.data() + static_cast<Index>(k) * per, per) =
        Eigen::Map<const Vector>(ds.images.data() + chosen[k] * per, per);
    out.raw_labels[k] = ds.raw_labels[static_cast<std::size_t>(chosen[k])];
  }
  if (ds.labels.size() > 0) {
    out.labels.resize(ds.labels.rows(), static_cast<Index>(chosen.size()));
    for (std::size_t k = 0; k < chosen.size(); ++k)
      out.labels.col(static_cast<Index>(k)) = ds.labels.col(chosen[k]);
  }
  return out;
}

}  // namespace newton_cnn
