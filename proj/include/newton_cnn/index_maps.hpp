#pragma once

#include <newton_cnn/types.hpp>

#include <ostream>

namespace newton_cnn {

// Precomputed index tables replace every sparse 0/1 operator in the network:
// the sub-image (im2col) expansion, zero-padding, and max-pooling selection
// are all "gather rows by index" in one direction and "accumulate values by
// index" in the other.

// Sub-image expansion table for one image of size a x b with d channels
// (height a, width b, channel-fastest storage: element (row r, col c,
// channel j) has linear index (r + c*a)*d + j).  idx lists, for every entry
// of the expanded matrix, the source position in the input image vector.
// Entry order: window-row offset fastest, then window-column offset, then
// channel, then window position down the image, then across.
struct PhiIndex {
  IndexVector idx;            // length h*h*d*out_a*out_b, 0-based
  int a = 0, b = 0, d = 0;    // input image height, width, channels
  int h = 0, s = 0;           // window size, stride
  int out_a = 0, out_b = 0;   // window grid: out_a down, out_b across

  Index in_size() const { return Index(d) * a * b; }
  Index rows() const { return Index(h) * h * d; }       // expanded rows per window
  Index cols() const { return Index(out_a) * out_b; }   // windows per image
};

inline PhiIndex build_phi_index(int a, int b, int d, int h, int s) {
  require(a >= 1 && b >= 1 && d >= 1, "build_phi_index: image dimensions must be positive");
  require(h >= 1 && s >= 1, "build_phi_index: window size and stride must be positive");
  require(h <= a && h <= b, "build_phi_index: window does not fit inside the image");
  PhiIndex t;
  t.a = a; t.b = b; t.d = d; t.h = h; t.s = s;
  t.out_a = (a - h) / s + 1;
  t.out_b = (b - h) / s + 1;
  t.idx.resize(static_cast<std::size_t>(t.rows() * t.cols()));
  std::size_t k = 0;
  for (int wb = 0; wb < t.out_b; ++wb)
    for (int wa = 0; wa < t.out_a; ++wa)
      for (int j = 0; j < d; ++j)
        for (int q = 0; q < h; ++q)
          for (int p = 0; p < h; ++p)
            t.idx[k++] = (Index(wa) * s + p + (Index(wb) * s + q) * a) * d + j;
  return t;
}

// Stacked batches are processed through raw storage, so views passed in must
// be dense column-major blocks (full-height column ranges are fine).
inline void require_contiguous(const Eigen::Ref<const Matrix>& m, const char* who) {
  require(m.outerStride() == m.rows(), std::string(who) + ": batch view must be contiguous");
}

// Applies the expansion to a batch stored as d x (a*b*l): returns the
// (h*h*d) x (out_a*out_b*l) stack whose per-instance blocks hold one window
// per column.  Pure gather; the inverse direction is accumulate_by_index.
inline Matrix gather(const PhiIndex& t, const Eigen::Ref<const Matrix>& batch) {
  require_contiguous(batch, "gather");
  require(batch.rows() == t.d, "gather: channel count mismatch");
  require(batch.cols() % (Index(t.a) * t.b) == 0, "gather: batch width is not a multiple of the image size");
  const Index l = batch.cols() / (Index(t.a) * t.b);
  const Index per_in = t.in_size();
  const Index per_out = static_cast<Index>(t.idx.size());
  Matrix out(t.rows(), t.cols() * l);
  const double* src = batch.data();
  double* dst = out.data();
  for (Index i = 0; i < l; ++i) {
    const double* s_i = src + i * per_in;
    double* d_i = dst + i * per_out;
    for (Index k = 0; k < per_out; ++k) d_i[k] = s_i[t.idx[static_cast<std::size_t>(k)]];
  }
  return out;
}

// Zero-padding table: for each element of a d-channel a x b image (in linear
// order), the position it occupies inside the zero-padded (a+2p) x (b+2p)
// frame.  The input sits centred; all other padded positions are zero.
struct PadIndex {
  IndexVector idx;            // length d*a*b, 0-based into the padded vector
  int a = 0, b = 0, d = 0, pad = 0;
  int a_pad = 0, b_pad = 0;

  Index in_size() const { return Index(d) * a * b; }
  Index out_size() const { return Index(d) * a_pad * b_pad; }
};

inline PadIndex build_pad_index(int a, int b, int d, int pad) {
  require(a >= 1 && b >= 1 && d >= 1, "build_pad_index: image dimensions must be positive");
  require(pad >= 0, "build_pad_index: padding must be non-negative");
  PadIndex t;
  t.a = a; t.b = b; t.d = d; t.pad = pad;
  t.a_pad = a + 2 * pad;
  t.b_pad = b + 2 * pad;
  t.idx.resize(static_cast<std::size_t>(t.in_size()));
  std::size_t k = 0;
  for (int c = 0; c < b; ++c)
    for (int r = 0; r < a; ++r)
      for (int j = 0; j < d; ++j)
        t.idx[k++] = (Index(r) + pad + (Index(c) + pad) * t.a_pad) * d + j;
  return t;
}

// Scatters a batch d x (a*b*l) into its zero-padded frames, d x (a_pad*b_pad*l).
inline Matrix pad(const PadIndex& t, const Eigen::Ref<const Matrix>& batch) {
  require_contiguous(batch, "pad");
  require(batch.rows() == t.d, "pad: channel count mismatch");
  require(batch.cols() % (Index(t.a) * t.b) == 0, "pad: batch width is not a multiple of the image size");
  const Index l = batch.cols() / (Index(t.a) * t.b);
  Matrix out = Matrix::Zero(t.d, Index(t.a_pad) * t.b_pad * l);
  const Index per_in = t.in_size(), per_out = t.out_size();
  const double* src = batch.data();
  double* dst = out.data();
  for (Index i = 0; i < l; ++i)
    for (Index k = 0; k < per_in; ++k)
      dst[i * per_out + t.idx[static_cast<std::size_t>(k)]] = src[i * per_in + k];
  return out;
}

// Reads the un-padded image back out of each padded frame (the transpose of
// pad, since every row of the padding operator has a single 1).
inline Matrix unpad(const PadIndex& t, const Eigen::Ref<const Matrix>& padded) {
  require_contiguous(padded, "unpad");
  require(padded.rows() == t.d, "unpad: channel count mismatch");
  require(padded.cols() % (Index(t.a_pad) * t.b_pad) == 0, "unpad: batch width is not a multiple of the padded size");
  const Index l = padded.cols() / (Index(t.a_pad) * t.b_pad);
  Matrix out(t.d, Index(t.a) * t.b * l);
  const Index per_in = t.in_size(), per_out = t.out_size();
  const double* src = padded.data();
  double* dst = out.data();
  for (Index i = 0; i < l; ++i)
    for (Index k = 0; k < per_in; ++k)
      dst[i * per_in + k] = src[i * per_out + t.idx[static_cast<std::size_t>(k)]];
  return out;
}

// out[idx[k]] += values[k] over all k, in index order (deterministic).  This
// realizes v |-> P^T v for any selection operator P whose rows each contain a
// single 1, with P described by its per-row source positions.
inline Vector accumulate_by_index(const Eigen::Ref<const Vector>& values, const IndexVector& idx, Index out_size) {
  require(values.size() == static_cast<Index>(idx.size()), "accumulate_by_index: value/index length mismatch");
  Vector out = Vector::Zero(out_size);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] >= 0 && idx[k] < out_size, "accumulate_by_index: index out of range");
    out[idx[k]] += values[static_cast<Index>(k)];
  }
  return out;
}

// Replicates a base index table across `copies` blocks of size `block`:
// copy c maps entry k to base[k] + c*block.  Lets one accumulate_by_index
// call process a whole batch of stacked images.
inline IndexVector batch_offset_indices(const IndexVector& base, Index block, Index copies) {
  require(block >= 0 && copies >= 0, "batch_offset_indices: block and copies must be non-negative");
  IndexVector out(base.size() * static_cast<std::size_t>(copies));
  std::size_t k = 0;
  for (Index c = 0; c < copies; ++c)
    for (Index b : base) out[k++] = b + c * block;
  return out;
}

// Batched accumulate without materialising the offset table: equivalent to
// accumulate_by_index(values, batch_offset_indices(base, block, copies),
// block*copies) but O(1) extra memory.
inline Vector accumulate_batched(const Eigen::Ref<const Vector>& values, const IndexVector& base, Index block, Index copies) {
  const Index n = static_cast<Index>(base.size());
  require(values.size() == n * copies, "accumulate_batched: value length mismatch");
  Vector out = Vector::Zero(block * copies);
  const double* src = values.data();
  double* dst = out.data();
  for (Index c = 0; c < copies; ++c) {
    const double* s_c = src + c * n;
    double* d_c = dst + c * block;
    for (Index k = 0; k < n; ++k) d_c[base[static_cast<std::size_t>(k)]] += s_c[k];
  }
  return out;
}

// Winner positions of max pooling: idx(k, i) is the linear index (within
// instance i's pre-pooling stack of size `block` = d*a*b) of the element that
// won pooling window k.  Ties go to the smallest linear index.
struct PoolArgmax {
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> idx;  // (d*out_a*out_b) x l
  Index block = 0;

  bool empty() const { return idx.size() == 0; }
};

// Writes an index table one 1-based position per line (debug aid; the same
// format regardless of which map produced it).
inline void dump_indices(std::ostream& os, const IndexVector& idx) {
  for (Index v : idx) os << (v + 1) << '\n';
}

}  // namespace newton_cnn
