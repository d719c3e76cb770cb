#pragma once

#include <newton_cnn/index_maps.hpp>
#include <newton_cnn/types.hpp>

#include <cmath>
#include <istream>
#include <random>
#include <sstream>
#include <string>

namespace newton_cnn {

enum class LayerKind { Conv, Fc };

// One layer as the user writes it.  Convolution layers may carry a trailing
// max-pooling stage (pool = window size and stride; 0 = none).
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int filter_size = 0;   // conv: window height = width
  int out_channels = 0;  // conv: number of filters
  int stride = 1;        // conv
  int pad = 0;           // conv: zero-padding on every border
  int pool = 0;          // conv: max-pooling window (stride equals window), 0 = none
  int out_neurons = 0;   // fc
};

struct ModelConfig {
  int input_height = 0, input_width = 0, input_channels = 0;
  std::vector<LayerSpec> layers;
};

// Everything derivable from a ModelConfig: per-layer geometry and the layout
// of the flat parameter vector (per layer: column-major weight block, then
// bias block).
struct LayerShape {
  LayerKind kind = LayerKind::Conv;
  // conv geometry
  int a_in = 0, b_in = 0, d_in = 0;      // image entering the layer
  int pad = 0, a_pad = 0, b_pad = 0;     // after zero-padding
  int h = 0, stride = 0;                 // filter window
  int d_out = 0;                         // filters
  int a_conv = 0, b_conv = 0;            // after convolution
  int pool = 0;                          // pooling window (0 = none)
  int a_out = 0, b_out = 0;              // after pooling
  // fc geometry
  int n_in = 0, n_out = 0;
  // parameter segment
  Index w_offset = 0, w_rows = 0, w_cols = 0, b_offset = 0, b_len = 0;

  Index out_size() const {
    return kind == LayerKind::Conv ? Index(d_out) * a_out * b_out : Index(n_out);
  }
};

struct ShapeTable {
  std::vector<LayerShape> layers;
  int conv_layers = 0;       // conv layers come first; the rest are fc
  int num_classes = 0;       // output dimension of the whole network
  Index total_params = 0;
};

inline ShapeTable derive_shapes(const ModelConfig& cfg) {
  require(cfg.input_height >= 1 && cfg.input_width >= 1 && cfg.input_channels >= 1,
          "model: input dimensions must be positive");
  require(!cfg.layers.empty(), "model: at least one layer is required");
  ShapeTable t;
  int a = cfg.input_height, b = cfg.input_width, d = cfg.input_channels;
  bool seen_fc = false;
  Index offset = 0;
  for (std::size_t m = 0; m < cfg.layers.size(); ++m) {
    const LayerSpec& spec = cfg.layers[m];
    const std::string where = "layer " + std::to_string(m + 1);
    LayerShape sh;
    sh.kind = spec.kind;
    if (spec.kind == LayerKind::Conv) {
      require(!seen_fc, where + ": convolution layers must precede fully-connected layers");
      require(spec.filter_size >= 1, where + ": filter size must be positive");
      require(spec.out_channels >= 1, where + ": filter count must be positive");
      require(spec.stride >= 1, where + ": stride must be positive");
      require(spec.pad >= 0, where + ": padding must be non-negative");
      sh.a_in = a; sh.b_in = b; sh.d_in = d;
      sh.pad = spec.pad;
      sh.a_pad = a + 2 * spec.pad;
      sh.b_pad = b + 2 * spec.pad;
      sh.h = spec.filter_size;
      sh.stride = spec.stride;
      sh.d_out = spec.out_channels;
      require(sh.h <= sh.a_pad && sh.h <= sh.b_pad,
              where + ": filter does not fit inside the padded image ("
              + std::to_string(sh.a_pad) + "x" + std::to_string(sh.b_pad) + ")");
      sh.a_conv = (sh.a_pad - sh.h) / sh.stride + 1;
      sh.b_conv = (sh.b_pad - sh.h) / sh.stride + 1;
      require(sh.a_conv >= 1 && sh.b_conv >= 1, where + ": convolution output is empty");
      sh.pool = spec.pool;
      if (spec.pool > 0) {
        sh.a_out = sh.a_conv / spec.pool;
        sh.b_out = sh.b_conv / spec.pool;
        require(sh.a_out >= 1 && sh.b_out >= 1,
                where + ": pooling output is empty (input "
                + std::to_string(sh.a_conv) + "x" + std::to_string(sh.b_conv)
                + ", window " + std::to_string(spec.pool) + ")");
      } else {
        sh.a_out = sh.a_conv;
        sh.b_out = sh.b_conv;
      }
      sh.w_rows = sh.d_out;
      sh.w_cols = Index(sh.h) * sh.h * sh.d_in;
      sh.b_len = sh.d_out;
      a = sh.a_out; b = sh.b_out; d = sh.d_out;
      ++t.conv_layers;
    } else {
      require(spec.out_neurons >= 1, where + ": output size must be positive");
      sh.n_in = seen_fc ? t.layers.back().n_out : d * a * b;
      sh.n_out = spec.out_neurons;
      sh.w_rows = sh.n_out;
      sh.w_cols = sh.n_in;
      sh.b_len = sh.n_out;
      seen_fc = true;
    }
    sh.w_offset = offset;
    offset += sh.w_rows * sh.w_cols;
    sh.b_offset = offset;
    offset += sh.b_len;
    t.layers.push_back(sh);
  }
  t.total_params = offset;
  const LayerShape& last = t.layers.back();
  t.num_classes = last.kind == LayerKind::Fc
                      ? last.n_out
                      : last.d_out * last.a_out * last.b_out;
  return t;
}

inline Index param_count(const ModelConfig& cfg) { return derive_shapes(cfg).total_params; }

// Weight/bias views into a flat parameter (or gradient) vector.
inline Eigen::Map<const Matrix> weight(const ShapeTable& t, const Vector& theta, int m) {
  const LayerShape& sh = t.layers[static_cast<std::size_t>(m)];
  return {theta.data() + sh.w_offset, sh.w_rows, sh.w_cols};
}
inline Eigen::Map<Matrix> weight(const ShapeTable& t, Vector& theta, int m) {
  const LayerShape& sh = t.layers[static_cast<std::size_t>(m)];
  return {theta.data() + sh.w_offset, sh.w_rows, sh.w_cols};
}
inline Eigen::Map<const Vector> layer_bias(const ShapeTable& t, const Vector& theta, int m) {
  const LayerShape& sh = t.layers[static_cast<std::size_t>(m)];
  return {theta.data() + sh.b_offset, sh.b_len};
}
inline Eigen::Map<Vector> layer_bias(const ShapeTable& t, Vector& theta, int m) {
  const LayerShape& sh = t.layers[static_cast<std::size_t>(m)];
  return {theta.data() + sh.b_offset, sh.b_len};
}

// Gaussian init scaled by fan-in (stddev sqrt(2/n_in)); biases start at zero.
// Deterministic for a fixed seed: one generator drawn in layer order,
// weight entries in storage order.
inline ParamVector init_params(const ShapeTable& t, std::uint64_t seed) {
  ParamVector theta = Vector::Zero(t.total_params);
  std::mt19937_64 gen(seed);
  for (const LayerShape& sh : t.layers) {
    const double fan_in = sh.kind == LayerKind::Conv
                              ? double(sh.d_in) * sh.h * sh.h
                              : double(sh.n_in);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    double* w = theta.data() + sh.w_offset;
    for (Index k = 0; k < sh.w_rows * sh.w_cols; ++k) w[k] = dist(gen);
    // bias segment stays zero
  }
  return theta;
}

// ---------------------------------------------------------------------------
// Text format: one layer per line, `#` comments, key=value fields.
//
//   input a=28 b=28 d=1
//   conv h=5 out=32 stride=1 pad=0 pool=2
//   fc out=10
//
// `input` must come first; stride/pad/pool are optional (defaults 1/0/none).

inline ModelConfig parse_model_config(std::istream& in, const std::string& source = "config") {
  ModelConfig cfg;
  std::string line;
  int line_no = 0;
  bool have_input = false;
  auto err = [&](const std::string& msg) -> std::runtime_error {
    return std::runtime_error(source + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;  // blank line

    std::vector<std::pair<std::string, int>> kv;
    std::string tok;
    while (ls >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == tok.size())
        throw err("expected key=value, got '" + tok + "'");
      int value = 0;
      try {
        std::size_t used = 0;
        value = std::stoi(tok.substr(eq + 1), &used);
        if (used != tok.size() - eq - 1) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw err("value of '" + tok.substr(0, eq) + "' is not an integer");
      }
      kv.emplace_back(tok.substr(0, eq), value);
    }
    auto take = [&](const std::string& key, int def, bool required_key) {
      for (auto it = kv.begin(); it != kv.end(); ++it)
        if (it->first == key) {
          int v = it->second;
          kv.erase(it);
          return v;
        }
      if (required_key) throw err("missing required key '" + key + "'");
      return def;
    };
    auto reject_leftovers = [&] {
      if (!kv.empty()) throw err("unknown key '" + kv.front().first + "'");
    };

    if (head == "input") {
      if (have_input) throw err("duplicate input line");
      if (!cfg.layers.empty()) throw err("input line must precede all layers");
      cfg.input_height = take("a", 0, true);
      cfg.input_width = take("b", 0, true);
      cfg.input_channels = take("d", 0, true);
      reject_leftovers();
      have_input = true;
    } else if (head == "conv") {
      LayerSpec s;
      s.kind = LayerKind::Conv;
      s.filter_size = take("h", 0, true);
      s.out_channels = take("out", 0, true);
      s.stride = take("stride", 1, false);
      s.pad = take("pad", 0, false);
      s.pool = take("pool", 0, false);
      reject_leftovers();
      cfg.layers.push_back(s);
    } else if (head == "fc") {
      LayerSpec s;
      s.kind = LayerKind::Fc;
      s.out_neurons = take("out", 0, true);
      reject_leftovers();
      cfg.layers.push_back(s);
    } else {
      throw err("unknown layer type '" + head + "'");
    }
  }
  if (!have_input) throw std::runtime_error(source + ": missing input line");
  if (cfg.layers.empty()) throw std::runtime_error(source + ": no layers defined");
  return cfg;
}

inline ModelConfig parse_model_config_string(const std::string& text, const std::string& source = "config") {
  std::istringstream in(text);
  return parse_model_config(in, source);
}

// ---------------------------------------------------------------------------
// A model with its derived geometry and precomputed index tables, ready for
// evaluation.  Index tables exist per conv layer: the sub-image expansion on
// the padded input, the padding map, and (if pooling) the window-partition
// expansion over the convolution output.

struct LayerIndexMaps {
  PhiIndex phi;        // windows of the padded input
  PadIndex pad_map;    // input -> padded frame
  PhiIndex pool_phi;   // disjoint pooling windows over the conv output (if pool > 0)
};

struct Network {
  ModelConfig config;
  ShapeTable shapes;
  std::vector<LayerIndexMaps> maps;  // one per conv layer

  int layer_count() const { return static_cast<int>(shapes.layers.size()); }
  int conv_layers() const { return shapes.conv_layers; }
  int num_classes() const { return shapes.num_classes; }
  Index params() const { return shapes.total_params; }
};

inline Network make_network(const ModelConfig& cfg) {
  Network net;
  net.config = cfg;
  net.shapes = derive_shapes(cfg);
  for (int m = 0; m < net.shapes.conv_layers; ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    LayerIndexMaps maps;
    maps.pad_map = build_pad_index(sh.a_in, sh.b_in, sh.d_in, sh.pad);
    maps.phi = build_phi_index(sh.a_pad, sh.b_pad, sh.d_in, sh.h, sh.stride);
    if (sh.pool > 0)
      maps.pool_phi = build_phi_index(sh.a_conv, sh.b_conv, sh.d_out, sh.pool, sh.pool);
    net.maps.push_back(std::move(maps));
  }
  return net;
}

}  // namespace newton_cnn
