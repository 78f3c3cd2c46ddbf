#pragma once

#include <string>
#include <utility>
#include <vector>

#include "taskcl/nn.hpp"
#include "taskcl/rng.hpp"

namespace taskcl::models {

// Ordered, named parameter registry. The order defines the checkpoint
// manifest order and the flattening order used by parameter-space routing.
struct ParamList {
  std::vector<std::pair<std::string, Var>> items;

  void add(const std::string& name, const Var& v) { items.push_back({name, v}); }

  void extend(const std::string& prefix, const ParamList& other) {
    for (const auto& [name, v] : other.items) items.push_back({prefix + name, v});
  }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    out.reserve(items.size());
    for (const auto& [name, v] : items) out.push_back(v);
    return out;
  }

  long total_size() const {
    long n = 0;
    for (const auto& [name, v] : items) n += v.value().size();
    return n;
  }
};

inline Var he_normal(std::vector<int> shape, long fan_in, Rng& rng) {
  return Var::leaf(Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / double(fan_in))));
}

inline Var zeros_leaf(std::vector<int> shape) { return Var::leaf(Tensor::zeros(std::move(shape))); }

// Per-layer FiLM parameters: channel-wise scale and shift.
struct FilmLayer {
  Var gamma;
  Var beta;
};

// ---------------------------------------------------------------------------
// conv trunk: blocks of conv3x3(pad 1) -> [FiLM] -> relu -> avgpool2x2,
// followed by a spatial mean, giving one `channels`-dim feature per sample.

struct ConvTrunk {
  int in_channels = 1;
  int channels = 32;
  int blocks = 4;
  std::vector<Var> w;  // [channels, in, 3, 3]
  std::vector<Var> b;

  static ConvTrunk init(int in_channels, int channels, int blocks, Rng& rng) {
    ConvTrunk t;
    t.in_channels = in_channels;
    t.channels = channels;
    t.blocks = blocks;
    for (int i = 0; i < blocks; ++i) {
      int cin = i == 0 ? in_channels : channels;
      t.w.push_back(he_normal({channels, cin, 3, 3}, static_cast<long>(cin) * 9, rng));
      t.b.push_back(zeros_leaf({channels}));
    }
    return t;
  }

  int feature_dim() const { return channels; }

  Var forward(const Var& x, const std::vector<FilmLayer>* film = nullptr) const {
    Var h = x;
    for (int i = 0; i < blocks; ++i) {
      h = conv2d(h, w[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)], 1);
      if (film)
        h = film_channels(h, (*film)[static_cast<std::size_t>(i)].gamma,
                          (*film)[static_cast<std::size_t>(i)].beta);
      h = relu(h);
      h = avgpool2x2(h);
    }
    // spatial mean -> [n, channels]
    int n = h.value().dim(0), c = h.value().dim(1);
    int hw = h.value().dim(2) * h.value().dim(3);
    Var flat = reshape(h, {n * c, hw});
    return reshape(scale(row_sum(flat), 1.0 / hw), {n, c});
  }

  void collect(ParamList& out, const std::string& prefix) const {
    for (int i = 0; i < blocks; ++i) {
      out.add(prefix + "conv" + std::to_string(i) + ".w", w[static_cast<std::size_t>(i)]);
      out.add(prefix + "conv" + std::to_string(i) + ".b", b[static_cast<std::size_t>(i)]);
    }
  }

  std::vector<int> film_widths() const { return std::vector<int>(static_cast<std::size_t>(blocks), channels); }
};

// ---------------------------------------------------------------------------
// MLP trunk for vector domains: two hidden layers with optional FiLM.

struct MlpTrunk {
  int in_dim = 16;
  int hidden = 64;
  Var w1, b1, w2, b2;

  static MlpTrunk init(int in_dim, int hidden, Rng& rng) {
    MlpTrunk t;
    t.in_dim = in_dim;
    t.hidden = hidden;
    t.w1 = he_normal({in_dim, hidden}, in_dim, rng);
    t.b1 = zeros_leaf({hidden});
    t.w2 = he_normal({hidden, hidden}, hidden, rng);
    t.b2 = zeros_leaf({hidden});
    return t;
  }

  int feature_dim() const { return hidden; }

  Var forward(const Var& x, const std::vector<FilmLayer>* film = nullptr) const {
    Var h = linear(x, w1, b1);
    if (film) h = film_units(h, (*film)[0].gamma, (*film)[0].beta);
    h = relu(h);
    h = linear(h, w2, b2);
    if (film) h = film_units(h, (*film)[1].gamma, (*film)[1].beta);
    return relu(h);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.add(prefix + "fc1.w", w1);
    out.add(prefix + "fc1.b", b1);
    out.add(prefix + "fc2.w", w2);
    out.add(prefix + "fc2.b", b2);
  }

  std::vector<int> film_widths() const { return {hidden, hidden}; }
};

// ---------------------------------------------------------------------------
// shared trunk wrapper

enum class InputKind { Vector, Image };

struct Trunk {
  InputKind kind = InputKind::Vector;
  ConvTrunk conv;
  MlpTrunk mlp;

  static Trunk init_image(int in_channels, int channels, int blocks, Rng& rng) {
    Trunk t;
    t.kind = InputKind::Image;
    t.conv = ConvTrunk::init(in_channels, channels, blocks, rng);
    return t;
  }

  static Trunk init_vector(int in_dim, int hidden, Rng& rng) {
    Trunk t;
    t.kind = InputKind::Vector;
    t.mlp = MlpTrunk::init(in_dim, hidden, rng);
    return t;
  }

  int feature_dim() const {
    return kind == InputKind::Image ? conv.feature_dim() : mlp.feature_dim();
  }

  Var forward(const Var& x, const std::vector<FilmLayer>* film = nullptr) const {
    return kind == InputKind::Image ? conv.forward(x, film) : mlp.forward(x, film);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    if (kind == InputKind::Image)
      conv.collect(out, prefix);
    else
      mlp.collect(out, prefix);
  }

  std::vector<int> film_widths() const {
    return kind == InputKind::Image ? conv.film_widths() : mlp.film_widths();
  }
};

// ---------------------------------------------------------------------------
// FiLM generator h_w: task embedding -> per-layer (gamma, beta). The output
// layer starts at zero so training begins from the identity modulation
// (gamma=1, beta=0).

struct FilmGenerator {
  std::vector<int> widths;  // modulated units per layer
  int embed_dim = 0;
  int hidden = 32;
  Var w1, b1, w2, b2;

  static FilmGenerator init(int embed_dim, std::vector<int> widths, int hidden, Rng& rng) {
    FilmGenerator g;
    g.embed_dim = embed_dim;
    g.widths = std::move(widths);
    g.hidden = hidden;
    int total = 0;
    for (int w : g.widths) total += w;
    g.w1 = he_normal({embed_dim, hidden}, embed_dim, rng);
    g.b1 = zeros_leaf({hidden});
    g.w2 = zeros_leaf({hidden, 2 * total});
    g.b2 = zeros_leaf({2 * total});
    return g;
  }

  // z is a [1, embed_dim] row.
  std::vector<FilmLayer> generate(const Var& z) const {
    Var h = relu(linear(z, w1, b1));
    Var out = linear(h, w2, b2);  // [1, 2*total]
    std::vector<FilmLayer> layers;
    int off = 0;
    for (int w : widths) {
      Var dg = reshape(slice_cols(out, off, off + w), {w});
      Var beta = reshape(slice_cols(out, off + total_width(), off + total_width() + w), {w});
      layers.push_back({add_scalar(dg, 1.0), beta});
      off += w;
    }
    return layers;
  }

  int total_width() const {
    int t = 0;
    for (int w : widths) t += w;
    return t;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.add(prefix + "fc1.w", w1);
    out.add(prefix + "fc1.b", b1);
    out.add(prefix + "fc2.w", w2);
    out.add(prefix + "fc2.b", b2);
  }

 private:
  static Var slice_cols(const Var& row, int c0, int c1) {
    return transpose(slice_rows(transpose(row), c0, c1));
  }
};

// ---------------------------------------------------------------------------
// linear classifier head

struct LinearHead {
  Var w, b;

  static LinearHead zero(int in_dim, int out_dim) {
    LinearHead h;
    h.w = zeros_leaf({in_dim, out_dim});
    h.b = zeros_leaf({out_dim});
    return h;
  }

  Var forward(const Var& features) const { return linear(features, w, b); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.add(prefix + "w", w);
    out.add(prefix + "b", b);
  }
};

}  // namespace taskcl::models
