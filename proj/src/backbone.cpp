#include "uniref/backbone.hpp"

#include <cmath>
#include <cstring>
#include <memory>

namespace uniref {
namespace {

constexpr int kGlobalArrays = 9;
constexpr int kArraysPerLayer = 16;

enum Global { kInW = 0, kInB, kSegEmb, kInstrEmb, kInstrPos, kTimeW1, kTimeB1, kTimeW2, kTimeB2 };
enum Layer {
  kLn1G = 0,
  kLn1B,
  kWq,
  kBq,
  kWk,
  kBk,
  kWv,
  kBv,
  kWo,
  kBo,
  kLn2G,
  kLn2B,
  kW1,
  kB1,
  kW2,
  kB2
};

int layer_index(int layer, int slot) { return kGlobalArrays + layer * kArraysPerLayer + slot; }
int head_index(const ModelConfig& c, int slot) { return kGlobalArrays + c.layers * kArraysPerLayer + slot; }

const char* const kLayerNames[kArraysPerLayer] = {"ln1.g",   "ln1.b",   "attn.wq", "attn.bq", "attn.wk", "attn.bk",
                                                  "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",   "ln2.b",
                                                  "ff.w1",   "ff.b1",   "ff.w2",   "ff.b2"};

// Sinusoidal features of a normalized image coordinate, so every token knows where it sits in
// its own image independent of resolution.
Mat absolute_position_features(const PackedSequence& packed, int width) {
  const int n = packed.size();
  const int quarter = width / 4;
  Mat f(n, width);
  constexpr double kPi = 3.141592653589793;
  for (int i = 0; i < n; ++i) {
    const auto& g = packed.grids[packed.segments[i]];
    const double u = (packed.positions[i].row + 0.5) / g.height;
    const double v = (packed.positions[i].col + 0.5) / g.width;
    for (int j = 0; j < quarter; ++j) {
      const double w = kPi * (j + 1);
      f(i, 2 * j) = std::sin(w * u);
      f(i, 2 * j + 1) = std::cos(w * u);
      f(i, 2 * quarter + 2 * j) = std::sin(w * v);
      f(i, 2 * quarter + 2 * j + 1) = std::cos(w * v);
    }
  }
  return f;
}

Mat timestep_features(double t, int width) {
  const int half = width / 2;
  Mat e(1, width);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e(0, i) = std::cos(1000.0 * t * freq);
    e(0, half + i) = std::sin(1000.0 * t * freq);
  }
  return e;
}

struct RopeTable {
  Mat cos_row, sin_row, cos_col, sin_col;  // n x quarter
};

// Reference grids are placed in the target's coordinate frame so a reference cell and the
// target cell covering the same relative location share a rotary position.
RopeTable rope_table(const PackedSequence& packed, int instruction_len, int head_dim, double base) {
  const int n = packed.size() + instruction_len;
  const int quarter = head_dim / 4;
  RopeTable t;
  t.cos_row.resize(n, quarter);
  t.sin_row.resize(n, quarter);
  t.cos_col.resize(n, quarter);
  t.sin_col.resize(n, quarter);
  const auto& tgt = packed.grids.front();
  for (int i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    if (i < packed.size()) {
      const auto& g = packed.grids[packed.segments[i]];
      row = packed.positions[i].row * double(tgt.height) / g.height;
      col = packed.positions[i].col * double(tgt.width) / g.width;
    }
    for (int j = 0; j < quarter; ++j) {
      const double freq = std::pow(base, -double(j) / quarter);
      t.cos_row(i, j) = std::cos(row * freq);
      t.sin_row(i, j) = std::sin(row * freq);
      t.cos_col(i, j) = std::cos(col * freq);
      t.sin_col(i, j) = std::sin(col * freq);
    }
  }
  return t;
}

// Rotates the first `heads` heads of every row. sign = +1 rotates forward, -1 applies the
// transpose (used for the gradient).
void apply_rope(Mat& x, const RopeTable& t, int heads, int head_dim, double sign) {
  const int quarter = head_dim / 4;
  const int half = head_dim / 2;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double* row = x.row(i).data();
    for (int h = 0; h < heads; ++h) {
      double* v = row + h * head_dim;
      for (int j = 0; j < quarter; ++j) {
        const double cr = t.cos_row(i, j), sr = sign * t.sin_row(i, j);
        const double a = v[2 * j], b = v[2 * j + 1];
        v[2 * j] = a * cr - b * sr;
        v[2 * j + 1] = a * sr + b * cr;
        const double cc = t.cos_col(i, j), sc = sign * t.sin_col(i, j);
        const double c = v[half + 2 * j], d = v[half + 2 * j + 1];
        v[half + 2 * j] = c * cc - d * sc;
        v[half + 2 * j + 1] = c * sc + d * cc;
      }
    }
  }
}

ad::Var rope(ad::Var x, std::shared_ptr<const RopeTable> table, int heads, int head_dim) {
  Mat out = x.value();
  apply_rope(out, *table, heads, head_dim, 1.0);
  return x.tape->push(std::move(out), x.tape->requires_grad(x),
                      [ix = x.id, table, heads, head_dim](ad::Tape& t, const Mat& g) {
                        Mat dx = g;
                        apply_rope(dx, *table, heads, head_dim, -1.0);
                        t.accumulate(ix, dx);
                      });
}

std::string first_nonfinite(const std::vector<std::string>& names, std::span<const Mat> arrays) {
  for (std::size_t i = 0; i < arrays.size(); ++i)
    if (!arrays[i].allFinite()) return i < names.size() ? names[i] : "array " + std::to_string(i);
  return {};
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1 || vocab < 1 || channels < 1 || ff_mult < 1 || max_segments < 1 ||
      max_instruction < 1)
    throw InvalidArgument("model config fields must be positive");
  if (width % (2 * heads) != 0)
    throw InvalidArgument("width " + std::to_string(width) + " is not divisible by 2 * heads");
  if (head_dim() % 4 != 0) throw InvalidArgument("head dimension must be divisible by 4 for 2D rotary encoding");
  if (width % 4 != 0) throw InvalidArgument("width must be divisible by 4");
  if (!(rope_base > 1.0)) throw InvalidArgument("rope_base must exceed 1");
  if (rope_heads < 0 || rope_heads > heads) throw InvalidArgument("rope_heads must lie in [0, heads]");
}

std::vector<std::string> param_names(const ModelConfig& c) {
  std::vector<std::string> n = {"in.w",      "in.b",    "seg.emb", "instr.emb", "instr.pos",
                                "time.w1",   "time.b1", "time.w2", "time.b2"};
  for (int l = 0; l < c.layers; ++l)
    for (const char* s : kLayerNames) n.push_back("blocks." + std::to_string(l) + "." + s);
  for (const char* s : {"out.ln.g", "out.ln.b", "out.w", "out.b"}) n.emplace_back(s);
  return n;
}

std::vector<std::pair<int, int>> param_shapes(const ModelConfig& c) {
  const int d = c.width, f = c.width * c.ff_mult;
  std::vector<std::pair<int, int>> s = {{c.channels, d},       {1, d}, {c.max_segments, d}, {c.vocab, d},
                                        {c.max_instruction, d}, {d, d}, {1, d},             {d, d},
                                        {1, d}};
  for (int l = 0; l < c.layers; ++l) {
    const std::pair<int, int> layer[kArraysPerLayer] = {{1, d}, {1, d}, {d, d}, {1, d}, {d, d}, {1, d},
                                                        {d, d}, {1, d}, {d, d}, {1, d}, {1, d}, {1, d},
                                                        {d, f}, {1, f}, {f, d}, {1, d}};
    s.insert(s.end(), std::begin(layer), std::end(layer));
  }
  s.insert(s.end(), {{1, d}, {1, d}, {d, c.channels}, {1, c.channels}});
  return s;
}

ModelParams::ModelParams(ModelConfig config, std::vector<Mat> arrays)
    : config_(config), names_(param_names(config)), arrays_(std::move(arrays)) {
  config_.validate();
  const auto shapes = param_shapes(config_);
  if (arrays_.size() != shapes.size())
    throw InvalidArgument("expected " + std::to_string(shapes.size()) + " arrays, got " +
                          std::to_string(arrays_.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (arrays_[i].rows() != shapes[i].first || arrays_[i].cols() != shapes[i].second)
      throw InvalidArgument("array " + names_[i] + " has shape " + std::to_string(arrays_[i].rows()) + "x" +
                            std::to_string(arrays_[i].cols()) + ", expected " + std::to_string(shapes[i].first) +
                            "x" + std::to_string(shapes[i].second));
}

int ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  throw InvalidArgument("unknown parameter array '" + name + "'");
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : arrays_) n += static_cast<std::size_t>(a.size());
  return n;
}

std::uint64_t hash_float32(std::span<const Mat> arrays) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& a : arrays)
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      const float f = static_cast<float>(a.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    }
  return h;
}

std::uint64_t ModelParams::content_hash() const { return hash_float32(arrays_); }

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto names = param_names(config);
  const auto shapes = param_shapes(config);
  std::vector<Mat> arrays;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto [r, c] = shapes[i];
    const std::string& n = names[i];
    Rng rng(derive_seed(seed, i));
    const bool is_gain = n.ends_with(".g");
    const bool is_bias = n.ends_with(".b") || n.ends_with(".bq") || n.ends_with(".bk") || n.ends_with(".bv") ||
                         n.ends_with(".bo") || n.ends_with(".b1") || n.ends_with(".b2");
    if (n == "out.w" || n == "out.b")
      arrays.push_back(Mat::Zero(r, c));
    else if (is_gain)
      arrays.push_back(Mat::Ones(r, c));
    else if (is_bias)
      arrays.push_back(Mat::Zero(r, c));
    else
      arrays.push_back(normal_matrix(rng, r, c) * 0.02);
  }
  return ModelParams(config, std::move(arrays));
}

bool is_adapter_target(const std::string& name) {
  for (const char* s : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".ff.w1", ".ff.w2"})
    if (name.ends_with(s)) return true;
  return false;
}

AdapterParams zero_adapter(const ModelParams& params, int rank, double alpha) {
  if (rank < 1) throw InvalidArgument("adapter rank must be at least 1");
  AdapterParams a;
  a.rank = rank;
  a.scale = alpha / rank;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!is_adapter_target(params.names()[i])) continue;
    const Mat& w = params.arrays()[i];
    a.factors.push_back({static_cast<int>(i), Mat::Zero(w.rows(), rank), Mat::Zero(rank, w.cols())});
  }
  return a;
}

AdapterParams init_adapter(const ModelParams& params, int rank, double alpha, std::uint64_t seed) {
  auto a = zero_adapter(params, rank, alpha);
  for (auto& f : a.factors) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(f.array_index)));
    f.down = normal_matrix(rng, f.down.rows(), f.down.cols()) / std::sqrt(double(f.down.rows()));
  }
  return a;
}

namespace {

void check_adapter(const ModelParams& params, const AdapterParams& adapter) {
  if (adapter.rank < 1) throw InvalidArgument("adapter rank must be at least 1");
  for (const auto& f : adapter.factors) {
    if (f.array_index < 0 || f.array_index >= static_cast<int>(params.size()))
      throw InvalidArgument("adapter targets a missing array");
    const auto& name = params.names()[f.array_index];
    if (!is_adapter_target(name)) throw InvalidArgument("adapter may not target '" + name + "'");
    const Mat& w = params.arrays()[f.array_index];
    if (f.down.rows() != w.rows() || f.down.cols() != adapter.rank || f.up.rows() != adapter.rank ||
        f.up.cols() != w.cols())
      throw InvalidArgument("adapter factor shapes do not match array '" + name + "'");
  }
}

}  // namespace

PolicyView apply_adapter(const ModelParams& params, const AdapterParams& adapter) {
  check_adapter(params, adapter);
  return PolicyView(params, adapter);
}

ModelParams merge_adapter(const ModelParams& params, const AdapterParams& adapter) {
  check_adapter(params, adapter);
  auto arrays = params.arrays();
  // Same operation order as bind() so merged and adapted forwards agree bit for bit.
  for (const auto& f : adapter.factors) {
    const Mat prod = f.down * f.up;
    const Mat scaled = prod * adapter.scale;
    arrays[f.array_index] = Mat(arrays[f.array_index] + scaled);
  }
  return ModelParams(params.config(), std::move(arrays));
}

void rope_rotate(std::span<double> vec, double row, double col, double base) {
  const auto dim = static_cast<int>(vec.size());
  if (dim % 4 != 0) throw InvalidArgument("rotary head dimension must be divisible by 4");
  Mat x = Eigen::Map<const Mat>(vec.data(), 1, dim);
  RopeTable t;
  const int quarter = dim / 4;
  t.cos_row.resize(1, quarter);
  t.sin_row.resize(1, quarter);
  t.cos_col.resize(1, quarter);
  t.sin_col.resize(1, quarter);
  for (int j = 0; j < quarter; ++j) {
    const double freq = std::pow(base, -double(j) / quarter);
    t.cos_row(0, j) = std::cos(row * freq);
    t.sin_row(0, j) = std::sin(row * freq);
    t.cos_col(0, j) = std::cos(col * freq);
    t.sin_col(0, j) = std::sin(col * freq);
  }
  apply_rope(x, t, 1, dim, 1.0);
  std::memcpy(vec.data(), x.data(), sizeof(double) * dim);
}

BoundModel bind(ad::Tape& tape, const PolicyView& view, Trainable trainable) {
  const ModelParams& p = *view.base;
  BoundModel m;
  m.arrays.reserve(p.size());
  for (const auto& a : p.arrays()) {
    if (trainable == Trainable::Base) {
      m.arrays.push_back(tape.variable(a));
      m.trainable.push_back(m.arrays.back());
    } else {
      m.arrays.push_back(tape.constant(a));
    }
  }
  if (view.adapter) {
    check_adapter(p, *view.adapter);
    for (const auto& f : view.adapter->factors) {
      const bool learn = trainable == Trainable::Adapter;
      ad::Var down = learn ? tape.variable(f.down) : tape.constant(f.down);
      ad::Var up = learn ? tape.variable(f.up) : tape.constant(f.up);
      if (learn) {
        m.trainable.push_back(down);
        m.trainable.push_back(up);
      }
      m.arrays[f.array_index] = ad::add(m.arrays[f.array_index], ad::scale(ad::matmul(down, up), view.adapter->scale));
    }
  } else if (trainable == Trainable::Adapter) {
    throw InvalidArgument("adapter training requested without an adapter");
  }
  return m;
}

ad::Var forward(const ModelConfig& c, const BoundModel& m, const PackedSequence& packed, double t,
                const Instruction& instruction) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("timestep must lie in [0, 1]");
  if (packed.size() == 0 || packed.target_len < 1) throw InvalidArgument("packed sequence has no target tokens");
  if (packed.tokens.cols() != c.channels)
    throw InvalidArgument("token channels " + std::to_string(packed.tokens.cols()) + " differ from model channels " +
                          std::to_string(c.channels));
  if (static_cast<int>(packed.grids.size()) > c.max_segments)
    throw InvalidArgument("too many references: " + std::to_string(packed.grids.size() - 1));
  for (int s : packed.segments)
    if (s < 0 || s >= static_cast<int>(packed.grids.size())) throw InvalidArgument("segment id out of range");
  for (int id : instruction.tokens)
    if (id < 0 || id >= c.vocab)
      throw InvalidArgument("instruction token " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(c.vocab));
  const int n_ins = static_cast<int>(instruction.tokens.size());
  if (n_ins > c.max_instruction)
    throw InvalidArgument("instruction has " + std::to_string(n_ins) + " tokens, limit " +
                          std::to_string(c.max_instruction));
  if (instruction.max_ref_index() > packed.num_references())
    throw InvalidArgument("instruction references image " + std::to_string(instruction.max_ref_index()) +
                          " but only " + std::to_string(packed.num_references()) + " were supplied");

  ad::Tape& tape = *m.arrays.front().tape;
  const auto& A = m.arrays;

  ad::Var x = ad::linear(tape.constant(packed.tokens), A[kInW], A[kInB]);
  x = ad::add(x, ad::gather_rows(A[kSegEmb], packed.segments));
  x = ad::add(x, tape.constant(absolute_position_features(packed, c.width)));
  if (n_ins > 0) {
    std::vector<int> slots(n_ins);
    for (int i = 0; i < n_ins; ++i) slots[i] = i;
    ad::Var ins = ad::add(ad::gather_rows(A[kInstrEmb], instruction.tokens), ad::gather_rows(A[kInstrPos], slots));
    x = ad::concat_rows({x, ins});
  }

  ad::Var temb = ad::linear(tape.constant(timestep_features(t, c.width)), A[kTimeW1], A[kTimeB1]);
  temb = ad::linear(ad::gelu(temb), A[kTimeW2], A[kTimeB2]);
  x = ad::add_row(x, temb);

  auto table = std::make_shared<const RopeTable>(rope_table(packed, n_ins, c.head_dim(), c.rope_base));
  for (int l = 0; l < c.layers; ++l) {
    const auto L = [&](int slot) { return A[layer_index(l, slot)]; };
    ad::Var h = ad::layer_norm(x, L(kLn1G), L(kLn1B));
    ad::Var q = rope(ad::linear(h, L(kWq), L(kBq)), table, c.rope_heads, c.head_dim());
    ad::Var k = rope(ad::linear(h, L(kWk), L(kBk)), table, c.rope_heads, c.head_dim());
    ad::Var v = ad::linear(h, L(kWv), L(kBv));
    x = ad::add(x, ad::linear(ad::attention(q, k, v, c.heads), L(kWo), L(kBo)));
    h = ad::layer_norm(x, L(kLn2G), L(kLn2B));
    x = ad::add(x, ad::linear(ad::gelu(ad::linear(h, L(kW1), L(kB1))), L(kW2), L(kB2)));
  }

  ad::Var target = ad::top_rows(x, packed.target_len);
  target = ad::layer_norm(target, A[head_index(c, 0)], A[head_index(c, 1)]);
  return ad::linear(target, A[head_index(c, 2)], A[head_index(c, 3)]);
}

Mat forward(const PolicyView& view, const PackedSequence& packed, double t, const Instruction& instruction) {
  ad::Tape tape;
  const auto m = bind(tape, view, Trainable::None);
  return forward(view.base->config(), m, packed, t, instruction).value();
}

GradResult grad(const PolicyView& view, Trainable trainable, const LossFn& loss_fn) {
  ad::Tape tape;
  const auto m = bind(tape, view, trainable);
  ad::Var loss = loss_fn(tape, m);
  if (loss.value().size() != 1) throw InvalidArgument("loss function must return a scalar");
  GradResult r;
  r.loss = loss.scalar();
  if (!std::isfinite(r.loss)) {
    std::vector<Mat> effective;
    for (const auto& a : m.arrays) effective.push_back(a.value());
    auto bad = first_nonfinite(view.base->names(), effective);
    throw NonFiniteError(bad.empty() ? "loss is non-finite while every parameter array is finite"
                                     : "loss is non-finite; first non-finite array: " + bad);
  }
  tape.backward(loss);
  r.grads.reserve(m.trainable.size());
  for (const auto& v : m.trainable) r.grads.push_back(tape.grad(v));
  if (trainable == Trainable::Base) {
    auto bad = first_nonfinite(view.base->names(), r.grads);
    if (!bad.empty()) throw NonFiniteError("non-finite gradient in array " + bad);
  }
  return r;
}

GradResult grad(const ModelParams& params, const LossFn& loss_fn) {
  return grad(PolicyView(params), Trainable::Base, loss_fn);
}

}  // namespace uniref
