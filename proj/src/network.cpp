#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

#include "ribac/model.hpp"
#include "ribac/rng.hpp"

namespace ribac {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

constexpr double kBnEps = 1e-5;
constexpr std::int64_t kMaxColumnElements = std::int64_t{1} << 22;

struct ConvGeom {
  std::int64_t n, c, h, w, o, k, stride, pad, ho, wo;
  std::int64_t rows() const { return c * k * k; }
  std::int64_t plane() const { return ho * wo; }
  std::int64_t in_size() const { return c * h * w; }
};

ConvGeom conv_geom(const Shape& in, std::int64_t out_channels, const GraphNode& node) {
  ConvGeom g{};
  g.n = in[0];
  g.c = in[1];
  g.h = in[2];
  g.w = in[3];
  g.o = out_channels;
  g.k = node.kernel;
  g.stride = node.stride;
  g.pad = node.padding;
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols, std::int64_t ld, std::int64_t col0) {
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        T* dst = cols + ((c * g.k + ki) * g.k + kj) * ld + col0;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          T* row = dst + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(row, row + g.wo, T{0});
            continue;
          }
          const T* src = img + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            row[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* img, std::int64_t ld, std::int64_t col0) {
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* src = cols + ((c * g.k + ki) * g.k + kj) * ld + col0;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = img + (c * g.h + iy) * g.w;
          const T* row = src + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

std::int64_t chunk_for(const ConvGeom& g) {
  const auto per_sample = std::max<std::int64_t>(1, g.rows() * g.plane());
  return std::clamp<std::int64_t>(kMaxColumnElements / per_sample, 1, g.n);
}

template <typename T>
void conv_forward(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>* bias, const GraphNode& node,
                  TensorT<T>& y) {
  const ConvGeom g = conv_geom(x.shape(), weight.dim(0), node);
  y = TensorT<T>({g.n, g.o, g.ho, g.wo});
  const auto chunk = chunk_for(g);
  std::vector<T> cols;
  RowMat<T> out;
  ConstMatMap<T> wmat(weight.data(), g.o, g.rows());
  for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
    const auto cs = std::min(chunk, g.n - n0);
    const auto ld = cs * g.plane();
    cols.resize(static_cast<std::size_t>(g.rows() * ld));
    for (std::int64_t s = 0; s < cs; ++s) im2col(x.data() + (n0 + s) * g.in_size(), g, cols.data(), ld, s * g.plane());
    ConstMatMap<T> cmat(cols.data(), g.rows(), ld);
    out.resize(g.o, ld);
    out.noalias() = wmat * cmat;
    for (std::int64_t s = 0; s < cs; ++s) {
      for (std::int64_t o = 0; o < g.o; ++o) {
        T* dst = y.data() + ((n0 + s) * g.o + o) * g.plane();
        const T* src = out.data() + o * ld + s * g.plane();
        const T b = bias ? (*bias)[o] : T{0};
        for (std::int64_t p = 0; p < g.plane(); ++p) dst[p] = src[p] + b;
      }
    }
  }
}

template <typename T>
void conv_backward(const TensorT<T>& x, const TensorT<T>& weight, const GraphNode& node, const TensorT<T>& dy,
                   TensorT<T>* dx, TensorT<T>* dw, TensorT<T>* db) {
  const ConvGeom g = conv_geom(x.shape(), weight.dim(0), node);
  const auto chunk = chunk_for(g);
  std::vector<T> cols, dcols;
  RowMat<T> dymat;
  ConstMatMap<T> wmat(weight.data(), g.o, g.rows());
  for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
    const auto cs = std::min(chunk, g.n - n0);
    const auto ld = cs * g.plane();
    dymat.resize(g.o, ld);
    for (std::int64_t s = 0; s < cs; ++s) {
      for (std::int64_t o = 0; o < g.o; ++o) {
        const T* src = dy.data() + ((n0 + s) * g.o + o) * g.plane();
        std::copy(src, src + g.plane(), dymat.data() + o * ld + s * g.plane());
      }
    }
    if (dw) {
      cols.resize(static_cast<std::size_t>(g.rows() * ld));
      for (std::int64_t s = 0; s < cs; ++s) {
        im2col(x.data() + (n0 + s) * g.in_size(), g, cols.data(), ld, s * g.plane());
      }
      MatMap<T> dwmat(dw->data(), g.o, g.rows());
      dwmat.noalias() += dymat * ConstMatMap<T>(cols.data(), g.rows(), ld).transpose();
    }
    if (dx) {
      dcols.resize(static_cast<std::size_t>(g.rows() * ld));
      MatMap<T> dcmat(dcols.data(), g.rows(), ld);
      dcmat.noalias() = wmat.transpose() * dymat;
      for (std::int64_t s = 0; s < cs; ++s) {
        col2im(dcols.data(), g, dx->data() + (n0 + s) * g.in_size(), ld, s * g.plane());
      }
    }
    if (db) {
      for (std::int64_t o = 0; o < g.o; ++o) (*db)[o] += dymat.row(o).sum();
    }
  }
}

template <typename T>
void add_into(TensorT<T>& dst, const TensorT<T>& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  T* d = dst.data();
  const T* s = src.data();
  for (std::int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
Network<T>::Network(Architecture arch) : arch_(std::move(arch)) {
  if (arch_.nodes.empty() || arch_.output_node < 0) throw std::invalid_argument("architecture has no output");
}

template <typename T>
ModelWeightsT<T> Network<T>::init_weights(std::uint64_t seed) const {
  Rng rng(substream_seed(seed, "init"));
  ModelWeightsT<T> w;
  for (const auto& p : arch_.params) {
    TensorT<T> t(p.shape);
    switch (p.init) {
      case ParamInit::kKaimingNormal: {
        const double stddev = std::sqrt(2.0 / static_cast<double>(p.fan_in));
        for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
        break;
      }
      case ParamInit::kLinearUniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
        for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case ParamInit::kOnes: t.fill(T{1}); break;
      case ParamInit::kZeros: break;
    }
    w.params.add(p.name, std::move(t));
  }
  for (const auto& b : arch_.buffers) {
    TensorT<T> t(b.shape);
    if (b.init == ParamInit::kOnes) t.fill(T{1});
    w.buffers.add(b.name, std::move(t));
  }
  w.provenance = Provenance::kRandomInit;
  return w;
}

template <typename T>
void Network<T>::check_weights(const ModelWeightsT<T>& weights) const {
  for (const auto& p : arch_.params) {
    const auto* t = weights.params.find(p.name);
    if (!t) throw ShapeError("weights missing parameter " + p.name);
    if (t->shape() != p.shape) {
      throw ShapeError("parameter " + p.name + " has shape " + shape_to_string(t->shape()) + ", expected " +
                       shape_to_string(p.shape));
    }
  }
  for (const auto& b : arch_.buffers) {
    const auto* t = weights.buffers.find(b.name);
    if (!t || t->shape() != b.shape) throw ShapeError("weights missing or misshaped buffer " + b.name);
  }
}

template <typename T>
void Network<T>::check_mask(const PruneMask& mask) const {
  const auto names = arch_.prunable();
  if (mask.layers.size() != names.size()) {
    throw ShapeError("mask has " + std::to_string(mask.layers.size()) + " layers, model has " +
                     std::to_string(names.size()) + " prunable tensors");
  }
  for (const auto& p : arch_.params) {
    if (!p.prunable) continue;
    const auto* m = mask.layers.find(p.name);
    if (!m || m->shape() != p.shape) throw ShapeError("mask not aligned with prunable tensor " + p.name);
  }
}

template <typename T>
TensorT<T> Network<T>::forward(const ModelWeightsT<T>& weights, const PruneMask* mask, const TensorT<T>& x,
                               const ForwardOptions<T>& options, Tape<T>* tape) const {
  const auto& in = arch_.input;
  if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.height || x.dim(3) != in.width) {
    throw ShapeError("input batch " + shape_to_string(x.shape()) + " does not match model input (N," +
                     std::to_string(in.channels) + "," + std::to_string(in.height) + "," +
                     std::to_string(in.width) + ")");
  }
  if (mask) check_mask(*mask);

  Tape<T> local;
  const bool keep_all = tape != nullptr;
  Tape<T>& t = tape ? *tape : local;
  t.slots.assign(arch_.nodes.size(), {});
  t.effective = NamedTensors<T>();
  t.norm = options.norm;
  t.feature_channel_keep = options.feature_channel_keep;

  if (mask) {
    for (const auto& [name, m] : mask->layers) {
      TensorT<T> eff = weights.params.at(name);
      if (eff.shape() != m.shape()) throw ShapeError("mask shape mismatch for " + name);
      for (std::int64_t i = 0; i < eff.numel(); ++i) {
        if (!m[i]) eff[i] = T{0};
      }
      t.effective.add(name, std::move(eff));
    }
  }
  auto param = [&](const std::string& name) -> const TensorT<T>& {
    if (const auto* e = t.effective.find(name)) return *e;
    const auto* p = weights.params.find(name);
    if (!p) throw ShapeError("weights missing parameter " + name);
    return *p;
  };

  std::vector<std::size_t> last_use(arch_.nodes.size(), 0);
  for (std::size_t i = 0; i < arch_.nodes.size(); ++i) {
    for (int j : arch_.nodes[i].inputs) last_use[static_cast<std::size_t>(j)] = i;
  }

  const auto batch = x.dim(0);
  for (std::size_t i = 0; i < arch_.nodes.size(); ++i) {
    const auto& node = arch_.nodes[i];
    auto& slot = t.slots[i];
    const TensorT<T>* a = node.inputs.empty() ? nullptr : &t.slots[static_cast<std::size_t>(node.inputs[0])].value;
    switch (node.op) {
      case OpKind::kInput: slot.value = x; break;
      case OpKind::kNormalize: {
        slot.value = *a;
        const auto c = a->dim(1), plane = a->dim(2) * a->dim(3);
        for (std::int64_t n = 0; n < batch; ++n) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            T* p = slot.value.data() + (n * c + ch) * plane;
            const T mean = static_cast<T>(arch_.channel_mean[static_cast<std::size_t>(ch)]);
            const T inv = T{1} / static_cast<T>(arch_.channel_std[static_cast<std::size_t>(ch)]);
            for (std::int64_t q = 0; q < plane; ++q) p[q] = (p[q] - mean) * inv;
          }
        }
        break;
      }
      case OpKind::kConv2d:
        conv_forward(*a, param(node.weight), node.bias.empty() ? nullptr : &param(node.bias), node, slot.value);
        break;
      case OpKind::kBatchNorm: {
        const auto c = a->dim(1), plane = a->dim(2) * a->dim(3);
        const auto& gamma = param(node.weight);
        const auto& beta = param(node.bias);
        slot.value = TensorT<T>(a->shape());
        slot.aux.assign(static_cast<std::size_t>(a->numel() + c), T{0});
        T* xhat = slot.aux.data();
        T* inv_std = slot.aux.data() + a->numel();
        std::vector<T> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
        if (options.norm == NormMode::kTrain) {
          const double count = static_cast<double>(batch * plane);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* p = a->data() + (n * c + ch) * plane;
              for (std::int64_t q = 0; q < plane; ++q) s += p[q];
            }
            const double m = s / count;
            double v = 0.0;
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* p = a->data() + (n * c + ch) * plane;
              for (std::int64_t q = 0; q < plane; ++q) v += (p[q] - m) * (p[q] - m);
            }
            mean[static_cast<std::size_t>(ch)] = static_cast<T>(m);
            var[static_cast<std::size_t>(ch)] = static_cast<T>(v / count);
            if (options.running_stats) {
              auto& rm = options.running_stats->at(node.running_mean);
              auto& rv = options.running_stats->at(node.running_var);
              const double unbiased = count > 1 ? v / (count - 1) : v;
              rm[ch] = static_cast<T>((1.0 - options.momentum) * rm[ch] + options.momentum * m);
              rv[ch] = static_cast<T>((1.0 - options.momentum) * rv[ch] + options.momentum * unbiased);
            }
          }
        } else {
          const auto& rm = weights.buffers.at(node.running_mean);
          const auto& rv = weights.buffers.at(node.running_var);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            mean[static_cast<std::size_t>(ch)] = rm[ch];
            var[static_cast<std::size_t>(ch)] = rv[ch];
          }
        }
        for (std::int64_t ch = 0; ch < c; ++ch) {
          inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[static_cast<std::size_t>(ch)]) + kBnEps));
        }
        for (std::int64_t n = 0; n < batch; ++n) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto off = (n * c + ch) * plane;
            const T m = mean[static_cast<std::size_t>(ch)], is = inv_std[ch], g = gamma[ch], b = beta[ch];
            for (std::int64_t q = 0; q < plane; ++q) {
              const T xh = (a->data()[off + q] - m) * is;
              xhat[off + q] = xh;
              slot.value.data()[off + q] = g * xh + b;
            }
          }
        }
        break;
      }
      case OpKind::kRelu: {
        slot.value = *a;
        for (auto& v : slot.value.values()) v = v > T{0} ? v : T{0};
        break;
      }
      case OpKind::kMaxPool2: {
        const auto c = a->dim(1), h = a->dim(2), w = a->dim(3), ho = h / 2, wo = w / 2;
        slot.value = TensorT<T>({batch, c, ho, wo});
        slot.idx.resize(static_cast<std::size_t>(slot.value.numel()));
        std::int64_t k = 0;
        for (std::int64_t nc = 0; nc < batch * c; ++nc) {
          const T* src = a->data() + nc * h * w;
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox, ++k) {
              std::int64_t best = (2 * oy) * w + 2 * ox;
              for (std::int64_t dy = 0; dy < 2; ++dy) {
                for (std::int64_t dx = 0; dx < 2; ++dx) {
                  const auto q = (2 * oy + dy) * w + 2 * ox + dx;
                  if (src[q] > src[best]) best = q;
                }
              }
              slot.value[k] = src[best];
              slot.idx[static_cast<std::size_t>(k)] = static_cast<std::int32_t>(nc * h * w + best);
            }
          }
        }
        break;
      }
      case OpKind::kGlobalAvgPool: {
        const auto c = a->dim(1), plane = a->dim(2) * a->dim(3);
        slot.value = TensorT<T>({batch, c});
        for (std::int64_t nc = 0; nc < batch * c; ++nc) {
          const T* src = a->data() + nc * plane;
          T s{0};
          for (std::int64_t q = 0; q < plane; ++q) s += src[q];
          slot.value[nc] = s / static_cast<T>(plane);
        }
        break;
      }
      case OpKind::kLinear: {
        const auto& w = param(node.weight);
        const auto features = w.dim(1), outs = w.dim(0);
        if (a->numel() != batch * features) throw ShapeError("linear input does not match weight " + node.weight);
        slot.value = TensorT<T>({batch, outs});
        MatMap<T> y(slot.value.data(), batch, outs);
        y.noalias() = ConstMatMap<T>(a->data(), batch, features) * ConstMatMap<T>(w.data(), outs, features).transpose();
        if (!node.bias.empty()) {
          const auto& b = param(node.bias);
          for (std::int64_t n = 0; n < batch; ++n) {
            for (std::int64_t o = 0; o < outs; ++o) y(n, o) += b[o];
          }
        }
        break;
      }
      case OpKind::kAdd: {
        slot.value = *a;
        add_into(slot.value, t.slots[static_cast<std::size_t>(node.inputs[1])].value);
        break;
      }
    }
    if (static_cast<int>(i) == arch_.feature_node && options.feature_channel_keep) {
      const auto& keep = *options.feature_channel_keep;
      const auto c = slot.value.dim(1);
      if (static_cast<std::int64_t>(keep.size()) != c) throw ShapeError("feature channel mask size mismatch");
      const auto plane = slot.value.numel() / (batch * c);
      for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          if (keep[static_cast<std::size_t>(ch)]) continue;
          T* p = slot.value.data() + (n * c + ch) * plane;
          std::fill(p, p + plane, T{0});
        }
      }
    }
    if (!keep_all) {
      for (int j : node.inputs) {
        if (last_use[static_cast<std::size_t>(j)] == i) t.slots[static_cast<std::size_t>(j)] = {};
      }
    }
  }
  return t.slots[static_cast<std::size_t>(arch_.output_node)].value;
}

template <typename T>
Gradients<T> Network<T>::backward(const ModelWeightsT<T>& weights, const Tape<T>& tape, const TensorT<T>& grad_logits,
                                  const BackwardOptions& options) const {
  if (tape.slots.size() != arch_.nodes.size()) throw std::logic_error("tape does not belong to this network");
  const auto& out_value = tape.slots[static_cast<std::size_t>(arch_.output_node)].value;
  if (grad_logits.shape() != out_value.shape()) {
    throw ShapeError("logit gradient " + shape_to_string(grad_logits.shape()) + " vs logits " +
                     shape_to_string(out_value.shape()));
  }
  auto param = [&](const std::string& name) -> const TensorT<T>& {
    if (const auto* e = tape.effective.find(name)) return *e;
    return weights.params.at(name);
  };

  Gradients<T> result;
  for (const auto& p : arch_.params) result.params.add(p.name, TensorT<T>(p.shape));

  // Only the input and pure input transforms can be skipped.
  std::vector<char> needs(arch_.nodes.size(), 1);
  for (std::size_t i = 0; i < arch_.nodes.size(); ++i) {
    const auto& node = arch_.nodes[i];
    if (node.op == OpKind::kInput) needs[i] = options.input;
    if (node.op == OpKind::kNormalize) needs[i] = needs[static_cast<std::size_t>(node.inputs[0])];
  }

  std::vector<TensorT<T>> grads(arch_.nodes.size());
  grads[static_cast<std::size_t>(arch_.output_node)] = grad_logits;

  for (std::size_t ii = arch_.nodes.size(); ii-- > 0;) {
    auto& dy = grads[ii];
    if (dy.empty()) continue;
    const auto& node = arch_.nodes[ii];
    const auto& slot = tape.slots[ii];
    if (static_cast<int>(ii) == arch_.feature_node) {
      if (tape.feature_channel_keep) {
        const auto& keep = *tape.feature_channel_keep;
        const auto n = dy.dim(0), c = dy.dim(1), plane = dy.numel() / (n * c);
        for (std::int64_t s = 0; s < n; ++s) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            if (!keep[static_cast<std::size_t>(ch)]) std::fill_n(dy.data() + (s * c + ch) * plane, plane, T{0});
          }
        }
      }
      if (options.feature) result.feature = dy;
    }
    if (node.op == OpKind::kInput) {
      if (options.input) result.input = dy;
      continue;
    }
    const auto in0 = static_cast<std::size_t>(node.inputs[0]);
    const auto& a = tape.slots[in0].value;
    const bool want_dx = needs[in0] != 0;
    switch (node.op) {
      case OpKind::kInput: break;
      case OpKind::kNormalize: {
        if (!want_dx) break;
        TensorT<T> dx = dy;
        const auto n = dx.dim(0), c = dx.dim(1), plane = dx.dim(2) * dx.dim(3);
        for (std::int64_t s = 0; s < n; ++s) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const T inv = T{1} / static_cast<T>(arch_.channel_std[static_cast<std::size_t>(ch)]);
            T* p = dx.data() + (s * c + ch) * plane;
            for (std::int64_t q = 0; q < plane; ++q) p[q] *= inv;
          }
        }
        add_into(grads[in0], dx);
        break;
      }
      case OpKind::kConv2d: {
        const auto& w = param(node.weight);
        TensorT<T> dx;
        if (want_dx) dx = TensorT<T>(a.shape());
        TensorT<T>* db = node.bias.empty() ? nullptr : &result.params.at(node.bias);
        conv_backward(a, w, node, dy, want_dx ? &dx : nullptr, options.params ? &result.params.at(node.weight) : nullptr,
                      options.params ? db : nullptr);
        if (want_dx) add_into(grads[in0], dx);
        break;
      }
      case OpKind::kBatchNorm: {
        const auto n = a.dim(0), c = a.dim(1), plane = a.dim(2) * a.dim(3);
        const T* xhat = slot.aux.data();
        const T* inv_std = slot.aux.data() + a.numel();
        const auto& gamma = param(node.weight);
        auto& dgamma = result.params.at(node.weight);
        auto& dbeta = result.params.at(node.bias);
        TensorT<T> dx(a.shape());
        const double count = static_cast<double>(n * plane);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::int64_t s = 0; s < n; ++s) {
            const auto off = (s * c + ch) * plane;
            for (std::int64_t q = 0; q < plane; ++q) {
              sum_dy += dy[off + q];
              sum_dy_xhat += static_cast<double>(dy[off + q]) * xhat[off + q];
            }
          }
          dgamma[ch] += static_cast<T>(sum_dy_xhat);
          dbeta[ch] += static_cast<T>(sum_dy);
          if (!want_dx) continue;
          const T g = gamma[ch], is = inv_std[ch];
          for (std::int64_t s = 0; s < n; ++s) {
            const auto off = (s * c + ch) * plane;
            for (std::int64_t q = 0; q < plane; ++q) {
              if (tape.norm == NormMode::kTrain) {
                const double v = (count * dy[off + q] - sum_dy - xhat[off + q] * sum_dy_xhat) / count;
                dx[off + q] = static_cast<T>(g * is * v);
              } else {
                dx[off + q] = g * is * dy[off + q];
              }
            }
          }
        }
        if (want_dx) add_into(grads[in0], dx);
        break;
      }
      case OpKind::kRelu: {
        if (!want_dx) break;
        TensorT<T> dx = dy;
        for (std::int64_t q = 0; q < dx.numel(); ++q) {
          if (!(slot.value[q] > T{0})) dx[q] = T{0};
        }
        add_into(grads[in0], dx);
        break;
      }
      case OpKind::kMaxPool2: {
        if (!want_dx) break;
        TensorT<T> dx(a.shape());
        for (std::int64_t k = 0; k < dy.numel(); ++k) dx[slot.idx[static_cast<std::size_t>(k)]] += dy[k];
        add_into(grads[in0], dx);
        break;
      }
      case OpKind::kGlobalAvgPool: {
        if (!want_dx) break;
        TensorT<T> dx(a.shape());
        const auto nc = a.dim(0) * a.dim(1), plane = a.dim(2) * a.dim(3);
        const T scale = T{1} / static_cast<T>(plane);
        for (std::int64_t k = 0; k < nc; ++k) std::fill_n(dx.data() + k * plane, plane, dy[k] * scale);
        add_into(grads[in0], dx);
        break;
      }
      case OpKind::kLinear: {
        const auto& w = param(node.weight);
        const auto batch = dy.dim(0), outs = w.dim(0), features = w.dim(1);
        ConstMatMap<T> dymat(dy.data(), batch, outs);
        if (options.params) {
          MatMap<T> dw(result.params.at(node.weight).data(), outs, features);
          dw.noalias() += dymat.transpose() * ConstMatMap<T>(a.data(), batch, features);
          if (!node.bias.empty()) {
            auto& db = result.params.at(node.bias);
            for (std::int64_t o = 0; o < outs; ++o) db[o] += dymat.col(o).sum();
          }
        }
        if (want_dx) {
          TensorT<T> dx(a.shape());
          MatMap<T>(dx.data(), batch, features).noalias() = dymat * ConstMatMap<T>(w.data(), outs, features);
          add_into(grads[in0], dx);
        }
        break;
      }
      case OpKind::kAdd: {
        if (want_dx) add_into(grads[in0], dy);
        const auto in1 = static_cast<std::size_t>(node.inputs[1]);
        if (needs[in1]) add_into(grads[in1], dy);
        break;
      }
    }
    if (!(static_cast<int>(ii) == arch_.feature_node && options.feature)) dy = TensorT<T>();
  }
  return result;
}

template <typename T>
std::vector<int> argmax_rows(const TensorT<T>& logits) {
  const auto n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

template class Network<float>;
template class Network<double>;
template std::vector<int> argmax_rows(const TensorT<float>&);
template std::vector<int> argmax_rows(const TensorT<double>&);

}  // namespace ribac
