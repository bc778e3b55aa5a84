#include "pastille/neural.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>
#include <limits>
#include <numeric>

#include "binio.hpp"
#include "pastille/csv.hpp"
#include "pastille/errors.hpp"

namespace pastille {

const char* layer_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::avgpool1d: return "avgpool1d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
  }
  return "unknown";
}

Arch parse_arch(const std::string& s) {
  if (s == "1d" || s == "panet-1d" || s == "panet1d") return Arch::panet1d;
  if (s == "2d" || s == "panet-2d" || s == "panet2d") return Arch::panet2d;
  throw InvalidParameter("unknown architecture '" + s + "' (expected 1d or 2d)");
}

const char* arch_name(Arch arch) {
  switch (arch) {
    case Arch::panet1d: return "panet-1d";
    case Arch::panet2d: return "panet-2d";
    case Arch::custom: return "custom";
  }
  return "unknown";
}

std::vector<LayerSpec> panet_layers(Arch arch, int width) {
  if (width < 1) throw InvalidParameter("panet: width must be positive");
  const bool two = arch == Arch::panet2d;
  if (arch == Arch::custom) throw InvalidParameter("panet: custom arch has no fixed layers");
  const LayerKind conv = two ? LayerKind::conv2d : LayerKind::conv1d;
  const LayerKind pool = two ? LayerKind::avgpool2d : LayerKind::avgpool1d;
  std::vector<LayerSpec> l;
  for (int b = 0; b < 3; ++b) {
    l.push_back({conv, 3, width});
    l.push_back({LayerKind::relu});
    l.push_back({pool, 2});
  }
  l.push_back({LayerKind::dense, 0, width});
  l.push_back({LayerKind::relu});
  l.push_back({LayerKind::dense, 0, width});
  l.push_back({LayerKind::relu});
  l.push_back({LayerKind::dense, 0, 2});
  l.push_back({LayerKind::relu});
  return l;
}

Shape panet_input(Arch arch, int ny, int nx) {
  if (arch == Arch::panet2d) return {ny, nx, 1};
  return {ny, 1, nx};
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapM = Eigen::Map<const RowMat<T>>;
template <class T>
using CMapStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MapRow = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <class T>
using CMapRow = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <class T>
using MapVec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using CMapVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

std::string layer_label(std::size_t l, LayerKind kind) {
  return "layer " + std::to_string(l) + " (" + layer_name(kind) + ")";
}

}  // namespace

template <class T>
Network<T>::Network(Shape input, std::vector<LayerSpec> layers)
    : input_(input), layers_(std::move(layers)) {
  if (input.h < 1 || input.w < 1 || input.c < 1) throw ShapeError("network: empty input shape");
  Shape s = input;
  std::size_t total = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& sp = layers_[l];
    std::size_t nw = 0, nb = 0;
    Shape o = s;
    switch (sp.kind) {
      case LayerKind::conv1d:
        if (s.w != 1 || sp.size < 1 || s.h < sp.size || sp.units < 1) {
          throw ShapeError(layer_label(l, sp.kind) + ": kernel does not fit input length " +
                           std::to_string(s.h));
        }
        o = {s.h - sp.size + 1, 1, sp.units};
        nw = static_cast<std::size_t>(sp.units) * sp.size * s.c;
        nb = sp.units;
        break;
      case LayerKind::conv2d:
        if (sp.size < 1 || s.h < sp.size || s.w < sp.size || sp.units < 1) {
          throw ShapeError(layer_label(l, sp.kind) + ": kernel does not fit input " +
                           std::to_string(s.h) + "x" + std::to_string(s.w));
        }
        o = {s.h - sp.size + 1, s.w - sp.size + 1, sp.units};
        nw = static_cast<std::size_t>(sp.units) * sp.size * sp.size * s.c;
        nb = sp.units;
        break;
      case LayerKind::avgpool1d:
        if (s.w != 1 || sp.size < 1 || s.h < sp.size) {
          throw ShapeError(layer_label(l, sp.kind) + ": window does not fit input");
        }
        o = {s.h / sp.size, 1, s.c};
        break;
      case LayerKind::avgpool2d:
        if (sp.size < 1 || s.h < sp.size || s.w < sp.size) {
          throw ShapeError(layer_label(l, sp.kind) + ": window does not fit input");
        }
        o = {s.h / sp.size, s.w / sp.size, s.c};
        break;
      case LayerKind::dense:
        if (sp.units < 1) throw ShapeError(layer_label(l, sp.kind) + ": needs units >= 1");
        o = {1, 1, sp.units};
        nw = static_cast<std::size_t>(sp.units) * s.size();
        nb = sp.units;
        break;
      case LayerKind::relu:
        break;
      default:
        throw ShapeError(layer_label(l, sp.kind) + ": unknown layer kind");
    }
    offsets_.push_back(total);
    weights_.push_back(nw);
    biases_.push_back(nb);
    total += nw + nb;
    shapes_.push_back(o);
    s = o;
  }
  if (layers_.empty()) shapes_.push_back(input_);
  params_.assign(total, T(0));
}

template <class T>
void Network<T>::init(std::mt19937_64& rng) {
  Shape s = input_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    std::size_t fan_in = 0;
    switch (layers_[l].kind) {
      case LayerKind::conv1d: fan_in = static_cast<std::size_t>(layers_[l].size) * s.c; break;
      case LayerKind::conv2d:
        fan_in = static_cast<std::size_t>(layers_[l].size) * layers_[l].size * s.c;
        break;
      case LayerKind::dense: fan_in = s.size(); break;
      default: break;
    }
    if (fan_in > 0) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      T* w = params_.data() + offsets_[l];
      for (std::size_t k = 0; k < weights_[l]; ++k) {
        w[k] = static_cast<T>(limit * (2.0 * std::generate_canonical<double, 53>(rng) - 1.0));
      }
      std::fill_n(w + weights_[l], biases_[l], T(0));
    }
    s = shapes_[l];
  }
}

template <class T>
std::span<const T> Network<T>::forward(std::span<const T> x, Workspace& ws) const {
  if (x.size() != input_.size()) {
    throw ShapeError(layers_.empty() ? std::string("network: input size mismatch")
                                     : layer_label(0, layers_[0].kind) + ": expects " +
                                           std::to_string(input_.size()) + " inputs, got " +
                                           std::to_string(x.size()));
  }
  const std::size_t n = layers_.size();
  ws.act.resize(n);
  ws.cols.resize(n);
  const T* in = x.data();
  Shape s = input_;
  for (std::size_t l = 0; l < n; ++l) {
    const LayerSpec& sp = layers_[l];
    const Shape& o = shapes_[l];
    auto& out_v = ws.act[l];
    out_v.resize(o.size());
    T* out = out_v.data();
    const T* w = params_.data() + offsets_[l];
    const T* b = w + weights_[l];
    switch (sp.kind) {
      case LayerKind::conv1d: {
        const int kc = sp.size * s.c;
        CMapStrided<T> im(in, o.h, kc, Eigen::OuterStride<>(s.c));
        CMapM<T> wm(w, sp.units, kc);
        MapM<T> om(out, o.h, sp.units);
        om.noalias() = im * wm.transpose();
        om.rowwise() += CMapRow<T>(b, sp.units);
        break;
      }
      case LayerKind::conv2d: {
        const int k = sp.size;
        const int kc = k * s.c;
        const int kkc = k * kc;
        auto& col = ws.cols[l];
        col.resize(static_cast<std::size_t>(o.h) * o.w * kkc);
        for (int y = 0; y < o.h; ++y) {
          for (int xx = 0; xx < o.w; ++xx) {
            T* dst = col.data() + (static_cast<std::size_t>(y) * o.w + xx) * kkc;
            for (int ky = 0; ky < k; ++ky) {
              std::memcpy(dst + ky * kc, in + (static_cast<std::size_t>(y + ky) * s.w + xx) * s.c,
                          sizeof(T) * kc);
            }
          }
        }
        CMapM<T> cm(col.data(), o.h * o.w, kkc);
        CMapM<T> wm(w, sp.units, kkc);
        MapM<T> om(out, o.h * o.w, sp.units);
        om.noalias() = cm * wm.transpose();
        om.rowwise() += CMapRow<T>(b, sp.units);
        break;
      }
      case LayerKind::avgpool1d: {
        const T inv = T(1) / T(sp.size);
        for (int i = 0; i < o.h; ++i) {
          T* dst = out + static_cast<std::size_t>(i) * o.c;
          const T* src = in + static_cast<std::size_t>(i) * sp.size * s.c;
          for (int c = 0; c < o.c; ++c) dst[c] = src[c];
          for (int t = 1; t < sp.size; ++t) {
            for (int c = 0; c < o.c; ++c) dst[c] += src[t * s.c + c];
          }
          for (int c = 0; c < o.c; ++c) dst[c] *= inv;
        }
        break;
      }
      case LayerKind::avgpool2d: {
        const int p = sp.size;
        const T inv = T(1) / T(p * p);
        for (int y = 0; y < o.h; ++y) {
          for (int xx = 0; xx < o.w; ++xx) {
            T* dst = out + (static_cast<std::size_t>(y) * o.w + xx) * o.c;
            std::fill_n(dst, o.c, T(0));
            for (int ty = 0; ty < p; ++ty) {
              for (int tx = 0; tx < p; ++tx) {
                const T* src =
                    in + (static_cast<std::size_t>(y * p + ty) * s.w + (xx * p + tx)) * s.c;
                for (int c = 0; c < o.c; ++c) dst[c] += src[c];
              }
            }
            for (int c = 0; c < o.c; ++c) dst[c] *= inv;
          }
        }
        break;
      }
      case LayerKind::dense: {
        const int din = static_cast<int>(s.size());
        CMapM<T> wm(w, sp.units, din);
        MapVec<T> ov(out, sp.units);
        ov.noalias() = wm * CMapVec<T>(in, din);
        ov += CMapVec<T>(b, sp.units);
        break;
      }
      case LayerKind::relu: {
        const std::size_t m = o.size();
        for (std::size_t k = 0; k < m; ++k) out[k] = in[k] > T(0) ? in[k] : T(0);
        break;
      }
    }
    in = out;
    s = o;
  }
  if (n == 0) {
    ws.act.assign(1, std::vector<T>(x.begin(), x.end()));
    return ws.act[0];
  }
  return ws.act.back();
}

template <class T>
void Network<T>::backward(std::span<const T> x, Workspace& ws, std::span<const T> dout,
                          std::span<T> dparams, std::span<T> dx) const {
  const std::size_t n = layers_.size();
  if (dout.size() != output_shape().size()) throw ShapeError("backward: output gradient size");
  const bool want_params = !dparams.empty();
  if (want_params && dparams.size() != params_.size()) {
    throw ShapeError("backward: parameter gradient size");
  }
  if (!dx.empty() && dx.size() != input_.size()) throw ShapeError("backward: input gradient size");
  if (ws.act.size() != n) throw ShapeError("backward: forward was not run on this workspace");
  if (n == 0) {
    std::copy(dout.begin(), dout.end(), dx.begin());
    return;
  }

  ws.grad_a.assign(dout.begin(), dout.end());
  std::vector<T> tmp;
  for (std::size_t li = n; li-- > 0;) {
    const LayerSpec& sp = layers_[li];
    const Shape& o = shapes_[li];
    const Shape& s = li == 0 ? input_ : shapes_[li - 1];
    const T* in = li == 0 ? x.data() : ws.act[li - 1].data();
    const T* g = ws.grad_a.data();
    const bool need_in = li > 0 || !dx.empty();
    const T* w = params_.data() + offsets_[li];
    T* dw = want_params ? dparams.data() + offsets_[li] : nullptr;
    T* db = want_params ? dw + weights_[li] : nullptr;
    auto& gin = ws.grad_b;
    if (need_in) gin.assign(s.size(), T(0));

    switch (sp.kind) {
      case LayerKind::conv1d: {
        const int kc = sp.size * s.c;
        CMapM<T> gm(g, o.h, sp.units);
        CMapStrided<T> im(in, o.h, kc, Eigen::OuterStride<>(s.c));
        if (want_params) {
          MapM<T>(dw, sp.units, kc).noalias() += gm.transpose() * im;
          MapRow<T>(db, sp.units) += gm.colwise().sum();
        }
        if (need_in) {
          tmp.resize(static_cast<std::size_t>(o.h) * kc);
          MapM<T> dim(tmp.data(), o.h, kc);
          dim.noalias() = gm * CMapM<T>(w, sp.units, kc);
          for (int i = 0; i < o.h; ++i) {
            T* dst = gin.data() + static_cast<std::size_t>(i) * s.c;
            const T* src = tmp.data() + static_cast<std::size_t>(i) * kc;
            for (int q = 0; q < kc; ++q) dst[q] += src[q];
          }
        }
        break;
      }
      case LayerKind::conv2d: {
        const int k = sp.size;
        const int kc = k * s.c;
        const int kkc = k * kc;
        const int rows = o.h * o.w;
        CMapM<T> gm(g, rows, sp.units);
        if (want_params) {
          CMapM<T> cm(ws.cols[li].data(), rows, kkc);
          MapM<T>(dw, sp.units, kkc).noalias() += gm.transpose() * cm;
          MapRow<T>(db, sp.units) += gm.colwise().sum();
        }
        if (need_in) {
          tmp.resize(static_cast<std::size_t>(rows) * kkc);
          MapM<T> dcol(tmp.data(), rows, kkc);
          dcol.noalias() = gm * CMapM<T>(w, sp.units, kkc);
          for (int y = 0; y < o.h; ++y) {
            for (int xx = 0; xx < o.w; ++xx) {
              const T* src = tmp.data() + (static_cast<std::size_t>(y) * o.w + xx) * kkc;
              for (int ky = 0; ky < k; ++ky) {
                T* dst = gin.data() + (static_cast<std::size_t>(y + ky) * s.w + xx) * s.c;
                for (int q = 0; q < kc; ++q) dst[q] += src[ky * kc + q];
              }
            }
          }
        }
        break;
      }
      case LayerKind::avgpool1d: {
        if (!need_in) break;
        const T inv = T(1) / T(sp.size);
        for (int i = 0; i < o.h; ++i) {
          for (int t = 0; t < sp.size; ++t) {
            T* dst = gin.data() + (static_cast<std::size_t>(i) * sp.size + t) * s.c;
            const T* src = g + static_cast<std::size_t>(i) * o.c;
            for (int c = 0; c < o.c; ++c) dst[c] = src[c] * inv;
          }
        }
        break;
      }
      case LayerKind::avgpool2d: {
        if (!need_in) break;
        const int p = sp.size;
        const T inv = T(1) / T(p * p);
        for (int y = 0; y < o.h; ++y) {
          for (int xx = 0; xx < o.w; ++xx) {
            const T* src = g + (static_cast<std::size_t>(y) * o.w + xx) * o.c;
            for (int ty = 0; ty < p; ++ty) {
              for (int tx = 0; tx < p; ++tx) {
                T* dst = gin.data() +
                         (static_cast<std::size_t>(y * p + ty) * s.w + (xx * p + tx)) * s.c;
                for (int c = 0; c < o.c; ++c) dst[c] = src[c] * inv;
              }
            }
          }
        }
        break;
      }
      case LayerKind::dense: {
        const int din = static_cast<int>(s.size());
        CMapVec<T> gv(g, sp.units);
        if (want_params) {
          MapM<T>(dw, sp.units, din).noalias() += gv * CMapRow<T>(in, din);
          MapVec<T>(db, sp.units) += gv;
        }
        if (need_in) {
          MapVec<T>(gin.data(), din).noalias() = CMapM<T>(w, sp.units, din).transpose() * gv;
        }
        break;
      }
      case LayerKind::relu: {
        if (!need_in) break;
        const T* out = ws.act[li].data();
        const std::size_t m = o.size();
        for (std::size_t q = 0; q < m; ++q) gin[q] = out[q] > T(0) ? g[q] : T(0);
        break;
      }
    }
    if (!need_in) break;
    ws.grad_a.swap(ws.grad_b);
  }
  if (!dx.empty()) std::copy(ws.grad_a.begin(), ws.grad_a.end(), dx.begin());
}

template <class T>
template <class U>
Network<U> Network<T>::cast() const {
  Network<U> r;
  r.input_ = input_;
  r.layers_ = layers_;
  r.shapes_ = shapes_;
  r.offsets_ = offsets_;
  r.weights_ = weights_;
  r.biases_ = biases_;
  r.params_.assign(params_.begin(), params_.end());
  return r;
}

template class Network<float>;
template class Network<double>;
template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;

std::array<float, 2> SensorModel::forward(std::span<const float> pixels,
                                          Network<float>::Workspace& ws) const {
  auto out = net.forward(pixels, ws);
  if (out.size() != 2) throw ShapeError("sensor: network output is not 2-dimensional");
  return {out[0], out[1]};
}

std::array<double, 2> SensorModel::predict(std::span<const float> pixels,
                                           Network<float>::Workspace& ws) const {
  auto o = forward(pixels, ws);
  return scale.from_net(o[0], o[1]);
}

std::array<double, 2> SensorModel::predict(std::span<const float> pixels) const {
  Network<float>::Workspace ws;
  return predict(pixels, ws);
}

SensorModel make_sensor(Arch arch, int width, int ny, int nx, float flow_scale) {
  SensorModel m;
  m.arch = arch;
  m.width = width;
  m.scale.flow_scale = flow_scale;
  m.net = Network<float>(panet_input(arch, ny, nx), panet_layers(arch, width));
  return m;
}

namespace {

constexpr char kModelMagic[8] = {'P', 'A', 'N', 'E', 'T', '0', '0', '1'};

}  // namespace

void save_model(const SensorModel& model, const std::string& path) {
  using namespace binio;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("model: cannot write " + path);
  const auto& net = model.net;
  std::vector<char> buf;
  auto u32 = [&](std::uint32_t v) {
    char b[4];
    put_u32(b, v);
    buf.insert(buf.end(), b, b + 4);
  };
  auto f32 = [&](float v) {
    char b[4];
    put_f32(b, v);
    buf.insert(buf.end(), b, b + 4);
  };
  buf.insert(buf.end(), kModelMagic, kModelMagic + 8);
  u32(static_cast<std::uint32_t>(model.arch));
  u32(static_cast<std::uint32_t>(model.width));
  u32(net.input_shape().h);
  u32(net.input_shape().w);
  u32(net.input_shape().c);
  u32(static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& l : net.layers()) {
    u32(static_cast<std::uint32_t>(l.kind));
    u32(static_cast<std::uint32_t>(l.size));
    u32(static_cast<std::uint32_t>(l.units));
  }
  f32(model.scale.t_lo);
  f32(model.scale.t_hi);
  f32(model.scale.flow_scale);
  char b8[8];
  put_u64(b8, net.param_count());
  buf.insert(buf.end(), b8, b8 + 8);
  for (float p : net.params()) f32(p);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("model: write failed on " + path);
}

SensorModel load_model(const std::string& path) {
  using namespace binio;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("model: cannot open " + path);
  std::vector<char> data((std::istreambuf_iterator<char>(in)), {});
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > data.size()) throw FormatError("model " + path + ": truncated", pos);
  };
  auto u32 = [&] {
    need(4);
    auto v = get_u32(data.data() + pos);
    pos += 4;
    return v;
  };
  auto f32 = [&] {
    need(4);
    auto v = get_f32(data.data() + pos);
    pos += 4;
    return v;
  };
  need(8);
  if (std::memcmp(data.data(), kModelMagic, 8) != 0) {
    throw FormatError("model " + path + ": bad magic", 0);
  }
  pos = 8;
  SensorModel m;
  const auto arch = u32();
  if (arch > 2) throw FormatError("model " + path + ": unknown arch id", pos - 4);
  m.arch = static_cast<Arch>(arch);
  m.width = static_cast<int>(u32());
  Shape input;
  input.h = static_cast<int>(u32());
  input.w = static_cast<int>(u32());
  input.c = static_cast<int>(u32());
  const auto nl = u32();
  if (nl > 4096) throw FormatError("model " + path + ": implausible layer count", pos - 4);
  std::vector<LayerSpec> layers(nl);
  for (auto& l : layers) {
    const auto kind = u32();
    if (kind < 1 || kind > 6) throw FormatError("model " + path + ": unknown layer kind", pos - 4);
    l.kind = static_cast<LayerKind>(kind);
    l.size = static_cast<int>(u32());
    l.units = static_cast<int>(u32());
  }
  m.scale.t_lo = f32();
  m.scale.t_hi = f32();
  m.scale.flow_scale = f32();
  need(8);
  const auto count = get_u64(data.data() + pos);
  pos += 8;
  try {
    m.net = Network<float>(input, layers);
  } catch (const ShapeError& e) {
    throw FormatError("model " + path + ": " + e.what(), pos);
  }
  if (count != m.net.param_count()) {
    throw FormatError("model " + path + ": parameter count does not match the layer table", pos);
  }
  need(count * 4);
  auto p = m.net.params();
  for (std::size_t k = 0; k < count; ++k) p[k] = get_f32(data.data() + pos + 4 * k);
  pos += count * 4;
  if (pos != data.size()) throw FormatError("model " + path + ": trailing bytes", pos);
  return m;
}

double mse_loss(std::span<const std::array<double, 2>> y,
                std::span<const std::array<double, 2>> y_hat) {
  if (y.empty()) throw InvalidParameter("mse_loss: empty batch");
  if (y.size() != y_hat.size()) throw InvalidParameter("mse_loss: label/prediction counts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (int k = 0; k < 2; ++k) s += (y[i][k] - y_hat[i][k]) * (y[i][k] - y_hat[i][k]);
  }
  return s / (2.0 * y.size());
}

double rmse(std::span<const double> y, std::span<const double> y_hat) {
  if (y.empty() || y.size() != y_hat.size()) {
    throw InvalidParameter("rmse: need equal, non-empty inputs");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  return std::sqrt(s / y.size());
}

double r2(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() < 2 || y.size() != y_hat.size()) {
    throw InvalidParameter("r2: need at least two paired values");
  }
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_tot += (y[i] - mean) * (y[i] - mean);
    ss_res += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  }
  if (ss_tot == 0.0) throw UndefinedMetric("r2: labels have zero variance");
  return 1.0 - ss_res / ss_tot;
}

MemorySource::MemorySource(std::vector<Frame> frames) : frames_(std::move(frames)) {
  if (!frames_.empty()) {
    ny_ = frames_.front().ny;
    nx_ = frames_.front().nx;
  }
  for (const auto& f : frames_) {
    if (f.ny != ny_ || f.nx != nx_ || f.pixels.size() != static_cast<std::size_t>(ny_) * nx_) {
      throw ShapeError("dataset: frames have inconsistent dims");
    }
  }
}

void MemorySource::get(std::size_t i, std::vector<float>& pixels, std::array<float, 2>& label) {
  const Frame& f = frames_.at(i);
  pixels.assign(f.pixels.begin(), f.pixels.end());
  label = {f.leading_temp, f.flow_rate};
}

FileSource::FileSource(const std::string& path) : reader_(path) {}

void FileSource::get(std::size_t i, std::vector<float>& pixels, std::array<float, 2>& label) {
  scratch_ = reader_.read(static_cast<std::uint32_t>(i));
  pixels.swap(scratch_.pixels);
  label = {scratch_.leading_temp, scratch_.flow_rate};
}

namespace {

struct Adam {
  explicit Adam(double rate) : lr(rate) {}
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  long t = 0;

  void step(std::span<float> p, std::span<const float> g) {
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1 - b1) * g[k];
      v[k] = b2 * v[k] + (1 - b2) * static_cast<double>(g[k]) * g[k];
      p[k] -= static_cast<float>(lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps));
    }
  }
};

struct ValStats {
  double loss = 0.0;
  double rmse_temp = 0.0;
  double rmse_flow = 0.0;
  double rmse_scaled = 0.0;
};

ValStats validate(const SensorModel& model, SampleSource& data, std::span<const std::size_t> idx) {
  ValStats v;
  if (idx.empty()) return v;
  Network<float>::Workspace ws;
  std::vector<float> px;
  std::array<float, 2> lab;
  double se[2] = {0, 0}, se_phys[2] = {0, 0};
  for (std::size_t i : idx) {
    data.get(i, px, lab);
    const auto out = model.forward(px, ws);
    const auto y = model.scale.to_net(lab[0], lab[1]);
    const auto phys = model.scale.from_net(out[0], out[1]);
    for (int k = 0; k < 2; ++k) {
      se[k] += (static_cast<double>(out[k]) - y[k]) * (static_cast<double>(out[k]) - y[k]);
      se_phys[k] += (phys[k] - lab[k]) * (phys[k] - lab[k]);
    }
  }
  const double n = static_cast<double>(idx.size());
  v.loss = (se[0] + se[1]) / (2 * n);
  v.rmse_temp = std::sqrt(se_phys[0] / n);
  v.rmse_flow = std::sqrt(se_phys[1] / n);
  v.rmse_scaled = 0.5 * (std::sqrt(se[0] / n) + std::sqrt(se[1] / n));
  return v;
}

// Starts the output biases at the mean scaled label so the final ReLU is
// active for a typical sample from the first step.
void seed_output_bias(SensorModel& model, SampleSource& data, std::span<const std::size_t> idx) {
  auto& net = model.net;
  const auto& layers = net.layers();
  std::size_t last = layers.size();
  for (std::size_t l = layers.size(); l-- > 0;) {
    if (layers[l].kind == LayerKind::dense) {
      last = l;
      break;
    }
  }
  if (last == layers.size() || net.bias_count(last) != 2 || idx.empty()) return;
  std::vector<float> px;
  std::array<float, 2> lab;
  double mean[2] = {0, 0};
  for (std::size_t i : idx) {
    data.get(i, px, lab);
    const auto y = model.scale.to_net(lab[0], lab[1]);
    mean[0] += y[0];
    mean[1] += y[1];
  }
  float* b = net.params().data() + net.weight_offset(last) + net.weight_count(last);
  for (int k = 0; k < 2; ++k) b[k] = static_cast<float>(std::max(mean[k] / idx.size(), 0.01));
}

}  // namespace

TrainResult train_network(SampleSource& data, std::span<const std::size_t> train_idx,
                          std::span<const std::size_t> val_idx, SensorModel init,
                          const TrainConfig& cfg) {
  if (cfg.batch_size < 1 || !(cfg.learning_rate > 0.0) || cfg.max_epochs < 1 ||
      cfg.patience < 1) {
    throw InvalidParameter("train: batch size, learning rate, epochs and patience must be positive");
  }
  if (train_idx.size() < 2 * static_cast<std::size_t>(cfg.batch_size)) {
    throw InvalidParameter("train: training set must hold at least two batches");
  }
  TrainResult res;
  res.model = std::move(init);
  SensorModel& model = res.model;
  const std::size_t np = model.net.param_count();
  std::vector<float> grad(np);
  std::vector<float> best(model.net.params().begin(), model.net.params().end());
  Adam adam{cfg.learning_rate};
  std::mt19937_64 rng(cfg.seed ^ 0xA5A5A5A5ull);
  std::mt19937_64 flips(cfg.seed ^ 0x5BD1E995ull);  // own stream: the shuffle order stays put
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  Network<float>::Workspace ws;
  std::vector<float> px;
  std::array<float, 2> lab;

  double best_metric = std::numeric_limits<double>::infinity();
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t last = std::min(order.size(), first + cfg.batch_size);
      const float inv_b = 1.0f / static_cast<float>(last - first);
      std::fill(grad.begin(), grad.end(), 0.0f);
      for (std::size_t k = first; k < last; ++k) {
        data.get(order[k], px, lab);
        if (cfg.mirror && (flips() & 1u)) {
          const std::size_t nx = data.nx();
          for (auto row = px.begin(); row != px.end(); row += nx) std::reverse(row, row + nx);
        }
        const auto out = model.net.forward(px, ws);
        const auto y = model.scale.to_net(lab[0], lab[1]);
        const float d0 = out[0] - y[0];
        const float d1 = out[1] - y[1];
        loss_sum += 0.5 * (static_cast<double>(d0) * d0 + static_cast<double>(d1) * d1);
        const float dout[2] = {d0 * inv_b, d1 * inv_b};
        model.net.backward(px, ws, dout, grad, {});
      }
      adam.step(model.net.params(), grad);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / order.size();
    const ValStats v = validate(model, data, val_idx);
    rec.val_loss = v.loss;
    rec.val_rmse_temp = v.rmse_temp;
    rec.val_rmse_flow = v.rmse_flow;
    res.history.push_back(rec);
    if (cfg.verbose) {
      std::cerr << "epoch " << epoch << " train " << rec.train_loss << " val " << rec.val_loss
                << " rmse_T " << rec.val_rmse_temp << " rmse_flow " << rec.val_rmse_flow << "\n";
    }
    const double metric = val_idx.empty() ? rec.train_loss : v.rmse_scaled;
    if (!std::isfinite(rec.train_loss) || !std::isfinite(metric)) {
      throw TrainingFailure("train: loss became non-finite at epoch " + std::to_string(epoch),
                            epoch);
    }
    if (metric < best_metric) {
      best_metric = metric;
      res.best_epoch = epoch;
      std::copy(model.net.params().begin(), model.net.params().end(), best.begin());
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  std::copy(best.begin(), best.end(), model.net.params().begin());
  res.best_val_rmse = best_metric;
  return res;
}

TrainResult train(SampleSource& data, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, Arch arch, const TrainConfig& cfg) {
  SensorModel m = make_sensor(arch, cfg.width, data.ny(), data.nx(), cfg.flow_scale);
  std::mt19937_64 rng(cfg.seed);
  m.net.init(rng);
  seed_output_bias(m, data, train_idx);
  return train_network(data, train_idx, val_idx, std::move(m), cfg);
}

TrainResult train(SampleSource& data, Arch arch, const TrainConfig& cfg) {
  if (!(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0)) {
    throw InvalidParameter("train: val_fraction must be in [0, 1)");
  }
  const std::size_t n = data.size();
  const std::size_t nval = static_cast<std::size_t>(std::llround(cfg.val_fraction * n));
  std::vector<std::size_t> tr(n - nval), va(nval);
  std::iota(tr.begin(), tr.end(), std::size_t{0});
  std::iota(va.begin(), va.end(), n - nval);
  return train(data, tr, va, arch, cfg);
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("history: cannot write " + path);
  out << "epoch,train_loss,val_loss,val_rmse_temp,val_rmse_flow\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << fmt_double(r.train_loss) << ',' << fmt_double(r.val_loss) << ','
        << fmt_double(r.val_rmse_temp) << ',' << fmt_double(r.val_rmse_flow) << '\n';
  }
  if (!out) throw IoError("history: write failed on " + path);
}

TargetMetrics evaluate(const SensorModel& model, SampleSource& data,
                       std::span<const std::size_t> idx) {
  std::vector<double> yt, yf, pt, pf;
  Network<float>::Workspace ws;
  std::vector<float> px;
  std::array<float, 2> lab;
  for (std::size_t i : idx) {
    data.get(i, px, lab);
    const auto p = model.predict(px, ws);
    yt.push_back(lab[0]);
    yf.push_back(lab[1]);
    pt.push_back(p[0]);
    pf.push_back(p[1]);
  }
  TargetMetrics m;
  m.rmse_temp = rmse(yt, pt);
  m.rmse_flow = rmse(yf, pf);
  auto safe_r2 = [](const std::vector<double>& y, const std::vector<double>& p) {
    try {
      return r2(y, p);
    } catch (const UndefinedMetric&) {
      return std::numeric_limits<double>::quiet_NaN();
    } catch (const InvalidParameter&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  m.r2_temp = safe_r2(yt, pt);
  m.r2_flow = safe_r2(yf, pf);
  return m;
}

std::vector<FoldSplit> make_folds(std::size_t n, int folds, double val_fraction) {
  if (folds < 2) throw InvalidParameter("make_folds: need at least two folds");
  if (n < static_cast<std::size_t>(folds)) {
    throw InvalidParameter("make_folds: fewer records than folds");
  }
  const std::size_t size = n / folds;
  std::vector<FoldSplit> out(folds);
  for (int k = 0; k < folds; ++k) {
    const std::size_t lo = k * size;
    const std::size_t hi = k + 1 == folds ? n : lo + size;
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= lo && i < hi) {
        out[k].test.push_back(i);
      } else {
        rest.push_back(i);
      }
    }
    const std::size_t nval = static_cast<std::size_t>(std::llround(val_fraction * rest.size()));
    out[k].train.assign(rest.begin(), rest.end() - nval);
    out[k].val.assign(rest.end() - nval, rest.end());
  }
  return out;
}

CvReport cross_validate(SampleSource& data, Arch arch, const HyperGrid& grid,
                        const TrainConfig& base, int folds, const CvProgress& progress) {
  if (grid.size() == 0) throw InvalidParameter("cross_validate: hyperparameter grid is empty");
  CvReport rep;
  const auto splits = make_folds(data.size(), folds, base.val_fraction);
  for (int k = 0; k < folds; ++k) {
    const FoldSplit& sp = splits[k];
    FoldReport fr;
    fr.fold = k;
    double best = std::numeric_limits<double>::infinity();
    SensorModel best_model;
    for (int b : grid.batch_sizes) {
      for (double lr : grid.learning_rates) {
        for (int w : grid.widths) {
          TrainConfig cfg = base;
          cfg.batch_size = b;
          cfg.learning_rate = lr;
          cfg.width = w;
          TrainResult r = train(data, sp.train, sp.val, arch, cfg);
          if (progress) progress(k, cfg, r.best_val_rmse);
          if (r.best_val_rmse < best) {
            best = r.best_val_rmse;
            fr.chosen = cfg;
            best_model = std::move(r.model);
          }
        }
      }
    }
    fr.val_rmse = best;
    fr.test = evaluate(best_model, data, sp.test);
    rep.folds.push_back(fr);
  }
  auto stat = [&](auto get, double& mean, double& sd) {
    mean = 0.0;
    for (const auto& f : rep.folds) mean += get(f.test);
    mean /= rep.folds.size();
    double ss = 0.0;
    for (const auto& f : rep.folds) ss += (get(f.test) - mean) * (get(f.test) - mean);
    sd = rep.folds.size() > 1 ? std::sqrt(ss / (rep.folds.size() - 1)) : 0.0;
  };
  stat([](const TargetMetrics& m) { return m.rmse_temp; }, rep.mean.rmse_temp, rep.std.rmse_temp);
  stat([](const TargetMetrics& m) { return m.rmse_flow; }, rep.mean.rmse_flow, rep.std.rmse_flow);
  stat([](const TargetMetrics& m) { return m.r2_temp; }, rep.mean.r2_temp, rep.std.r2_temp);
  stat([](const TargetMetrics& m) { return m.r2_flow; }, rep.mean.r2_flow, rep.std.r2_flow);
  return rep;
}

void write_cv_csv(const CvReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cv report: cannot write " + path);
  out << "fold,batch_size,learning_rate,width,val_rmse,rmse_temp,rmse_flow,r2_temp,r2_flow,"
         "rmse_temp_std,rmse_flow_std,r2_temp_std,r2_flow_std\n";
  for (const auto& f : report.folds) {
    out << f.fold << ',' << f.chosen.batch_size << ',' << fmt_double(f.chosen.learning_rate) << ','
        << f.chosen.width << ',' << fmt_double(f.val_rmse) << ',' << fmt_double(f.test.rmse_temp)
        << ',' << fmt_double(f.test.rmse_flow) << ',' << fmt_double(f.test.r2_temp) << ','
        << fmt_double(f.test.r2_flow) << ",,,,\n";
  }
  out << "summary,,,,," << fmt_double(report.mean.rmse_temp) << ','
      << fmt_double(report.mean.rmse_flow) << ',' << fmt_double(report.mean.r2_temp) << ','
      << fmt_double(report.mean.r2_flow) << ',' << fmt_double(report.std.rmse_temp) << ','
      << fmt_double(report.std.rmse_flow) << ',' << fmt_double(report.std.r2_temp) << ','
      << fmt_double(report.std.r2_flow) << '\n';
  if (!out) throw IoError("cv report: write failed on " + path);
}

namespace {

void accumulate_input_gradient(const SensorModel& model, std::span<const float> x,
                               const std::array<float, 2>& y, Network<float>::Workspace& ws,
                               std::vector<float>& dx) {
  const auto out = model.net.forward(x, ws);
  if (out.size() != 2) throw ShapeError("saliency: network output is not 2-dimensional");
  // L = mean over the two outputs of the squared error.
  const float dout[2] = {out[0] - y[0], out[1] - y[1]};
  dx.resize(x.size());
  model.net.backward(x, ws, dout, {}, dx);
}

}  // namespace

std::vector<float> minmax_normalize(std::span<const float> v) {
  std::vector<float> out(v.size(), 0.0f);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double span = static_cast<double>(*hi) - *lo;
  if (!(span > 0.0)) return out;
  for (std::size_t k = 0; k < v.size(); ++k) {
    out[k] = static_cast<float>((static_cast<double>(v[k]) - *lo) / span);
  }
  return out;
}

std::vector<float> input_gradient(const SensorModel& model, std::span<const float> x,
                                  std::array<double, 2> y) {
  Network<float>::Workspace ws;
  std::vector<float> dx;
  accumulate_input_gradient(
      model, x, model.scale.to_net(static_cast<float>(y[0]), static_cast<float>(y[1])), ws, dx);
  return dx;
}

std::vector<float> smoothgrad(const SensorModel& model, std::span<const float> x,
                              std::array<double, 2> y, int samples, double sigma,
                              std::uint64_t seed) {
  if (samples < 1) throw InvalidParameter("smoothgrad: need at least one sample");
  if (!(sigma >= 0.0)) throw InvalidParameter("smoothgrad: sigma must be >= 0");
  const auto ys = model.scale.to_net(static_cast<float>(y[0]), static_cast<float>(y[1]));
  Network<float>::Workspace ws;
  std::vector<float> dx;
  std::vector<float> mag(x.size());
  if (sigma == 0.0) {
    // Every noisy copy is x itself, so the average is one gradient.
    accumulate_input_gradient(model, x, ys, ws, dx);
    for (std::size_t k = 0; k < x.size(); ++k) mag[k] = std::abs(dx[k]);
    return minmax_normalize(mag);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<double> sum(x.size(), 0.0);
  std::vector<float> xn(x.size());
  for (int m = 0; m < samples; ++m) {
    for (std::size_t k = 0; k < x.size(); ++k) xn[k] = static_cast<float>(x[k] + noise(rng));
    accumulate_input_gradient(model, xn, ys, ws, dx);
    for (std::size_t k = 0; k < x.size(); ++k) sum[k] += dx[k];
  }
  for (std::size_t k = 0; k < x.size(); ++k) mag[k] = static_cast<float>(std::abs(sum[k] / samples));
  return minmax_normalize(mag);
}

}  // namespace pastille
