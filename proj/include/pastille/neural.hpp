#pragma once

// PaNet soft sensors: a small from-scratch CNN stack, Adam training,
// cross-validation, metrics and SmoothGrad saliency.
//
// Activations are stored channels-last per sample, index (y*w + x)*c + ch.
// A frame's row-major [ny][nx] pixels are therefore directly a PaNet-1D
// input (length ny, nx channels) and a PaNet-2D input (ny x nx x 1).

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pastille/imaging.hpp"

namespace pastille {

enum class LayerKind : std::uint32_t {
  conv1d = 1,
  conv2d = 2,
  avgpool1d = 3,
  avgpool2d = 4,
  dense = 5,
  relu = 6,
};

const char* layer_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int size = 0;   // kernel size or pooling window
  int units = 0;  // filters or dense units
};

struct Shape {
  int h = 1;
  int w = 1;
  int c = 1;
  std::size_t size() const { return static_cast<std::size_t>(h) * w * c; }
  bool operator==(const Shape&) const = default;
};

enum class Arch : std::uint32_t { custom = 0, panet1d = 1, panet2d = 2 };

Arch parse_arch(const std::string& s);  // "1d" or "2d"; throws InvalidParameter
const char* arch_name(Arch arch);
std::vector<LayerSpec> panet_layers(Arch arch, int width);
Shape panet_input(Arch arch, int ny, int nx);

template <class T>
class Network {
 public:
  struct Workspace {
    std::vector<std::vector<T>> act;   // output of every layer
    std::vector<std::vector<T>> cols;  // im2col buffers of conv2d layers
    std::vector<T> grad_a;
    std::vector<T> grad_b;
  };

  Network() = default;
  // Throws ShapeError naming the first layer that does not fit.
  Network(Shape input, std::vector<LayerSpec> layers);

  const Shape& input_shape() const { return input_; }
  const Shape& output_shape() const { return shapes_.back(); }
  const std::vector<Shape>& shapes() const { return shapes_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t param_count() const { return params_.size(); }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  // Offset of layer l's weights; biases follow the weights.
  std::size_t weight_offset(std::size_t l) const { return offsets_[l]; }
  std::size_t weight_count(std::size_t l) const { return weights_[l]; }
  std::size_t bias_count(std::size_t l) const { return biases_[l]; }

  // He-uniform weights, zero biases.
  void init(std::mt19937_64& rng);

  // Returns the network output (a view into the workspace).
  std::span<const T> forward(std::span<const T> x, Workspace& ws) const;
  // Back-propagates `dout` through the activations left in `ws` by forward(x).
  // Parameter gradients are added to `dparams`; `dx`, when non-empty,
  // receives the input gradient.
  void backward(std::span<const T> x, Workspace& ws, std::span<const T> dout,
                std::span<T> dparams, std::span<T> dx) const;

  template <class U>
  Network<U> cast() const;

 private:
  template <class>
  friend class Network;

  Shape input_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> weights_;
  std::vector<std::size_t> biases_;
  std::vector<T> params_;
};

// Training targets are scaled before they reach the network: temperature
// by the frame range, flow by the nozzle count.
struct LabelScale {
  float t_lo = static_cast<float>(kFrameTempLo);
  float t_hi = static_cast<float>(kFrameTempHi);
  float flow_scale = 12.0f;

  std::array<float, 2> to_net(float temp, float flow) const {
    return {(temp - t_lo) / (t_hi - t_lo), flow / flow_scale};
  }
  std::array<double, 2> from_net(double a, double b) const {
    return {t_lo + a * (t_hi - t_lo), b * flow_scale};
  }
};

struct SensorModel {
  Arch arch = Arch::panet1d;
  int width = 64;
  LabelScale scale;
  Network<float> net;

  // Raw network outputs (scaled units, both >= 0).
  std::array<float, 2> forward(std::span<const float> pixels,
                               Network<float>::Workspace& ws) const;
  // (temperature in °F, flow in pastilles per time step).
  std::array<double, 2> predict(std::span<const float> pixels,
                                Network<float>::Workspace& ws) const;
  std::array<double, 2> predict(std::span<const float> pixels) const;
};

SensorModel make_sensor(Arch arch, int width, int ny, int nx, float flow_scale);

void save_model(const SensorModel& model, const std::string& path);
SensorModel load_model(const std::string& path);  // IoError / FormatError

// Mean over samples and both outputs of the squared error.
double mse_loss(std::span<const std::array<double, 2>> y,
                std::span<const std::array<double, 2>> y_hat);
double rmse(std::span<const double> y, std::span<const double> y_hat);
double r2(std::span<const double> y, std::span<const double> y_hat);  // UndefinedMetric

// Random access to labelled frames.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual int ny() const = 0;
  virtual int nx() const = 0;
  virtual void get(std::size_t i, std::vector<float>& pixels, std::array<float, 2>& label) = 0;
};

class MemorySource : public SampleSource {
 public:
  explicit MemorySource(std::vector<Frame> frames);
  std::size_t size() const override { return frames_.size(); }
  int ny() const override { return ny_; }
  int nx() const override { return nx_; }
  void get(std::size_t i, std::vector<float>& pixels, std::array<float, 2>& label) override;
  const std::vector<Frame>& frames() const { return frames_; }

 private:
  std::vector<Frame> frames_;
  int ny_ = 0;
  int nx_ = 0;
};

// Reads records from disk on demand, so datasets larger than memory work.
class FileSource : public SampleSource {
 public:
  explicit FileSource(const std::string& path);
  std::size_t size() const override { return reader_.header().count; }
  int ny() const override { return static_cast<int>(reader_.header().ny); }
  int nx() const override { return static_cast<int>(reader_.header().nx); }
  void get(std::size_t i, std::vector<float>& pixels, std::array<float, 2>& label) override;

 private:
  DatasetReader reader_;
  Frame scratch_;
};

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 0.001;
  int width = 64;
  int max_epochs = 200;
  int patience = 10;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  bool shuffle = true;       // reshuffle the training order every epoch
  // Feed each training frame flipped across the belt width with probability
  // 1/2. Labels are unchanged: the nozzle and jet layouts are symmetric.
  bool mirror = false;
  float flow_scale = 12.0f;  // nozzles per row
  bool verbose = false;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_rmse_temp = 0.0;
  double val_rmse_flow = 0.0;
};

struct TargetMetrics {
  double rmse_temp = 0.0;
  double rmse_flow = 0.0;
  double r2_temp = 0.0;
  double r2_flow = 0.0;
};

struct TrainResult {
  SensorModel model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_rmse = 0.0;  // mean of the two scaled-unit RMSEs
};

// Trains on `train_idx`, selecting the epoch with the lowest validation RMSE.
TrainResult train(SampleSource& data, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, Arch arch, const TrainConfig& cfg);
// Holds out the last `val_fraction` of the records for validation.
TrainResult train(SampleSource& data, Arch arch, const TrainConfig& cfg);
// Same loop for an arbitrary network (used with tiny nets in tests).
TrainResult train_network(SampleSource& data, std::span<const std::size_t> train_idx,
                          std::span<const std::size_t> val_idx, SensorModel init,
                          const TrainConfig& cfg);

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path);

TargetMetrics evaluate(const SensorModel& model, SampleSource& data,
                       std::span<const std::size_t> idx);

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Five contiguous folds (remainder to the last). Fold k is the test set;
// the rest keeps its order and the trailing val_fraction validates.
std::vector<FoldSplit> make_folds(std::size_t n, int folds = 5, double val_fraction = 0.2);

struct HyperGrid {
  std::vector<int> batch_sizes{32, 64, 128};
  std::vector<double> learning_rates{0.0005, 0.001, 0.005};
  std::vector<int> widths{64, 128, 256};
  std::size_t size() const { return batch_sizes.size() * learning_rates.size() * widths.size(); }
};

struct FoldReport {
  int fold = 0;
  TrainConfig chosen;
  double val_rmse = 0.0;
  TargetMetrics test;
};

struct CvReport {
  std::vector<FoldReport> folds;
  TargetMetrics mean;
  TargetMetrics std;
};

using CvProgress = std::function<void(int fold, const TrainConfig& cfg, double val_rmse)>;

// Cross-validation with a grid search inside every fold. `base` supplies
// epochs, patience, seed and flow scale.
CvReport cross_validate(SampleSource& data, Arch arch, const HyperGrid& grid,
                        const TrainConfig& base, int folds = 5, const CvProgress& progress = {});
void write_cv_csv(const CvReport& report, const std::string& path);

// SmoothGrad: |mean over M noisy copies of dL/dx|, min-max normalized to
// [0, 1]; a constant map comes back as zeros. `y` is in physical units.
std::vector<float> smoothgrad(const SensorModel& model, std::span<const float> x,
                              std::array<double, 2> y, int samples, double sigma,
                              std::uint64_t seed = 0);
// Plain input gradient of the scaled MSE loss.
std::vector<float> input_gradient(const SensorModel& model, std::span<const float> x,
                                  std::array<double, 2> y);
std::vector<float> minmax_normalize(std::span<const float> v);

}  // namespace pastille
