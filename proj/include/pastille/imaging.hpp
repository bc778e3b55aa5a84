#pragma once

// Thermal frames, training labels and the PASTSET1 dataset container.

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "pastille/field.hpp"
#include "pastille/process.hpp"

namespace pastille {

inline constexpr double kFrameTempLo = 72.0;
inline constexpr double kFrameTempHi = 212.0;

struct Frame {
  int ny = 0;  // rows, belt length (axis 0)
  int nx = 0;  // columns, belt width
  std::vector<float> pixels;  // ny * nx, row-major
  float leading_temp = 0.0f;
  float flow_rate = 0.0f;
  std::uint32_t episode = 0;
  std::uint32_t step = 0;

  float at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * nx + col]; }
};

// clamp((u - t_lo) / (t_hi - t_lo), 0, 1) laid out [belt length][width].
std::vector<float> render_frame(const ThermalField& field, double t_lo = kFrameTempLo,
                                double t_hi = kFrameTempHi);
// Same, resampled by nearest neighbour onto an out_ny x out_nx camera.
std::vector<float> render_frame(const ThermalField& field, double t_lo, double t_hi, int out_ny,
                                int out_nx);

// Mean temperature at the pastille centres of the leading row.
// Throws NoLeadingRow on an empty belt.
double leading_row_temp(const ProcessState& state);

struct DatasetHeader {
  std::uint32_t count = 0;
  std::uint32_t ny = 0;
  std::uint32_t nx = 0;
  float t_lo = static_cast<float>(kFrameTempLo);
  float t_hi = static_cast<float>(kFrameTempHi);

  static constexpr std::size_t kBytes = 28;
  std::size_t record_bytes() const { return (std::size_t{ny} * nx + 2) * 4 + 8; }
};

class DatasetWriter {
 public:
  // Throws IoError if the file cannot be created.
  DatasetWriter(const std::string& path, int ny, int nx, double t_lo = kFrameTempLo,
                double t_hi = kFrameTempHi);
  ~DatasetWriter();
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;

  void write(const Frame& frame);
  // Patches the record count into the header and flushes.
  void close();
  std::uint32_t count() const { return header_.count; }

 private:
  std::string path_;
  std::ofstream out_;
  DatasetHeader header_;
  bool closed_ = false;
};

class DatasetReader {
 public:
  // Validates the header; throws IoError or FormatError.
  explicit DatasetReader(const std::string& path);

  const DatasetHeader& header() const { return header_; }
  // Reads the next record in file order; false once `count` records are read.
  bool next(Frame& frame);
  // Random access by record index.
  Frame read(std::uint32_t index);
  std::uint32_t position() const { return next_index_; }

 private:
  void read_record(std::uint32_t index, Frame& frame);

  std::string path_;
  std::ifstream in_;
  DatasetHeader header_;
  std::uint64_t file_size_ = 0;
  std::uint32_t next_index_ = 0;
};

void write_dataset(const std::string& path, const std::vector<Frame>& frames,
                   double t_lo = kFrameTempLo, double t_hi = kFrameTempHi);
std::vector<Frame> read_dataset(const std::string& path);

// Per-episode randomization of the generator. Each episode draws its own
// speed band, clog prior, cooling intensity and (optionally) grid size.
struct DatasetSpec {
  double speed_lo_min = 2.0;     // lower end of the speed band ~ U(speed_lo_min, speed_lo_max)
  double speed_lo_max = 8.0;
  double speed_band_min = 2.0;   // band width ~ U(min, max), capped at speed_max
  double speed_band_max = 10.0;
  int segment_min = 20;          // steps between new speed targets
  int segment_max = 80;
  double ramp = 0.5;             // max speed change per step
  double clog_scale_min = 0.0;   // propensity = scale * Beta(2, 8)
  double clog_scale_max = 0.8;
  double clog_duration_min = 1.0;
  double clog_duration_max = 5.0;
  double cooling_min = 0.85;     // multiplier on the jet coefficient
  double cooling_max = 1.15;
  double dim_jitter = 0.0;       // relative grid-size jitter, frames rescaled to fixed dims
  int warmup = -1;               // steps before sampling; < 0 means ny
  int stride = 16;               // steps between frames; shorter strides give near-duplicates
  int frames_per_episode = 50;
};

struct EpisodeDraw {
  ProcessConfig config;
  double speed_lo = 0.0;
  double speed_hi = 0.0;
  double clog_scale = 0.0;
  double clog_duration = 1.0;
  double cooling = 1.0;
  std::uint64_t seed = 0;
};

EpisodeDraw draw_episode(const ProcessConfig& base, const DatasetSpec& spec,
                         std::uint64_t episode_seed);

using FrameHook = std::function<void(const ProcessState&, const Frame&)>;

// Runs one episode and returns its frames rendered at the base dims. `hook`
// sees the generating state right after each sampled frame is built.
std::vector<Frame> generate_episode(const ProcessConfig& base, const DatasetSpec& spec,
                                    std::uint32_t episode, std::uint64_t seed, int n_frames,
                                    const FrameHook& hook = {});

// Writes exactly n_frames records plus `path.meta`. Episode e uses seed
// `seed + e`. Output is byte-identical for any `jobs`.
void generate_dataset(const ProcessConfig& base, const DatasetSpec& spec, long n_frames,
                      std::uint64_t seed, const std::string& path, int jobs = 1);

}  // namespace pastille
