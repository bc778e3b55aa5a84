#include "pastille/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <thread>

#include "binio.hpp"
#include "pastille/errors.hpp"

namespace pastille {

using namespace binio;

namespace {

constexpr char kMagic[8] = {'P', 'A', 'S', 'T', 'S', 'E', 'T', '1'};

void encode_header(const DatasetHeader& h, char* buf) {
  std::memcpy(buf, kMagic, 8);
  put_u32(buf + 8, h.count);
  put_u32(buf + 12, h.ny);
  put_u32(buf + 16, h.nx);
  put_f32(buf + 20, h.t_lo);
  put_f32(buf + 24, h.t_hi);
}

}  // namespace

std::vector<float> render_frame(const ThermalField& field, double t_lo, double t_hi) {
  return render_frame(field, t_lo, t_hi, field.ny(), field.nx());
}

std::vector<float> render_frame(const ThermalField& field, double t_lo, double t_hi, int out_ny,
                                int out_nx) {
  if (!(t_lo < t_hi)) throw InvalidParameter("render_frame: t_lo must be below t_hi");
  if (out_ny < 1 || out_nx < 1) throw InvalidParameter("render_frame: empty output frame");
  const double span = t_hi - t_lo;
  std::vector<float> px(static_cast<std::size_t>(out_ny) * out_nx);
  const bool same = out_ny == field.ny() && out_nx == field.nx();
  for (int r = 0; r < out_ny; ++r) {
    const int j = same ? r : std::min(field.ny() - 1, static_cast<int>((r + 0.5) * field.ny() / out_ny));
    for (int c = 0; c < out_nx; ++c) {
      const int i =
          same ? c : std::min(field.nx() - 1, static_cast<int>((c + 0.5) * field.nx() / out_nx));
      const double v = std::clamp((field.at(i, j) - t_lo) / span, 0.0, 1.0);
      px[static_cast<std::size_t>(r) * out_nx + c] = static_cast<float>(v);
    }
  }
  return px;
}

double leading_row_temp(const ProcessState& state) {
  auto t = state.leading_row_temp();
  if (!t) throw NoLeadingRow();
  return *t;
}

DatasetWriter::DatasetWriter(const std::string& path, int ny, int nx, double t_lo, double t_hi)
    : path_(path) {
  if (ny < 1 || nx < 1) throw InvalidParameter("dataset: frame dims must be positive");
  if (!(t_lo < t_hi)) throw InvalidParameter("dataset: t_lo must be below t_hi");
  header_.ny = static_cast<std::uint32_t>(ny);
  header_.nx = static_cast<std::uint32_t>(nx);
  header_.t_lo = static_cast<float>(t_lo);
  header_.t_hi = static_cast<float>(t_hi);
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("dataset: cannot write " + path);
  char buf[DatasetHeader::kBytes];
  encode_header(header_, buf);
  out_.write(buf, sizeof buf);
  if (!out_) throw IoError("dataset: write failed on " + path);
}

DatasetWriter::~DatasetWriter() {
  if (!closed_) {
    try {
      close();
    } catch (...) {
    }
  }
}

void DatasetWriter::write(const Frame& frame) {
  if (closed_) throw IoError("dataset: writer already closed");
  if (frame.ny != static_cast<int>(header_.ny) || frame.nx != static_cast<int>(header_.nx) ||
      frame.pixels.size() != std::size_t{header_.ny} * header_.nx) {
    throw ShapeError("dataset: frame dims do not match the header");
  }
  std::vector<char> buf(header_.record_bytes());
  char* p = buf.data();
  for (float v : frame.pixels) {
    put_f32(p, v);
    p += 4;
  }
  put_f32(p, frame.leading_temp);
  put_f32(p + 4, frame.flow_rate);
  put_u64(p + 8, (std::uint64_t{frame.episode} << 32) | frame.step);
  out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out_) throw IoError("dataset: write failed on " + path_);
  ++header_.count;
}

void DatasetWriter::close() {
  if (closed_) return;
  closed_ = true;
  char buf[4];
  put_u32(buf, header_.count);
  out_.seekp(8);
  out_.write(buf, 4);
  out_.flush();
  if (!out_) throw IoError("dataset: write failed on " + path_);
  out_.close();
}

DatasetReader::DatasetReader(const std::string& path) : path_(path) {
  in_.open(path, std::ios::binary);
  if (!in_) throw IoError("dataset: cannot open " + path);
  std::error_code ec;
  file_size_ = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("dataset: cannot stat " + path);
  char buf[DatasetHeader::kBytes];
  in_.read(buf, sizeof buf);
  if (in_.gcount() < 8 || std::memcmp(buf, kMagic, 8) != 0) {
    throw FormatError("dataset " + path + ": bad magic", 0);
  }
  if (in_.gcount() != static_cast<std::streamsize>(sizeof buf)) {
    throw FormatError("dataset " + path + ": truncated header",
                      static_cast<std::uint64_t>(in_.gcount()));
  }
  header_.count = get_u32(buf + 8);
  header_.ny = get_u32(buf + 12);
  header_.nx = get_u32(buf + 16);
  header_.t_lo = get_f32(buf + 20);
  header_.t_hi = get_f32(buf + 24);
  if (header_.ny == 0 || header_.nx == 0) {
    throw FormatError("dataset " + path + ": zero frame dims", 12);
  }
  if (!(header_.t_lo < header_.t_hi)) {
    throw FormatError("dataset " + path + ": t_lo must be below t_hi", 20);
  }
  const std::uint64_t expected =
      DatasetHeader::kBytes + std::uint64_t{header_.count} * header_.record_bytes();
  if (file_size_ > expected) {
    throw FormatError("dataset " + path + ": trailing bytes after the last record", expected);
  }
}

void DatasetReader::read_record(std::uint32_t index, Frame& frame) {
  const std::size_t rb = header_.record_bytes();
  const std::uint64_t offset = DatasetHeader::kBytes + std::uint64_t{index} * rb;
  if (offset + rb > file_size_) {
    throw FormatError("dataset " + path_ + ": truncated record " + std::to_string(index),
                      std::min(offset, file_size_), index);
  }
  std::vector<char> buf(rb);
  in_.read(buf.data(), static_cast<std::streamsize>(rb));
  if (in_.gcount() != static_cast<std::streamsize>(rb)) {
    throw FormatError("dataset " + path_ + ": truncated record " + std::to_string(index),
                      offset + static_cast<std::uint64_t>(in_.gcount()), index);
  }
  frame.ny = static_cast<int>(header_.ny);
  frame.nx = static_cast<int>(header_.nx);
  const std::size_t n = std::size_t{header_.ny} * header_.nx;
  frame.pixels.resize(n);
  const char* p = buf.data();
  for (std::size_t k = 0; k < n; ++k, p += 4) frame.pixels[k] = get_f32(p);
  frame.leading_temp = get_f32(p);
  frame.flow_rate = get_f32(p + 4);
  const std::uint64_t meta = get_u64(p + 8);
  frame.episode = static_cast<std::uint32_t>(meta >> 32);
  frame.step = static_cast<std::uint32_t>(meta & 0xFFFFFFFFu);
}

bool DatasetReader::next(Frame& frame) {
  if (next_index_ >= header_.count) return false;
  read_record(next_index_, frame);
  ++next_index_;
  return true;
}

Frame DatasetReader::read(std::uint32_t index) {
  if (index >= header_.count) {
    throw InvalidParameter("dataset: record " + std::to_string(index) + " out of range");
  }
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(DatasetHeader::kBytes +
                                        std::uint64_t{index} * header_.record_bytes()));
  Frame f;
  read_record(index, f);
  next_index_ = index + 1;
  return f;
}

void write_dataset(const std::string& path, const std::vector<Frame>& frames, double t_lo,
                   double t_hi) {
  const int ny = frames.empty() ? 1 : frames.front().ny;
  const int nx = frames.empty() ? 1 : frames.front().nx;
  DatasetWriter w(path, ny, nx, t_lo, t_hi);
  for (const auto& f : frames) w.write(f);
  w.close();
}

std::vector<Frame> read_dataset(const std::string& path) {
  DatasetReader r(path);
  std::vector<Frame> frames(r.header().count);
  for (auto& f : frames) r.next(f);
  return frames;
}

EpisodeDraw draw_episode(const ProcessConfig& base, const DatasetSpec& spec,
                         std::uint64_t episode_seed) {
  Rng rng(episode_seed);
  auto uni = [&](double a, double b) {
    return a + (b - a) * std::generate_canonical<double, 53>(rng);
  };
  EpisodeDraw d;
  d.seed = episode_seed;
  d.config = base;
  d.speed_lo = std::clamp(uni(spec.speed_lo_min, spec.speed_lo_max), base.speed_min,
                          base.speed_max);
  d.speed_hi = std::min(base.speed_max, d.speed_lo + uni(spec.speed_band_min, spec.speed_band_max));
  d.clog_scale = uni(spec.clog_scale_min, spec.clog_scale_max);
  d.clog_duration = uni(spec.clog_duration_min, spec.clog_duration_max);
  d.cooling = uni(spec.cooling_min, spec.cooling_max);
  if (spec.dim_jitter > 0.0) {
    const int ny = static_cast<int>(std::lround(base.ny * (1.0 + uni(-spec.dim_jitter, spec.dim_jitter))));
    const int nx = static_cast<int>(std::lround(base.nx * (1.0 + uni(-spec.dim_jitter, spec.dim_jitter))));
    d.config.ny = std::max(ny, 3 + 2 * base.pastille_footprint);
    d.config.nx = std::max(nx, 3 + 2 * base.pastille_footprint);
    CoolingConfig cooling = CoolingConfig::uniform_bands(d.config.nx, d.config.ny, base.cooling.rows);
    cooling.jets_per_row = base.cooling.jets_per_row;
    cooling.water_rate = base.cooling.water_rate;
    cooling.water_temp = base.cooling.water_temp;
    cooling.belt_thickness = base.cooling.belt_thickness;
    cooling.belt_density = base.cooling.belt_density;
    cooling.cp_water = base.cooling.cp_water;
    cooling.cp_belt = base.cooling.cp_belt;
    cooling.intensity = base.cooling.intensity;
    d.config.cooling = cooling;
  }
  d.config.cooling.intensity *= d.cooling;
  return d;
}

std::vector<Frame> generate_episode(const ProcessConfig& base, const DatasetSpec& spec,
                                    std::uint32_t episode, std::uint64_t seed, int n_frames,
                                    const FrameHook& hook) {
  const EpisodeDraw d = draw_episode(base, spec, seed);
  Rng prior(seed ^ 0x9E3779B97F4A7C15ull);
  ClogModel clog =
      ClogModel::sample(d.config.nozzles_per_row, prior, std::min(1.0, d.clog_scale), d.clog_duration);
  ProcessState state(d.config, std::move(clog), seed);
  Rng drive(seed + 0x632BE59BD9B4E019ull);
  auto uni = [&](double a, double b) {
    return a + (b - a) * std::generate_canonical<double, 53>(drive);
  };
  std::uniform_int_distribution<int> seg(spec.segment_min, std::max(spec.segment_min, spec.segment_max));

  const int warmup = spec.warmup < 0 ? d.config.ny : spec.warmup;
  const int stride = std::max(1, spec.stride);
  double speed = uni(d.speed_lo, d.speed_hi);
  double target = speed;
  int until_retarget = seg(drive);

  std::vector<Frame> frames;
  frames.reserve(n_frames);
  long n = 0;
  // Episodes whose belt stays empty would loop forever; give up after a generous budget.
  const long max_steps = warmup + static_cast<long>(n_frames) * stride * 20 + 1000;
  while (static_cast<int>(frames.size()) < n_frames && n < max_steps) {
    if (--until_retarget <= 0) {
      target = uni(d.speed_lo, d.speed_hi);
      until_retarget = seg(drive);
    }
    speed += std::clamp(target - speed, -spec.ramp, spec.ramp);
    const StepReport rep = simulate_step(state, speed);
    ++n;
    if (n <= warmup || (n - warmup) % stride != 0 || !rep.leading_row_temp) continue;
    Frame f;
    f.ny = base.ny;
    f.nx = base.nx;
    f.pixels = render_frame(state.field(), kFrameTempLo, kFrameTempHi, base.ny, base.nx);
    f.leading_temp = static_cast<float>(*rep.leading_row_temp);
    f.flow_rate = static_cast<float>(rep.flow_rate);
    f.episode = episode;
    f.step = static_cast<std::uint32_t>(rep.step);
    if (hook) hook(state, f);
    frames.push_back(std::move(f));
  }
  if (static_cast<int>(frames.size()) < n_frames) {
    throw Error("generate_dataset: episode " + std::to_string(episode) +
                " produced too few labelled frames");
  }
  return frames;
}

void generate_dataset(const ProcessConfig& base, const DatasetSpec& spec, long n_frames,
                      std::uint64_t seed, const std::string& path, int jobs) {
  if (n_frames < 1) throw InvalidParameter("generate_dataset: n_frames must be >= 1");
  if (spec.frames_per_episode < 1) {
    throw InvalidParameter("generate_dataset: frames_per_episode must be >= 1");
  }
  base.validate();
  jobs = std::max(1, jobs);
  const long per = spec.frames_per_episode;
  const long episodes = (n_frames + per - 1) / per;

  DatasetWriter writer(path, base.ny, base.nx);
  for (long first = 0; first < episodes; first += jobs) {
    const long batch = std::min<long>(jobs, episodes - first);
    std::vector<std::vector<Frame>> out(batch);
    std::vector<std::exception_ptr> errs(batch);
    auto work = [&](long k) {
      const long e = first + k;
      const int want = static_cast<int>(std::min(per, n_frames - e * per));
      try {
        out[k] = generate_episode(base, spec, static_cast<std::uint32_t>(e),
                                  seed + static_cast<std::uint64_t>(e), want);
      } catch (...) {
        errs[k] = std::current_exception();
      }
    };
    if (batch == 1) {
      work(0);
    } else {
      std::vector<std::jthread> pool;
      for (long k = 0; k < batch; ++k) pool.emplace_back(work, k);
    }
    for (long k = 0; k < batch; ++k) {
      if (errs[k]) std::rethrow_exception(errs[k]);
      for (const auto& f : out[k]) writer.write(f);
    }
  }
  writer.close();

  const std::string meta_path = path + ".meta";
  std::ofstream meta(meta_path);
  if (!meta) throw IoError("generate_dataset: cannot write " + meta_path);
  meta << "format: PASTSET1\n"
       << "frames: " << n_frames << "\n"
       << "episodes: " << episodes << "\n"
       << "seed: " << seed << "\n"
       << "episode_seed: seed + episode\n"
       << "ny: " << base.ny << "\n"
       << "nx: " << base.nx << "\n"
       << "t_lo: " << kFrameTempLo << "\n"
       << "t_hi: " << kFrameTempHi << "\n"
       << "speed_lo_range: " << spec.speed_lo_min << " " << spec.speed_lo_max << "\n"
       << "speed_band_range: " << spec.speed_band_min << " " << spec.speed_band_max << "\n"
       << "segment_range: " << spec.segment_min << " " << spec.segment_max << "\n"
       << "ramp: " << spec.ramp << "\n"
       << "clog_scale_range: " << spec.clog_scale_min << " " << spec.clog_scale_max << "\n"
       << "clog_duration_range: " << spec.clog_duration_min << " " << spec.clog_duration_max
       << "\n"
       << "cooling_range: " << spec.cooling_min << " " << spec.cooling_max << "\n"
       << "dim_jitter: " << spec.dim_jitter << "\n"
       << "warmup: " << (spec.warmup < 0 ? base.ny : spec.warmup) << "\n"
       << "stride: " << spec.stride << "\n"
       << "frames_per_episode: " << spec.frames_per_episode << "\n";
  if (!meta) throw IoError("generate_dataset: write failed on " + meta_path);
}

}  // namespace pastille
