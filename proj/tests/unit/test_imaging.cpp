#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "pastille/errors.hpp"
#include "pastille/imaging.hpp"

using namespace pastille;
using Catch::Approx;

namespace {

ProcessConfig tiny_config() {
  ProcessConfig c;
  c.nx = 13;
  c.ny = 31;
  c.nozzles_per_row = 3;
  c.cooling = CoolingConfig::uniform_bands(c.nx, c.ny, 2);
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

DatasetSpec quick_spec() {
  DatasetSpec s;
  s.frames_per_episode = 4;
  s.stride = 2;
  return s;
}

}  // namespace

TEST_CASE("render normalizes over the frame range", "[imaging]") {
  ThermalField f(4, 5, 1, 1, 1, 72);
  f.at(1, 1) = 212;
  f.at(2, 1) = 142;
  f.at(1, 2) = 300;
  auto px = render_frame(f);
  REQUIRE(px.size() == 20);
  CHECK(px[0] == 0.0f);
  CHECK(px[1 * 4 + 1] == 1.0f);
  CHECK(px[1 * 4 + 2] == Approx(0.5));
  CHECK(px[2 * 4 + 1] == 1.0f);
  CHECK_THROWS_AS(render_frame(f, 100, 100), InvalidParameter);
}

TEST_CASE("render is monotone", "[imaging][property]") {
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> U(0, 300);
  for (int t = 0; t < 200; ++t) {
    const double a = U(rng), b = U(rng);
    ThermalField f(3, 3, 1, 1, 1, 72, std::vector<double>(9, 0.0));
    ThermalField g = f;
    f.at(1, 1) = std::min(a, b);
    g.at(1, 1) = std::max(a, b);
    CHECK(render_frame(f)[4] <= render_frame(g)[4]);
  }
}

TEST_CASE("resampled render keeps the camera dims", "[imaging]") {
  ThermalField f(10, 20, 1, 1, 1, 72);
  f.at(5, 10) = 212;
  auto px = render_frame(f, 72, 212, 40, 20);
  REQUIRE(px.size() == 800);
  CHECK(px[20 * 20 + 10] == 1.0f);
}

TEST_CASE("leading row temperature", "[imaging]") {
  ProcessConfig c = tiny_config();
  c.alpha = 0;
  c.cooling.intensity = 0;
  ProcessState s(c, ClogModel::uniform(3, 0.0), 1);
  CHECK_THROWS_AS(leading_row_temp(s), NoLeadingRow);
  s.clog().force_clog(1, 1);
  simulate_step(s, 0.0);
  REQUIRE(s.leading_row() != nullptr);
  const int cell = s.leading_row()->cell;
  s.field().at(c.nozzle_column(0), cell) = 90;
  s.field().at(c.nozzle_column(1), cell) = 1000;  // clogged: ignored
  s.field().at(c.nozzle_column(2), cell) = 110;
  CHECK(leading_row_temp(s) == Approx(100));
  s.field().at(c.nozzle_column(0), cell) = 100;
  s.field().at(c.nozzle_column(2), cell) = 100;
  CHECK(leading_row_temp(s) == 100);
}

TEST_CASE("dataset round trip", "[imaging]") {
  const std::string path = "roundtrip_test.pastset";
  std::vector<Frame> frames;
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> U(0, 1);
  for (int k = 0; k < 100; ++k) {
    Frame f;
    f.ny = 7;
    f.nx = 5;
    f.pixels.resize(35);
    for (auto& p : f.pixels) p = U(rng);
    f.leading_temp = 80 + k;
    f.flow_rate = 0.1f * k;
    f.episode = k / 10;
    f.step = 1000 + k;
    frames.push_back(f);
  }
  write_dataset(path, frames);
  CHECK(std::filesystem::file_size(path) == 28 + 100 * (37 * 4 + 8));
  auto back = read_dataset(path);
  REQUIRE(back.size() == frames.size());
  for (std::size_t k = 0; k < frames.size(); ++k) {
    CHECK(back[k].pixels == frames[k].pixels);
    CHECK(back[k].leading_temp == frames[k].leading_temp);
    CHECK(back[k].flow_rate == frames[k].flow_rate);
    CHECK(back[k].episode == frames[k].episode);
    CHECK(back[k].step == frames[k].step);
  }
  DatasetReader r(path);
  CHECK(r.read(42).step == 1042);
  Frame next;
  REQUIRE(r.next(next));
  CHECK(next.step == 1043);
  std::filesystem::remove(path);
}

TEST_CASE("dataset format errors", "[imaging]") {
  const std::string path = "corrupt_test.pastset";
  Frame f;
  f.ny = 3;
  f.nx = 2;
  f.pixels.assign(6, 0.25f);
  write_dataset(path, {f, f, f});
  const std::string good = slurp(path);

  {
    std::string bad = good;
    bad[0] = 'X';
    std::ofstream(path, std::ios::binary) << bad;
    try {
      DatasetReader r(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
      CHECK(e.record() == -1);
    }
  }
  {
    std::ofstream(path, std::ios::binary) << good.substr(0, good.size() - 5);
    try {
      read_dataset(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.record() == 2);
      CHECK(std::string(e.what()).find("record 2") != std::string::npos);
      CHECK(e.offset() == 28 + 2 * 40);
    }
  }
  {
    std::ofstream(path, std::ios::binary) << good + "xx";
    CHECK_THROWS_AS(DatasetReader(path), FormatError);
  }
  CHECK_THROWS_AS(DatasetReader("no/such/file.pastset"), IoError);
  CHECK_THROWS_AS(DatasetWriter("no/such/dir/out.pastset", 3, 2), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("generated labels match the generating state", "[imaging]") {
  ProcessConfig c = tiny_config();
  DatasetSpec spec = quick_spec();
  spec.frames_per_episode = 10;
  int checked = 0;
  auto hook = [&](const ProcessState& s, const Frame& f) {
    // brute force: leader by scanning all rows, mean over its occupied nozzles
    const PastilleRow* lead = nullptr;
    long theta = 0;
    for (const auto& row : s.rows()) {
      int pop = 0;
      for (bool b : row.mask) pop += b;
      theta += pop;
      if (pop > 0 && (!lead || row.j > lead->j)) lead = &row;
    }
    REQUIRE(lead);
    double sum = 0;
    int n = 0;
    for (int k = 0; k < 3; ++k) {
      if (lead->mask[k]) {
        sum += s.field().at(s.config().nozzle_column(k), lead->cell);
        ++n;
      }
    }
    CHECK(f.leading_temp == static_cast<float>(sum / n));
    CHECK(f.leading_temp >= kFrameTempLo);
    CHECK(f.leading_temp <= kFrameTempHi);
    CHECK(f.flow_rate >= 0);
    // speed is not part of the state; recover it from the label instead
    if (theta > 0) CHECK(f.flow_rate / theta * c.length_y() > 0);
    ++checked;
  };
  generate_episode(c, spec, 0, 11, 10, hook);
  CHECK(checked == 10);
}

TEST_CASE("dataset generation is deterministic across job counts", "[imaging]") {
  ProcessConfig c = tiny_config();
  DatasetSpec spec = quick_spec();
  generate_dataset(c, spec, 10, 7, "gen_a.pastset", 1);
  generate_dataset(c, spec, 10, 7, "gen_b.pastset", 1);
  generate_dataset(c, spec, 10, 7, "gen_c.pastset", 3);
  const auto a = slurp("gen_a.pastset");
  CHECK(a == slurp("gen_b.pastset"));
  CHECK(a == slurp("gen_c.pastset"));
  CHECK(DatasetReader("gen_a.pastset").header().count == 10);
  CHECK(std::filesystem::exists("gen_a.pastset.meta"));
  for (auto p : {"gen_a.pastset", "gen_b.pastset", "gen_c.pastset"}) {
    std::filesystem::remove(p);
    std::filesystem::remove(std::string(p) + ".meta");
  }
  CHECK_THROWS_AS(generate_dataset(c, spec, 0, 7, "never.pastset"), InvalidParameter);
}

TEST_CASE("dimension jitter still yields fixed frames", "[imaging]") {
  ProcessConfig c = tiny_config();
  DatasetSpec spec = quick_spec();
  spec.dim_jitter = 0.2;
  auto frames = generate_episode(c, spec, 0, 3, 4);
  for (auto& f : frames) {
    CHECK(f.ny == c.ny);
    CHECK(f.nx == c.nx);
    CHECK(f.pixels.size() == static_cast<std::size_t>(c.ny * c.nx));
  }
}
