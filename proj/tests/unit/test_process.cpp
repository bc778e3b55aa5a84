#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

#include "pastille/errors.hpp"
#include "pastille/process.hpp"

using namespace pastille;
using Catch::Approx;

namespace {

ProcessConfig small_config() {
  ProcessConfig c;
  c.nx = 17;
  c.ny = 41;
  c.nozzles_per_row = 4;
  c.cooling = CoolingConfig::uniform_bands(c.nx, c.ny, 2);
  return c;
}

}  // namespace

TEST_CASE("clog probability follows the scaled temperature", "[process]") {
  CHECK(clog_probability(212, 72, 212) == 0.0);
  CHECK(clog_probability(72, 72, 212) == 1.0);
  CHECK(clog_probability(142, 72, 212) == Approx(0.5));
  CHECK(clog_probability(500, 72, 212) == 0.0);
  CHECK_THROWS_AS(clog_probability(100, 72, 72), InvalidParameter);
}

TEST_CASE("deposit masks at the propensity extremes", "[process]") {
  Rng rng(1);
  auto never = ClogModel::uniform(12, 0.0);
  auto always = ClogModel::uniform(12, 1.0);
  for (int s = 0; s < 20; ++s) {
    for (bool b : sample_deposit_mask(never, rng)) CHECK(b);
    for (bool b : sample_deposit_mask(always, rng)) CHECK_FALSE(b);
  }
}

TEST_CASE("clog frequency matches the propensity", "[process]") {
  Rng rng(2024);
  auto m = ClogModel::uniform(1, 0.3, 1.0);
  int clogged = 0;
  for (int s = 0; s < 10000; ++s) clogged += sample_deposit_mask(m, rng)[0] ? 0 : 1;
  CHECK(std::abs(clogged / 10000.0 - 0.3) <= 0.02);
}

TEST_CASE("clog persistence has the configured mean", "[process]") {
  Rng rng(9);
  auto m = ClogModel::uniform(1, 0.05, 4.0);
  long runs = 0, blocked = 0;
  bool prev = true;
  for (int s = 0; s < 200000; ++s) {
    const bool open = sample_deposit_mask(m, rng)[0];
    if (!open) {
      ++blocked;
      if (prev) ++runs;
    }
    prev = open;
  }
  // Back-to-back clogs merge runs, so the observed mean sits slightly above 4.
  CHECK(static_cast<double>(blocked) / runs == Approx(4.0).epsilon(0.08));
}

TEST_CASE("forced clogs block exactly the requested events", "[process]") {
  Rng rng(3);
  auto m = ClogModel::uniform(5, 0.0);
  m.force_clog(3, 20);
  for (int e = 0; e < 20; ++e) CHECK_FALSE(sample_deposit_mask(m, rng)[3]);
  CHECK(sample_deposit_mask(m, rng)[3]);
  CHECK_THROWS_AS(m.force_clog(5, 1), InvalidParameter);
}

TEST_CASE("default clog prior is heterogeneous and bounded", "[process]") {
  Rng rng(4);
  auto m = ClogModel::sample(12, rng);
  double lo = 1, hi = 0;
  for (double p : m.propensity) {
    CHECK(p >= 0.0);
    CHECK(p <= 0.5);
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  CHECK(hi > lo);
}

TEST_CASE("empirical clog table", "[process]") {
  const std::string path = "clog_table_test.txt";
  {
    std::ofstream out(path);
    out << "# per nozzle\n0.1\n0.2  # second\n\n0.3\n";
  }
  auto m = ClogModel::from_table(path, 3);
  CHECK(m.propensity == std::vector<double>{0.1, 0.2, 0.3});
  CHECK_THROWS_AS(ClogModel::from_table(path, 4), ConfigError);
  {
    std::ofstream out(path);
    out << "0.1\n1.5\n";
  }
  try {
    ClogModel::from_table(path, 2);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(ClogModel::from_table("does/not/exist.txt", 3), IoError);
  std::remove(path.c_str());
}

TEST_CASE("nozzle centres are evenly spaced", "[process]") {
  ProcessConfig c;
  c.nozzles_per_row = 5;
  const double expected[] = {6.5, 19.5, 32.5, 45.5, 58.5};
  for (int k = 0; k < 5; ++k) CHECK(c.nozzle_position(k) == Approx(expected[k]));
  CHECK(c.nozzle_column(0) == 6);
}

TEST_CASE("deposition period", "[process]") {
  ProcessConfig c;
  CHECK(c.deposition_period() == 1);
  c.shell_speed = 2 * 3.141592653589793 / 48;
  CHECK(c.deposition_period() == 3);
  c.shell_speed = 100;
  CHECK(c.deposition_period() == 1);
}

TEST_CASE("deposit row", "[process]") {
  ProcessConfig c = small_config();
  ThermalField f(c.nx, c.ny, c.alpha, 1, 1, c.u_inf);
  std::vector<PastilleRow> rows;
  deposit_row(f, rows, std::vector<bool>(4, false), c, 0);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].popcount() == 0);
  for (double v : f.values()) CHECK(v == c.u_inf);
  deposit_row(f, rows, std::vector<bool>(4, true), c, 1);
  int hot = 0;
  for (double v : f.values()) hot += v == c.deposit_temp;
  CHECK(hot == 4);
  CHECK(rows.back().j == 0.0);
  CHECK(rows.back().deposit_step == 1);

  c.pastille_footprint = 1;
  ThermalField g(c.nx, c.ny, c.alpha, 1, 1, c.u_inf);
  deposit_row(g, rows, {true, false, false, false}, c, 2);
  hot = 0;
  for (double v : g.values()) hot += v == c.deposit_temp;
  CHECK(hot == 5);
}

TEST_CASE("advance rows", "[process]") {
  std::vector<PastilleRow> rows{{{true}, 10.0, 0, 0}};
  CHECK(advance_rows(rows, 2, 1, 1, 637) == 0);
  CHECK(rows[0].j == 12.0);
  CHECK(advance_rows(rows, 0, 1, 1, 637) == 0);
  CHECK(rows[0].j == 12.0);
  rows[0].j = 636.5;
  CHECK(advance_rows(rows, 1, 1, 1, 637) == 1);
  CHECK(rows.empty());
  CHECK_THROWS_AS(advance_rows(rows, -1, 1, 1, 637), InvalidParameter);
}

TEST_CASE("flow rate", "[process]") {
  CHECK(flow_rate(0, 637, 5) == 0.0);
  CHECK(flow_rate(100, 637, 6.37) == Approx(1.0));
  CHECK_THROWS_AS(flow_rate(1, 0, 1), InvalidParameter);
}

TEST_CASE("fully clogged episode never heats the belt", "[process]") {
  ProcessConfig c = small_config();
  c.cooling.water_temp = c.u_inf;  // otherwise the jets themselves are a source
  ProcessState s(c, ClogModel::uniform(4, 1.0), 1);
  for (int n = 0; n < 60; ++n) {
    auto r = simulate_step(s, 3.0);
    CHECK(r.theta == 0);
    CHECK_FALSE(r.leading_row_temp.has_value());
  }
  for (double v : s.field().values()) CHECK(v == Approx(c.u_inf).margin(1e-8));

  ProcessState warm(small_config(), ClogModel::uniform(4, 1.0), 1);
  for (int n = 0; n < 60; ++n) simulate_step(warm, 3.0);
  for (double v : warm.field().values()) {
    CHECK(v >= c.u_inf);
    CHECK(v <= small_config().cooling.water_temp + 1e-9);
  }
}

TEST_CASE("a row rides the belt at the commanded speed", "[process]") {
  ProcessConfig c = small_config();
  c.cooling.water_temp = c.u_inf;
  c.shell_speed = 1e-3;  // one deposition at step 0, then none for a long time
  ProcessState s(c, ClogModel::uniform(4, 0.0), 1);
  for (int n = 1; n <= 20; ++n) {
    simulate_step(s, 1.0);
    REQUIRE(s.rows().size() == 1);
    CHECK(s.leading_row()->j == Approx(n));
    const int cell = s.leading_row()->cell;
    // imprint is the hottest spot of the nozzle column
    double best = -1;
    int where = -1;
    for (int j = 1; j < c.ny - 1; ++j) {
      if (s.field().at(c.nozzle_column(0), j) > best) {
        best = s.field().at(c.nozzle_column(0), j);
        where = j;
      }
    }
    CHECK(where == cell);
  }
}

TEST_CASE("simulation invariants", "[process][property]") {
  ProcessConfig c = small_config();
  Rng pick(77);
  for (int trial = 0; trial < 4; ++trial) {
    ProcessState s(c, 100 + trial);
    std::uniform_real_distribution<double> sp(2, 12);
    long deposited = 0, exited = 0;
    const PastilleRow* prev_lead = nullptr;
    long prev_lead_step = -1;
    for (int n = 0; n < 150; ++n) {
      const long before = s.theta();
      auto r = simulate_step(s, sp(pick));
      deposited = s.deposited_total();
      exited += r.exited_pastilles;
      CHECK(r.theta == deposited - exited);
      CHECK(r.theta == before + s.rows().back().popcount() - r.exited_pastilles);
      double lo = std::min(c.cooling.water_temp, c.u_inf), hi = c.deposit_temp;
      for (double v : s.field().values()) {
        CHECK(v >= lo - 1e-9);
        CHECK(v <= hi + 1e-9);
      }
      for (auto& row : s.rows()) {
        CHECK(row.j >= 0);
        CHECK(row.j <= c.ny);
      }
      auto* lead = s.leading_row();
      if (lead) {
        for (auto& row : s.rows()) {
          if (row.popcount() > 0) CHECK(row.j <= lead->j);
        }
        if (prev_lead && r.exited == 0) CHECK(lead->deposit_step == prev_lead_step);
        prev_lead_step = lead->deposit_step;
      }
      prev_lead = lead;
    }
  }
}

TEST_CASE("replay is bit identical", "[process]") {
  ProcessConfig c = small_config();
  auto run = [&] {
    ProcessState s(c, 42);
    std::ostringstream os;
    write_report_header(os);
    for (int n = 0; n < 80; ++n) write_report_row(os, simulate_step(s, 2.0 + 0.1 * n));
    return os.str();
  };
  CHECK(run() == run());
}

TEST_CASE("first exit step is recorded", "[process]") {
  ProcessConfig c = small_config();
  ProcessState s(c, ClogModel::uniform(4, 0.0), 5);
  for (int n = 0; n < 30; ++n) simulate_step(s, 2.0);
  REQUIRE(s.first_exit_step().has_value());
  // row deposited in cell 1 at step 0 needs to travel past cell ny-2
  CHECK(*s.first_exit_step() == (c.ny - 2) / 2);
}

TEST_CASE("invalid process settings are rejected", "[process]") {
  ProcessConfig c = small_config();
  c.deposit_temp = 60;
  CHECK_THROWS_AS(ProcessState(c, 1), InvalidParameter);
  c = small_config();
  CHECK_THROWS_AS(ProcessState(c, ClogModel::uniform(3, 0.1), 1), InvalidParameter);
  ProcessState s(small_config(), 1);
  CHECK_THROWS_AS(simulate_step(s, -1), InvalidParameter);
}

TEST_CASE("mirroring the clog pattern mirrors the belt", "[process][property]") {
  // Training flips frames across the belt width and keeps the labels, which
  // is only sound if the nozzle and jet layouts are symmetric.
  const ProcessConfig c = small_config();
  for (int k = 0; k < c.nozzles_per_row; ++k) {
    CHECK(c.nozzle_column(k) == c.nx - 1 - c.nozzle_column(c.nozzles_per_row - 1 - k));
  }
  ClogModel left = ClogModel::uniform(4, 0.0);
  left.propensity = {1.0, 0.0, 1.0, 0.0};
  ClogModel right = left;
  right.propensity = {0.0, 1.0, 0.0, 1.0};
  ProcessState a(c, left, 3), b(c, right, 3);
  for (int n = 0; n < 50; ++n) {
    const double v = 1.5 + 0.05 * n;
    const auto ra = simulate_step(a, v);
    const auto rb = simulate_step(b, v);
    REQUIRE(ra.theta == rb.theta);
    CHECK(ra.flow_rate == rb.flow_rate);
  }
  for (int j = 0; j < c.ny; ++j) {
    for (int i = 0; i < c.nx; ++i) {
      CHECK(a.field().at(i, j) == Approx(b.field().at(c.nx - 1 - i, j)).margin(1e-6));
    }
  }
}
