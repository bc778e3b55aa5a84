#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

// A belt short enough that full-length runs take a fraction of a second.
const char* kSmallConfig = R"(# small belt for command tests
process.ny: 81
cooling.rows: 3
objective.steps: 100
train.max_epochs: 2
train.patience: 2
train.width: 4
train.batch_size: 8
dataset.frames_per_episode: 10
dataset.warmup: 81
)";

struct Sandbox {
  fs::path dir;
  Sandbox() {
    dir = fs::temp_directory_path() /
          ("pastille_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "small.conf") << kSmallConfig;
  }
  ~Sandbox() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
  static int& counter() {
    static int n = 0;
    return n;
  }
};

struct Result {
  int code = -1;
  std::string err;
};

// Runs the CLI with `args`; stdout is discarded unless redirected in args.
Result run(const Sandbox& box, const std::string& args) {
  const std::string err = box / "stderr.txt";
  const std::string cmd = std::string(PASTILLE_CLI) + " " + args + " 2>" + err +
                          (args.find('>') == std::string::npos ? " >/dev/null" : "");
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err);
  r.err.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const std::string& path) {
  std::vector<std::string> out;
  std::ifstream in(path);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("simulate", "[cli]") {
  Sandbox box;
  const std::string conf = "--config " + (box / "small.conf");

  SECTION("zero steps writes the header only") {
    REQUIRE(run(box, "simulate " + conf + " --steps 0 --out " + (box / "a.csv")).code == 0);
    CHECK(lines(box / "a.csv") ==
          std::vector<std::string>{"step,speed,theta,flow_rate,leading_row_temp,exited"});
  }
  SECTION("same seed, same file") {
    REQUIRE(run(box, "simulate " + conf + " --steps 120 --seed 5 --out " + (box / "a.csv")).code == 0);
    REQUIRE(run(box, "simulate " + conf + " --steps 120 --seed 5 --out " + (box / "b.csv")).code == 0);
    REQUIRE(run(box, "simulate " + conf + " --steps 120 --seed 6 --out " + (box / "c.csv")).code == 0);
    CHECK(lines(box / "a.csv").size() == 121);
    CHECK(slurp(box / "a.csv") == slurp(box / "b.csv"));
    CHECK(slurp(box / "a.csv") != slurp(box / "c.csv"));
  }
  SECTION("stdout output") {
    REQUIRE(run(box, "simulate " + conf + " --steps 3 --out - > " + (box / "o.csv")).code == 0);
    CHECK(lines(box / "o.csv").size() == 4);
  }
  SECTION("config problems exit 2 with a diagnostic") {
    const Result missing = run(box, "simulate --config " + (box / "nope.conf"));
    CHECK(missing.code == 2);
    CHECK(missing.err.find("nope.conf") != std::string::npos);

    std::ofstream(box / "bad.conf") << "process.ny: 81\nprocess.wobble: 3\n";
    const Result bad = run(box, "simulate --config " + (box / "bad.conf"));
    CHECK(bad.code == 2);
    CHECK(bad.err.find("process.wobble") != std::string::npos);
    CHECK(bad.err.find("2") != std::string::npos);
    CHECK_FALSE(fs::exists(box / "traj.csv"));
  }
  SECTION("usage errors exit 2") {
    CHECK(run(box, "").code == 2);
    CHECK(run(box, "simulate --steps -1").code == 2);
    CHECK(run(box, "simulate --steps x").code == 2);
    CHECK(run(box, "launch").code == 2);
  }
}

TEST_CASE("gen-dataset, train, cv and saliency", "[cli]") {
  Sandbox box;
  const std::string conf = "--config " + (box / "small.conf");
  REQUIRE(run(box, "gen-dataset " + conf + " --frames 40 --seed 7 --out " + (box / "a.pastset")).code == 0);

  SECTION("datasets are byte-identical across runs and job counts") {
    REQUIRE(run(box, "gen-dataset " + conf + " --frames 40 --seed 7 --out " + (box / "b.pastset")).code == 0);
    REQUIRE(run(box, "gen-dataset " + conf + " --frames 40 --seed 7 --jobs 3 --out " +
                         (box / "c.pastset")).code == 0);
    const std::string a = slurp(box / "a.pastset");
    CHECK(a.size() == 28 + 40 * (81 * 65 * 4 + 16));
    CHECK(a == slurp(box / "b.pastset"));
    CHECK(a == slurp(box / "c.pastset"));
    CHECK(run(box, "gen-dataset --frames -1 --out " + (box / "d.pastset")).code == 2);
  }

  SECTION("train, saliency and cv") {
    const std::string model = box / "m.panet";
    REQUIRE(run(box, "train " + conf + " --data " + (box / "a.pastset") + " --arch 1d --out " + model +
                         " --history " + (box / "h.csv")).code == 0);
    CHECK(fs::file_size(model) > 0);
    CHECK(lines(box / "h.csv").size() >= 2);
    CHECK(run(box, "train " + conf + " --data " + (box / "a.pastset") + " --arch 3d --out " +
                       (box / "x.panet")).code == 2);
    CHECK(run(box, "train " + conf + " --data " + (box / "none.pastset") + " --out " +
                       (box / "x.panet")).code == 2);

    REQUIRE(run(box, "saliency --model " + model + " --data " + (box / "a.pastset") +
                         " --index 3 --M 5 --sigma 0.001 --out " + (box / "s.csv")).code == 0);
    const auto rows = lines(box / "s.csv");
    REQUIRE(rows.size() == 81);
    double lo = 1e9, hi = -1e9;
    for (const auto& r : rows) {
      std::stringstream ss(r);
      int cols = 0;
      for (std::string v; std::getline(ss, v, ',');) {
        const double x = std::stod(v);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        ++cols;
      }
      CHECK(cols == 65);
    }
    // normalised to [0, 1]; a net this small may also be flat (all zero)
    CHECK(lo == 0.0);
    CHECK((hi == 1.0 || hi == 0.0));
    CHECK(run(box, "saliency --model " + (box / "none.panet") + " --data " + (box / "a.pastset") +
                       " --out " + (box / "s2.csv")).code == 2);

    REQUIRE(run(box, "cv " + conf + " --data " + (box / "a.pastset") +
                         " --batch 8 --lr 0.001 --width 4 --out " + (box / "cv.csv")).code == 0);
    const auto cv = lines(box / "cv.csv");
    REQUIRE(cv.size() == 1 + 5 + 1);
    CHECK(cv[6].rfind("summary,", 0) == 0);
    CHECK(run(box, "cv " + conf + " --data " + (box / "a.pastset") + " --arch x --out " +
                       (box / "cv2.csv")).code == 2);
  }
}

TEST_CASE("closed-loop, tune and surface", "[cli]") {
  Sandbox box;
  const std::string conf = "--config " + (box / "small.conf");

  SECTION("closed loop at the usual setpoints stays within the speed range") {
    for (const char* sp : {"82", "86", "90"}) {
      REQUIRE(run(box, "closed-loop " + conf + " --setpoint " + sp + " --steps 150 --out " +
                           (box / "t.csv")).code == 0);
      const auto rows = lines(box / "t.csv");
      REQUIRE(rows.size() == 151);
      CHECK(rows[0] == "step,u_true,u_pred,error,speed,flow_rate");
      for (std::size_t i = 1; i < rows.size(); ++i) {
        std::stringstream ss(rows[i]);
        std::vector<std::string> f;
        for (std::string v; std::getline(ss, v, ',');) f.push_back(v);
        REQUIRE(f.size() == 6);
        const double speed = std::stod(f[4]);
        CHECK(speed >= 2.0);
        CHECK(speed <= 12.0);
      }
    }
    CHECK(run(box, "closed-loop " + conf + " --gains 1,2 --out " + (box / "t.csv")).code == 2);
    CHECK(run(box, "closed-loop " + conf + " --sensor " + (box / "none.panet") + " --out " +
                       (box / "t.csv")).code == 2);
  }

  SECTION("tune history has one row per evaluation") {
    REQUIRE(run(box, "tune " + conf + " --budget 30 --seed 3 --out " + (box / "h.csv")).code == 0);
    const auto rows = lines(box / "h.csv");
    CHECK(rows.size() == 31);
    CHECK(rows[0] == "iter,partition,K_P,tau_I,tau_D,J,incumbent_J");
    CHECK(run(box, "tune " + conf + " --budget 0 --out " + (box / "h.csv")).code == 2);
  }

  SECTION("surface covers the grid") {
    REQUIRE(run(box, "surface " + conf + " --grid 32x32 --out " + (box / "s.csv")).code == 0);
    const auto rows = lines(box / "s.csv");
    CHECK(rows.size() == 1 + 32 * 32);
    CHECK(rows[0] == "K_P,tau_I,tau_D,J");
    CHECK(rows[1].find(",0.0234,") != std::string::npos);
    CHECK(run(box, "surface " + conf + " --grid 32by32 --out " + (box / "s.csv")).code == 2);
  }
}
