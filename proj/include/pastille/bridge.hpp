#pragma once

// Live session service: one simulation loop streamed to any number of
// websocket clients at /session, steered by JSON commands. /healthz answers
// plain "ok". The message schema is documented in docs/protocol.md.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"

#include "pastille/control.hpp"

namespace pastille::bridge {

struct SessionOptions {
  ProcessConfig process;
  ControllerConfig controller;
  std::string sensor = "oracle";
  std::string model_path;
  double tick_rate = 10.0;  // steps per second; 0 runs as fast as possible
  int downsample = 1;       // default pixel factor for clients that do not ask
  std::uint64_t seed = 0;
  bool manual = false;      // start in manual mode
  bool paused = false;      // start paused; a `resume` command starts the loop
  std::optional<long> max_steps;  // stop the loop after this many steps
};

// Commands are applied at step boundaries in arrival order.
class Session {
 public:
  explicit Session(SessionOptions opts);

  // Applies one command message; returns the `ack` or `error` reply.
  nlohmann::json handle(const nlohmann::json& cmd);
  // Parses and applies one line of text; malformed input yields `error`.
  nlohmann::json handle_text(const std::string& text);
  // Advances one step unless paused. Returns whether a step ran.
  bool tick();
  // `frame` for the most recent step (pixels block-averaged by `factor`).
  nlohmann::json frame_message(int factor) const;
  nlohmann::json hello_message(int factor) const;

  bool paused() const { return paused_; }
  bool has_frame() const { return has_last_; }
  long step() const;  // index of the next step to simulate
  int run() const { return run_; }
  const ClosedLoop& loop() const { return *loop_; }
  ClosedLoop& loop() { return *loop_; }
  const SessionOptions& options() const { return opts_; }

 private:
  void reset(std::uint64_t seed);

  SessionOptions opts_;
  std::shared_ptr<SensorPort> sensor_;
  std::unique_ptr<ClosedLoop> loop_;
  bool paused_ = false;
  int run_ = 0;
  TrajectoryPoint last_{};
  bool has_last_ = false;
};

// Base64 of little-endian f32 values.
std::string encode_pixels(const std::vector<float>& v);
std::vector<float> decode_pixels(const std::string& b64);
// Block-mean downsampling by an integer factor (edges keep partial blocks).
std::vector<float> downsample(const std::vector<float>& px, int ny, int nx, int factor,
                              int& out_ny, int& out_nx);

class Server {
 public:
  // port 0 picks a free port. Throws Error if the port is busy.
  Server(SessionOptions opts, unsigned short port, const std::string& address = "127.0.0.1");
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const;
  // Runs the simulation loop and the network on background threads.
  void start();
  // Blocks until stop() or until the loop hits max_steps and clients leave.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace pastille::bridge
