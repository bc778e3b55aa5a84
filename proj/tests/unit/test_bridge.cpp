#include <catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <thread>

#include <sys/socket.h>
#include <sys/time.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "pastille/bridge.hpp"
#include "pastille/errors.hpp"

using namespace pastille;
using namespace pastille::bridge;
using nlohmann::json;

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

namespace {

SessionOptions small_session() {
  SessionOptions o;
  o.process.ny = 161;
  o.process.cooling = CoolingConfig::uniform_bands(o.process.nx, o.process.ny, 5);
  o.seed = 4;
  return o;
}

json cmd(const std::string& name, json extra = json::object()) {
  extra["type"] = "cmd";
  extra["cmd"] = name;
  return extra;
}

// Blocking websocket client; reads give up after two seconds.
class WsClient {
 public:
  explicit WsClient(unsigned short port, const std::string& target = "/session") : ws_(ioc_) {
    tcp::resolver resolver(ioc_);
    net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    timeval tv{2, 0};
    ::setsockopt(ws_.next_layer().native_handle(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ws_.handshake("127.0.0.1", target);
    ws_.text(true);
  }

  json read() {
    buf_.consume(buf_.size());
    ws_.read(buf_);
    const std::string text = beast::buffers_to_string(buf_.data());
    REQUIRE(!text.empty());
    CHECK(text.back() == '\n');
    return json::parse(text);
  }

  // Next message of the given type, skipping others.
  json next(const std::string& type) {
    for (int i = 0; i < 1000; ++i) {
      json m = read();
      if (m["type"] == type) return m;
    }
    FAIL("no '" << type << "' message");
    return {};
  }

  void send(const std::string& text) { ws_.write(net::buffer(text)); }
  void send(const json& m) { send(m.dump() + "\n"); }

  void close() {
    beast::error_code ec;
    ws_.close(websocket::close_code::normal, ec);
  }

 private:
  net::io_context ioc_;
  websocket::stream<tcp::socket> ws_;
  beast::flat_buffer buf_;
};

std::pair<int, std::string> http_get(unsigned short port, const std::string& target) {
  net::io_context ioc;
  tcp::socket s(ioc);
  tcp::resolver resolver(ioc);
  net::connect(s, resolver.resolve("127.0.0.1", std::to_string(port)));
  http::request<http::empty_body> req(http::verb::get, target, 11);
  req.set(http::field::host, "127.0.0.1");
  http::write(s, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(s, buf, res);
  return {static_cast<int>(res.result_int()), res.body()};
}

}  // namespace

TEST_CASE("pixel encoding round-trips exactly", "[bridge]") {
  const std::vector<float> v = {0.0f, 1.0f, -2.5f, 0.1f, 3.4028235e38f, 1e-45f, 0.7f};
  CHECK(decode_pixels(encode_pixels(v)) == v);
  CHECK(encode_pixels({}).empty());
  CHECK(encode_pixels({1.0f}) == "AACAPw==");  // 0x3f800000, little-endian
  CHECK_THROWS_AS(decode_pixels("A*=="), FormatError);
}

TEST_CASE("downsample takes block means with partial edges", "[bridge]") {
  // 3 x 5 grid, values = index
  std::vector<float> px(15);
  for (int i = 0; i < 15; ++i) px[i] = static_cast<float>(i);
  int ny = 0, nx = 0;
  const auto d = downsample(px, 3, 5, 2, ny, nx);
  REQUIRE(ny == 2);
  REQUIRE(nx == 3);
  CHECK(d[0] == Catch::Approx((0 + 1 + 5 + 6) / 4.0));
  CHECK(d[2] == Catch::Approx((4 + 9) / 2.0));
  CHECK(d[3] == Catch::Approx((10 + 11) / 2.0));
  CHECK(d[5] == Catch::Approx(14.0));
  CHECK(downsample(px, 3, 5, 1, ny, nx) == px);
  CHECK_THROWS_AS(downsample(px, 3, 5, 0, ny, nx), InvalidParameter);
}

TEST_CASE("session commands and replies", "[bridge]") {
  Session s(small_session());
  CHECK(s.step() == 0);
  CHECK(s.tick());
  CHECK(s.step() == 1);

  SECTION("malformed input gives an error and the session goes on") {
    for (const std::string bad : {"{not json", "[]", R"({"type":"cmd"})",
                                  R"({"type":"cmd","cmd":"warp"})",
                                  R"({"type":"cmd","cmd":"set_setpoint"})",
                                  R"({"type":"cmd","cmd":"set_setpoint","setpoint":"hot"})"}) {
      const json r = s.handle_text(bad);
      CHECK(r["type"] == "error");
      CHECK(r["step"] == 1);
      CHECK(r["message"].is_string());
    }
    CHECK(s.tick());
    CHECK(s.step() == 2);
  }

  SECTION("set_speed needs manual mode and is range clamped") {
    CHECK(s.handle(cmd("set_speed", {{"speed", 9}}))["type"] == "error");
    CHECK(s.handle(cmd("set_mode", {{"mode", "manual"}}))["type"] == "ack");
    const json r = s.handle(cmd("set_speed", {{"speed", 15}, {"id", 7}}));
    CHECK(r["type"] == "ack");
    CHECK(r["id"] == 7);
    CHECK(r["speed"] == 12.0);
    s.tick();
    CHECK(s.frame_message(1)["speed"] == 12.0);
    s.handle(cmd("set_speed", {{"speed", -3}}));
    s.tick();
    CHECK(s.frame_message(1)["speed"] == 2.0);
    CHECK(s.handle(cmd("set_mode", {{"mode", "fast"}}))["type"] == "error");
  }

  SECTION("setpoint and gains") {
    CHECK(s.handle(cmd("set_setpoint", {{"setpoint", 85}}))["type"] == "ack");
    CHECK(s.loop().controller().setpoint == 85.0);
    s.tick();
    const json f = s.frame_message(1);
    CHECK(f["setpoint"] == 85.0);
    CHECK(f["error"].get<double>() == Catch::Approx(85.0 - f["u_pred"].get<double>()));

    const json g = s.handle(cmd("set_gains", {{"kp", 10}, {"tau_i", 4}}));
    CHECK(g["controller"]["kp"] == 10.0);
    CHECK(g["controller"]["tau_i"] == 4.0);
    CHECK(g["controller"]["tau_d"] == ControllerConfig{}.tau_d);
    CHECK(s.handle(cmd("set_gains", {{"tau_i", 0}}))["type"] == "error");
    CHECK(s.loop().controller().tau_i == 4.0);
  }

  SECTION("inject_clog empties a nozzle") {
    SessionOptions o = small_session();
    Session a(o), b(o);
    for (int k = 0; k < o.process.nozzles_per_row; ++k) {
      CHECK(b.handle(cmd("inject_clog", {{"nozzle", k}, {"duration", 1000}}))["type"] == "ack");
    }
    CHECK(b.handle(cmd("inject_clog", {{"nozzle", -1}, {"duration", 3}}))["type"] == "error");
    for (int n = 0; n < 10; ++n) {
      a.tick();
      b.tick();
    }
    CHECK(a.frame_message(1)["theta"].get<long>() > 0);
    CHECK(b.frame_message(1)["theta"] == 0);
    CHECK(b.frame_message(1)["u_pred"].is_null());
  }

  SECTION("pause, resume and reset") {
    s.handle(cmd("pause"));
    CHECK_FALSE(s.tick());
    CHECK(s.step() == 1);
    s.handle(cmd("resume"));
    CHECK(s.tick());
    const json r = s.handle(cmd("reset", {{"seed", 9}}));
    CHECK(r["run"] == 2);
    CHECK(r["step"] == 0);
    CHECK(s.step() == 0);
    CHECK_FALSE(s.has_frame());
    CHECK(s.handle(cmd("reset", {{"seed", -1}}))["type"] == "error");
  }
}

TEST_CASE("session in auto mode follows the closed-loop reference", "[bridge]") {
  const SessionOptions o = small_session();
  Session s(o);
  OracleSensor oracle;
  const Trajectory ref = run_closed_loop(o.process, oracle, o.controller, 60, o.seed);
  for (const auto& p : ref) {
    REQUIRE(s.tick());
    const json f = s.frame_message(1);
    CHECK(f["step"] == p.step);
    CHECK(f["speed"].get<double>() == p.speed);
    CHECK(f["flow_rate"].get<double>() == p.flow_rate);
    CHECK(f["u_true"].is_null() == !p.u_true.has_value());
  }
}

TEST_CASE("frame and hello messages", "[bridge]") {
  Session s(small_session());
  const json h = s.hello_message(2);
  CHECK(h["type"] == "hello");
  CHECK(h["ny"] == 161);
  CHECK(h["nx"] == 65);
  CHECK(h["mode"] == "auto");
  s.tick();
  const json f = s.frame_message(4);
  CHECK(f["type"] == "frame");
  CHECK(f["ny"] == 41);
  CHECK(f["nx"] == 17);
  CHECK(f["downsample"] == 4);
  const auto px = decode_pixels(f["pixels"].get<std::string>());
  REQUIRE(px.size() == 41u * 17u);
  for (float v : px) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("server streams frames to headless clients", "[bridge][net]") {
  SessionOptions o = small_session();
  o.tick_rate = 20.0;
  Server server(o, 0);
  server.start();
  const unsigned short port = server.port();
  REQUIRE(port != 0);

  SECTION("healthz and unknown paths") {
    CHECK(http_get(port, "/healthz") == std::pair<int, std::string>{200, "ok"});
    CHECK(http_get(port, "/other").first == 404);
  }

  SECTION("a frame arrives within two ticks") {
    WsClient c(port);
    const auto t0 = std::chrono::steady_clock::now();
    CHECK(c.read()["type"] == "hello");
    c.next("frame");
    const double waited =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(waited <= 2.0 / o.tick_rate + 0.05);
  }

  SECTION("steps are consecutive and clients see the same frames") {
    WsClient a(port), b(port);
    std::map<long, json> seen_a, seen_b;
    for (auto [c, seen] : {std::pair{&a, &seen_a}, std::pair{&b, &seen_b}}) {
      long prev = -1;
      for (int n = 0; n < 15; ++n) {
        json f = c->next("frame");
        const long step = f["step"];
        if (prev >= 0) CHECK(step == prev + 1);
        prev = step;
        (*seen)[step] = std::move(f);
      }
    }
    int shared = 0;
    for (const auto& [step, f] : seen_a) {
      auto it = seen_b.find(step);
      if (it == seen_b.end() || it->second["downsample"] != f["downsample"]) continue;
      CHECK(it->second == f);
      ++shared;
    }
    CHECK(shared > 0);
  }

  SECTION("commands are acknowledged and take effect") {
    WsClient c(port);
    c.send(std::string("this is not json\n"));
    const json err = c.next("error");
    CHECK(err["message"].get<std::string>().find("JSON") != std::string::npos);

    c.send(cmd("set_mode", {{"mode", "manual"}}));
    CHECK(c.next("ack")["cmd"] == "set_mode");
    c.send(cmd("set_speed", {{"speed", 15}}));
    const json ack = c.next("ack");
    CHECK(ack["speed"] == 12.0);
    const json f = c.next("frame");
    CHECK(f["step"].get<long>() >= ack["step"].get<long>());
    CHECK(f["speed"] == 12.0);
    CHECK(f["mode"] == "manual");
  }

  SECTION("clients may ask for coarser pixels") {
    WsClient c(port, "/session?downsample=3");
    CHECK(c.read()["downsample"] == 3);
    const json f = c.next("frame");
    CHECK(f["downsample"].get<int>() >= 3);
    CHECK(f["nx"] == (65 + f["downsample"].get<int>() - 1) / f["downsample"].get<int>());
  }
  server.stop();
}

TEST_CASE("server ends after max_steps", "[bridge][net]") {
  SessionOptions o = small_session();
  o.tick_rate = 0.0;
  o.paused = true;
  o.max_steps = 25;
  Server server(o, 0);
  server.start();
  WsClient c(server.port());
  CHECK(c.read()["type"] == "hello");
  c.send(cmd("resume"));
  long last = -1;
  for (;;) {
    const json m = c.read();
    if (m["type"] == "end") {
      CHECK(m["step"] == 25);
      break;
    }
    if (m["type"] == "frame") {
      CHECK(m["step"] == last + 1);
      last = m["step"];
    }
  }
  CHECK(last == 24);
  server.wait();
}

TEST_CASE("a busy port is reported", "[bridge][net]") {
  Server first(small_session(), 0);
  CHECK_THROWS_AS(Server(small_session(), first.port()), Error);
}
