#include "pastille/bridge.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "pastille/errors.hpp"
#include "pastille/imaging.hpp"

namespace pastille::bridge {

using json = nlohmann::json;

// ---- pixels --------------------------------------------------------------

std::string encode_pixels(const std::vector<float>& v) {
  std::vector<unsigned char> raw(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &v[i], 4);
    for (int b = 0; b < 4; ++b) raw[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  std::string out(boost::beast::detail::base64::encoded_size(raw.size()), '\0');
  out.resize(boost::beast::detail::base64::encode(out.data(), raw.data(), raw.size()));
  return out;
}

std::vector<float> decode_pixels(const std::string& b64) {
  std::vector<unsigned char> raw(boost::beast::detail::base64::decoded_size(b64.size()));
  const auto [written, read] =
      boost::beast::detail::base64::decode(raw.data(), b64.data(), b64.size());
  const std::size_t body = b64.find_last_not_of('=') + 1;
  if (b64.size() % 4 != 0 || b64.size() - body > 2 || read < body || written % 4 != 0) {
    throw FormatError("pixels: malformed base64 payload", read);
  }
  std::vector<float> v(written / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t{raw[4 * i + b]} << (8 * b);
    std::memcpy(&v[i], &bits, 4);
  }
  return v;
}

std::vector<float> downsample(const std::vector<float>& px, int ny, int nx, int factor,
                              int& out_ny, int& out_nx) {
  if (factor < 1) throw InvalidParameter("downsample: factor must be >= 1");
  out_ny = (ny + factor - 1) / factor;
  out_nx = (nx + factor - 1) / factor;
  if (factor == 1) return px;
  std::vector<float> out(static_cast<std::size_t>(out_ny) * out_nx);
  for (int r = 0; r < out_ny; ++r) {
    for (int c = 0; c < out_nx; ++c) {
      double sum = 0.0;
      int n = 0;
      for (int y = r * factor; y < std::min(ny, (r + 1) * factor); ++y) {
        for (int x = c * factor; x < std::min(nx, (c + 1) * factor); ++x) {
          sum += px[static_cast<std::size_t>(y) * nx + x];
          ++n;
        }
      }
      out[static_cast<std::size_t>(r) * out_nx + c] = static_cast<float>(sum / n);
    }
  }
  return out;
}

// ---- session -------------------------------------------------------------

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json controller_json(const ControllerConfig& c) {
  return {{"kp", c.kp}, {"tau_i", c.tau_i}, {"tau_d", c.tau_d}, {"setpoint", c.setpoint}};
}

double number(const json& cmd, const char* key) {
  if (!cmd.contains(key) || !cmd[key].is_number()) {
    throw InvalidParameter(std::string("missing numeric field '") + key + "'");
  }
  return cmd[key].get<double>();
}

long integer(const json& cmd, const char* key) {
  if (!cmd.contains(key) || !cmd[key].is_number_integer()) {
    throw InvalidParameter(std::string("missing integer field '") + key + "'");
  }
  return cmd[key].get<long>();
}

}  // namespace

Session::Session(SessionOptions opts) : opts_(std::move(opts)) {
  if (opts_.downsample < 1) throw InvalidParameter("session: downsample must be >= 1");
  if (!(opts_.tick_rate >= 0.0)) throw InvalidParameter("session: tick_rate must be >= 0");
  sensor_ = make_sensor_port(opts_.sensor, opts_.model_path);
  paused_ = opts_.paused;
  reset(opts_.seed);
}

void Session::reset(std::uint64_t seed) {
  const bool manual = loop_ ? loop_->manual() : opts_.manual;
  const double speed = loop_ ? loop_->speed() : opts_.controller.initial_speed;
  const ControllerConfig c = loop_ ? loop_->controller() : opts_.controller;
  loop_ = std::make_unique<ClosedLoop>(opts_.process, c, sensor_, seed);
  if (manual) loop_->set_manual(speed);
  has_last_ = false;
  ++run_;
}

long Session::step() const { return loop_->process().step_index(); }

json Session::handle_text(const std::string& text) {
  json cmd;
  try {
    cmd = json::parse(text);
  } catch (const json::parse_error& e) {
    return {{"type", "error"}, {"step", step()}, {"message", std::string("malformed JSON: ") + e.what()}};
  }
  return handle(cmd);
}

json Session::handle(const json& cmd) {
  std::string name;
  json reply = {{"type", "ack"}, {"step", step()}};
  try {
    if (!cmd.is_object() || cmd.value("type", "") != "cmd" || !cmd.contains("cmd") ||
        !cmd["cmd"].is_string()) {
      throw InvalidParameter("expected {\"type\": \"cmd\", \"cmd\": <name>, ...}");
    }
    name = cmd["cmd"].get<std::string>();
    reply["cmd"] = name;
    if (cmd.contains("id")) reply["id"] = cmd["id"];

    if (name == "set_mode") {
      const std::string mode = cmd.value("mode", "");
      if (mode == "manual") {
        loop_->set_manual(loop_->speed());
      } else if (mode == "auto") {
        loop_->set_manual(std::nullopt);
      } else {
        throw InvalidParameter("mode must be 'manual' or 'auto'");
      }
      reply["mode"] = mode;
    } else if (name == "set_speed") {
      if (!loop_->manual()) throw InvalidParameter("set_speed is only accepted in manual mode");
      loop_->set_manual(number(cmd, "speed"));
      reply["speed"] = loop_->speed();
    } else if (name == "set_setpoint") {
      ControllerConfig c = loop_->controller();
      c.setpoint = number(cmd, "setpoint");
      loop_->set_controller(c);
      reply["setpoint"] = c.setpoint;
    } else if (name == "set_gains") {
      ControllerConfig c = loop_->controller();
      if (cmd.contains("kp")) c.kp = number(cmd, "kp");
      if (cmd.contains("tau_i")) c.tau_i = number(cmd, "tau_i");
      if (cmd.contains("tau_d")) c.tau_d = number(cmd, "tau_d");
      loop_->set_controller(c);
      reply["controller"] = controller_json(c);
    } else if (name == "inject_clog") {
      const long nozzle = integer(cmd, "nozzle");
      const long duration = integer(cmd, "duration");
      if (nozzle < 0 || nozzle > std::numeric_limits<int>::max() || duration < 0 ||
          duration > std::numeric_limits<int>::max()) {
        throw InvalidParameter("nozzle and duration must be non-negative");
      }
      loop_->process().clog().force_clog(static_cast<int>(nozzle), static_cast<int>(duration));
      reply["nozzle"] = nozzle;
      reply["duration"] = duration;
    } else if (name == "pause") {
      paused_ = true;
    } else if (name == "resume") {
      paused_ = false;
    } else if (name == "reset") {
      std::uint64_t seed = opts_.seed;
      if (cmd.contains("seed")) {
        const json& v = cmd["seed"];
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
          throw InvalidParameter("seed must be a non-negative integer");
        }
        seed = cmd["seed"].get<std::uint64_t>();
      }
      reset(seed);
      reply["seed"] = seed;
      reply["run"] = run_;
      reply["step"] = step();
    } else {
      throw InvalidParameter("unknown command '" + name + "'");
    }
  } catch (const Error& e) {
    json err = {{"type", "error"}, {"step", step()}, {"message", e.what()}};
    if (!name.empty()) err["cmd"] = name;
    if (cmd.is_object() && cmd.contains("id")) err["id"] = cmd["id"];
    return err;
  }
  return reply;
}

bool Session::tick() {
  if (paused_) return false;
  last_ = loop_->step();
  has_last_ = true;
  return true;
}

json Session::frame_message(int factor) const {
  const auto& proc = loop_->process();
  const auto& cfg = proc.config();
  const auto full = render_frame(proc.field());
  int ny = 0, nx = 0;
  const auto px = downsample(full, cfg.ny, cfg.nx, factor, ny, nx);
  const PastilleRow* lead = proc.leading_row();
  const auto& rep = loop_->last_report();
  json f = {
      {"type", "frame"},
      {"run", run_},
      {"step", has_last_ ? last_.step : step()},
      {"mode", loop_->manual() ? "manual" : "auto"},
      {"paused", paused_},
      {"speed", has_last_ ? last_.speed : loop_->speed()},
      {"setpoint", loop_->controller().setpoint},
      {"sensor", sensor_->tag()},
      {"u_pred", has_last_ ? opt(last_.u_pred) : json(nullptr)},
      {"u_true", has_last_ ? opt(last_.u_true) : opt(proc.leading_row_temp())},
      {"error", has_last_ ? opt(last_.error) : json(nullptr)},
      {"flow_rate", has_last_ ? json(rep.flow_rate) : json(0.0)},
      {"flow_pred", has_last_ ? opt(last_.flow_pred) : json(nullptr)},
      {"theta", proc.theta()},
      {"leading_row", lead ? json(lead->cell) : json(nullptr)},
      {"ny", ny},
      {"nx", nx},
      {"downsample", factor},
      {"pixels", encode_pixels(px)},
  };
  return f;
}

json Session::hello_message(int factor) const {
  const auto& cfg = loop_->process().config();
  return {{"type", "hello"},
          {"step", step()},
          {"run", run_},
          {"ny", cfg.ny},
          {"nx", cfg.nx},
          {"downsample", factor},
          {"mode", loop_->manual() ? "manual" : "auto"},
          {"paused", paused_},
          {"tick_rate", opts_.tick_rate},
          {"sensor", sensor_->tag()},
          {"speed_bounds", {cfg.speed_min, cfg.speed_max}},
          {"controller", controller_json(loop_->controller())}};
}

// ---- server --------------------------------------------------------------

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

namespace {

// Queue lengths at which a client's pixels get coarser, and at which the
// client is dropped.
constexpr std::size_t kCoarsenAt = 4;
constexpr std::size_t kDropAt = 1024;

int factor_from_target(const std::string& target, int fallback) {
  const auto q = target.find("downsample=");
  if (q == std::string::npos) return fallback;
  try {
    const int f = std::stoi(target.substr(q + 11));
    return f >= 1 ? f : fallback;
  } catch (const std::exception&) {
    return fallback;
  }
}

}  // namespace

class Client;

struct Hub {
  explicit Hub(SessionOptions o) : session(std::move(o)) {}

  Session session;
  net::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::thread net_thread;
  std::thread sim_thread;

  std::mutex mu;
  std::condition_variable cv;
  std::vector<std::weak_ptr<Client>> clients;
  std::deque<std::pair<std::weak_ptr<Client>, std::string>> commands;
  std::atomic<bool> stopping{false};
  std::atomic<bool> finished{false};
  bool started = false;

  void accept();
  void sim_loop();
  void broadcast(const json& frameless, bool is_frame);
  void shutdown_clients();
};

class Client : public std::enable_shared_from_this<Client> {
 public:
  Client(tcp::socket socket, Hub& server, int factor)
      : ws_(std::move(socket)), server_(server), factor_(factor), base_factor_(factor) {}

  void start(http::request<http::string_body> req) {
    ws_.text(true);
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->on_open();
    });
  }

  // Called from any thread.
  void send(std::shared_ptr<const std::string> msg) {
    net::post(ws_.get_executor(), [self = shared_from_this(), msg] { self->enqueue(msg); });
  }

  void close() {
    net::post(ws_.get_executor(), [self = shared_from_this()] {
      if (self->closing_) return;
      self->closing_ = true;
      if (self->queue_.empty()) self->do_close();
    });
  }

  int factor() const { return factor_.load(); }

 private:
  void on_open() {
    {
      std::lock_guard lk(server_.mu);
      server_.clients.push_back(weak_from_this());
      json hello = server_.session.hello_message(factor_);
      enqueue(std::make_shared<const std::string>(hello.dump() + "\n"));
      if (server_.session.has_frame()) {
        enqueue(std::make_shared<const std::string>(
            server_.session.frame_message(factor_).dump() + "\n"));
      }
    }
    do_read();
  }

  void do_read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      {
        std::lock_guard lk(self->server_.mu);
        std::size_t start = 0;
        while (start < text.size()) {
          auto end = text.find('\n', start);
          if (end == std::string::npos) end = text.size();
          std::string line = text.substr(start, end - start);
          if (line.find_first_not_of(" \t\r") != std::string::npos) {
            self->server_.commands.emplace_back(self->weak_from_this(), std::move(line));
          }
          start = end + 1;
        }
      }
      self->server_.cv.notify_all();
      self->do_read();
    });
  }

  void enqueue(std::shared_ptr<const std::string> msg) {
    if (closing_) return;
    if (queue_.size() >= kDropAt) {
      closing_ = true;
      queue_.clear();
      do_close();
      return;
    }
    queue_.push_back(std::move(msg));
    if (queue_.size() > kCoarsenAt) factor_ = std::min(factor_.load() * 2, 64);
    if (!writing_) do_write();
  }

  void do_write() {
    writing_ = true;
    ws_.async_write(net::buffer(*queue_.front()),
                    [self = shared_from_this()](beast::error_code ec, std::size_t) {
                      self->writing_ = false;
                      if (ec) {
                        self->queue_.clear();
                        return;
                      }
                      self->queue_.pop_front();
                      if (self->queue_.empty()) {
                        self->factor_ = self->base_factor_;
                        if (self->closing_) {
                          self->do_close();
                          return;
                        }
                      } else {
                        self->do_write();
                      }
                    });
  }

  void do_close() {
    ws_.async_close(websocket::close_code::normal,
                    [self = shared_from_this()](beast::error_code) {});
  }

  websocket::stream<beast::tcp_stream> ws_;
  Hub& server_;
  beast::flat_buffer buffer_;
  std::deque<std::shared_ptr<const std::string>> queue_;
  bool writing_ = false;
  bool closing_ = false;
  std::atomic<int> factor_;
  int base_factor_;
};

namespace {

class HttpConn : public std::enable_shared_from_this<HttpConn> {
 public:
  HttpConn(tcp::socket socket, Hub& server)
      : stream_(std::move(socket)), server_(server) {}

  void start() {
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       if (ec) return;
                       self->route();
                     });
  }

 private:
  void route() {
    const std::string target(req_.target());
    const std::string path = target.substr(0, target.find('?'));
    if (websocket::is_upgrade(req_) && path == "/session") {
      stream_.expires_never();
      const int f = factor_from_target(target, server_.session.options().downsample);
      std::make_shared<Client>(stream_.release_socket(), server_, f)->start(std::move(req_));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(req_.version());
    res->set(http::field::content_type, "text/plain");
    if (path == "/healthz" && req_.method() == http::verb::get) {
      res->result(http::status::ok);
      res->body() = "ok";
    } else {
      res->result(http::status::not_found);
      res->body() = "not found";
    }
    res->prepare_payload();
    res->keep_alive(false);
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
      beast::error_code ec;
      self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
    });
  }

  beast::tcp_stream stream_;
  Hub& server_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace

void Hub::accept() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;  // acceptor closed
    std::make_shared<HttpConn>(std::move(socket), *this)->start();
    accept();
  });
}

void Hub::broadcast(const json& msg, bool is_frame) {
  // Caller holds `mu`.
  std::map<int, std::shared_ptr<const std::string>> by_factor;
  std::erase_if(clients, [](const auto& w) { return w.expired(); });
  for (const auto& w : clients) {
    auto c = w.lock();
    if (!c) continue;
    const int f = is_frame ? c->factor() : 0;
    auto& m = by_factor[f];
    if (!m) {
      m = std::make_shared<const std::string>(
          (is_frame ? session.frame_message(f) : msg).dump() + "\n");
    }
    c->send(m);
  }
}

void Hub::sim_loop() {
  using clock = std::chrono::steady_clock;
  const auto period =
      session.options().tick_rate > 0.0
          ? std::chrono::duration_cast<clock::duration>(
                std::chrono::duration<double>(1.0 / session.options().tick_rate))
          : clock::duration::zero();
  auto next = clock::now();
  std::unique_lock lk(mu);
  while (!stopping) {
    while (!commands.empty()) {
      auto [who, text] = std::move(commands.front());
      commands.pop_front();
      const json reply = session.handle_text(text);
      if (auto c = who.lock()) c->send(std::make_shared<const std::string>(reply.dump() + "\n"));
    }
    const auto& max = session.options().max_steps;
    if (max && session.step() >= *max) {
      broadcast({{"type", "end"}, {"step", session.step()}, {"run", session.run()}}, false);
      finished = true;
      cv.notify_all();
      break;
    }
    if (session.paused()) {
      cv.wait_for(lk, std::chrono::milliseconds(50));
      next = clock::now();
      continue;
    }
    session.tick();
    broadcast({}, true);
    if (period > clock::duration::zero()) {
      next += period;
      cv.wait_until(lk, next, [this] { return stopping.load(); });
    }
  }
}

void Hub::shutdown_clients() {
  std::lock_guard lk(mu);
  for (const auto& w : clients) {
    if (auto c = w.lock()) c->close();
  }
}

struct Server::Impl : Hub {
  using Hub::Hub;
};

Server::Server(SessionOptions opts, unsigned short port, const std::string& address)
    : impl_(std::make_unique<Impl>(std::move(opts))) {
  try {
    const tcp::endpoint ep(net::ip::make_address(address), port);
    impl_->acceptor.open(ep.protocol());
    impl_->acceptor.set_option(net::socket_base::reuse_address(true));
    impl_->acceptor.bind(ep);
    impl_->acceptor.listen();
  } catch (const boost::system::system_error& e) {
    throw Error("serve: cannot listen on " + address + ":" + std::to_string(port) + ": " +
                e.what());
  }
}

Server::~Server() { stop(); }

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

void Server::start() {
  if (impl_->started) return;
  impl_->started = true;
  impl_->accept();
  impl_->net_thread = std::thread([this] { impl_->ioc.run(); });
  impl_->sim_thread = std::thread([this] { impl_->sim_loop(); });
}

void Server::wait() {
  std::unique_lock lk(impl_->mu);
  impl_->cv.wait(lk, [this] { return impl_->stopping || impl_->finished; });
}

void Server::stop() {
  if (!impl_ || !impl_->started) return;
  impl_->stopping = true;
  impl_->cv.notify_all();
  if (impl_->sim_thread.joinable()) impl_->sim_thread.join();
  impl_->shutdown_clients();
  net::post(impl_->ioc, [this] {
    beast::error_code ec;
    impl_->acceptor.close(ec);
  });
  // Let pending writes and close handshakes drain briefly.
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  impl_->ioc.stop();
  if (impl_->net_thread.joinable()) impl_->net_thread.join();
  impl_->started = false;
}

}  // namespace pastille::bridge
