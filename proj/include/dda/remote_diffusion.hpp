#pragma once

// HTTP client for an externally hosted diffusion service, plus a handler that
// exposes any local backend over the same protocol.
//
// POST <path>  {"image": b64, "shape": [C,H,W], "steps": n, "guidance_scale": g,
//               "seed": s, "intensity": x}
//   -> 200     {"image": b64, "backend_version": "..."}
// Images travel as little-endian float64 in C,H,W order, base64 encoded.

// Eigen-based headers go first: <resolv.h>, pulled in by httplib, defines a
// `_res` macro that collides with Eigen parameter names.
#include "dda/diffusion.hpp"
#include "dda/log.hpp"

#include <httplib.h>

#include <boost/beast/core/detail/base64.hpp>
#include <nlohmann/json.hpp>

#include <bit>
#include <chrono>
#include <cstring>
#include <future>
#include <mutex>
#include <regex>
#include <thread>

namespace dda {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

inline std::string encode_pixels(const Tensor& t) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(t.size() * sizeof(double)), '\0');
  out.resize(b64::encode(out.data(), t.ptr(), t.size() * sizeof(double)));
  return out;
}

inline Tensor decode_pixels(const std::string& text, const Shape& shape) {
  namespace b64 = boost::beast::detail::base64;
  std::string raw(b64::decoded_size(text.size()), '\0');
  const auto [written, read] = b64::decode(raw.data(), text.data(), text.size());
  if (text.find_first_not_of('=', read) != std::string::npos) throw FormatError("image payload is not valid base64");
  Tensor t(shape);
  if (written != t.size() * sizeof(double)) throw FormatError("image payload has the wrong byte length");
  std::memcpy(t.ptr(), raw.data(), written);
  return t;
}

struct RemoteDiffusionConfig {
  std::string endpoint;  // http://host:port/path
  std::size_t steps = 50;
  double guidance_scale = 0.5;
  std::size_t timeout_ms = 30000;
  std::size_t attempts = 3;
  std::size_t backoff_ms = 200;  // doubled after every failed attempt
  std::size_t max_in_flight = 4;
};

class RemoteDiffusion final : public DiffusionBackend {
 public:
  explicit RemoteDiffusion(RemoteDiffusionConfig cfg) : cfg_(std::move(cfg)) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.endpoint, m, re)) throw Error("remote endpoint must look like http://host:port/path");
    base_ = m[1];
    path_ = m[2].matched ? std::string(m[2]) : "/diffuse";
    if (cfg_.attempts < 1) throw Error("remote backend needs at least one attempt");
    if (cfg_.max_in_flight < 1) throw Error("remote backend needs max_in_flight >= 1");
  }

  std::string kind() const override { return "remote"; }
  std::string version() const override {
    std::lock_guard lock(mu_);
    return server_version_.empty() ? "remote:" + cfg_.endpoint : server_version_;
  }
  std::size_t steps() const override { return cfg_.steps; }
  double guidance_scale() const override { return cfg_.guidance_scale; }
  const RemoteDiffusionConfig& config() const { return cfg_; }

  /// The service runs its own encoder; locally the latent is the image itself.
  Latent encode(const Tensor& image) const override {
    if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("encode expects a single [1,C,H,W] image");
    return {image, {image.dim(1), image.dim(2), image.dim(3)}};
  }

  Tensor generate(const Latent& latent, std::uint64_t seed, double intensity_scale) const override {
    const auto& s = latent.shape;
    const nlohmann::json req = {{"image", encode_pixels(latent.code)},
                                {"shape", {s.channels, s.height, s.width}},
                                {"steps", cfg_.steps},
                                {"guidance_scale", cfg_.guidance_scale},
                                {"seed", seed},
                                {"intensity", intensity_scale}};
    const std::string body = req.dump();
    std::string last_error;
    auto wait = std::chrono::milliseconds(cfg_.backoff_ms);
    for (std::size_t attempt = 1; attempt <= cfg_.attempts; ++attempt) {
      httplib::Client cli(base_);
      const auto to = std::chrono::milliseconds(cfg_.timeout_ms);
      cli.set_connection_timeout(to);
      cli.set_read_timeout(to);
      cli.set_write_timeout(to);
      auto res = cli.Post(path_, body, "application/json");
      if (res && res->status == 200) {
        try {
          const auto j = nlohmann::json::parse(res->body);
          Tensor out = decode_pixels(j.at("image").get<std::string>(), s.batch(1));
          std::lock_guard lock(mu_);
          server_version_ = j.value("backend_version", std::string());
          return out;
        } catch (const std::exception& e) {
          last_error = std::string("malformed response: ") + e.what();
        }
      } else if (res) {
        last_error = "HTTP " + std::to_string(res->status);
        if (res->status >= 400 && res->status < 500) break;  // the request itself is wrong; retrying will not help
      } else {
        last_error = httplib::to_string(res.error());
      }
      log::warn("diffusion request to " + cfg_.endpoint + " failed (attempt " + std::to_string(attempt) + "/" +
                std::to_string(cfg_.attempts) + "): " + last_error);
      if (attempt < cfg_.attempts) {
        std::this_thread::sleep_for(wait);
        wait *= 2;
      }
    }
    throw BackendUnavailable("diffusion endpoint " + cfg_.endpoint + " unavailable: " + last_error);
  }

  /// At most max_in_flight requests are outstanding; results keep request order.
  std::vector<Tensor> generate_batch(const std::vector<Request>& requests) const override {
    std::vector<Tensor> out(requests.size());
    std::size_t next = 0;
    std::mutex next_mu;
    auto worker = [&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(next_mu);
          if (next >= requests.size()) return;
          i = next++;
        }
        const auto& r = requests[i];
        out[i] = generate(*r.latent, r.seed, r.intensity_scale);
      }
    };
    std::vector<std::future<void>> workers;
    const std::size_t n = std::min(cfg_.max_in_flight, requests.size());
    for (std::size_t w = 0; w < n; ++w) workers.push_back(std::async(std::launch::async, worker));
    std::exception_ptr first;
    for (auto& w : workers) {
      try {
        w.get();
      } catch (...) {
        if (!first) first = std::current_exception();
        std::lock_guard lock(next_mu);
        next = requests.size();  // stop handing out work
      }
    }
    if (first) std::rethrow_exception(first);
    return out;
  }

 private:
  RemoteDiffusionConfig cfg_;
  std::string base_, path_;
  mutable std::mutex mu_;
  mutable std::string server_version_;
};

/// Serves `backend` under `path` using the wire format above.
inline void install_diffusion_endpoint(httplib::Server& server, const DiffusionBackend& backend,
                                       const std::string& path = "/diffuse") {
  server.Post(path, [&backend](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto j = nlohmann::json::parse(req.body);
      const auto shape = j.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 3) throw ShapeError("shape must be [C,H,W]");
      const Tensor image = decode_pixels(j.at("image").get<std::string>(), {1, shape[0], shape[1], shape[2]});
      const Latent latent = backend.encode(image);
      const Tensor out = backend.generate(latent, j.at("seed").get<std::uint64_t>(), j.value("intensity", 1.0));
      res.set_content(nlohmann::json{{"image", encode_pixels(out)}, {"backend_version", backend.version()}}.dump(),
                      "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    }
  });
}

}  // namespace dda
