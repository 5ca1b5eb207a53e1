#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "spotkit/facegraph.hpp"

namespace testsupport {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("spotkit_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// Flow from an analytic per-frame displacement d(t, x, y):
/// flow(a, b) = d(b) − d(a).
class AnalyticFlow final : public spotkit::facegraph::FlowProvider {
 public:
  using Displacement = std::function<spotkit::facegraph::Vec2(long, int, int)>;

  AnalyticFlow(int w, int h, Displacement d) : w_(w), h_(h), d_(std::move(d)) {}

  int frame_width() const override { return w_; }
  int frame_height() const override { return h_; }
  spotkit::facegraph::FlowField flow(const std::string&, std::size_t a, std::size_t b) const override {
    spotkit::facegraph::FlowField f(w_, h_);
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) {
        const auto pa = d_(static_cast<long>(a), x, y), pb = d_(static_cast<long>(b), x, y);
        f.u[f.index(x, y)] = pb.u - pa.u;
        f.v[f.index(x, y)] = pb.v - pa.v;
      }
    return f;
  }
  spotkit::facegraph::FlowField flow_region(const std::string&, std::size_t a, std::size_t b,
                                            const spotkit::facegraph::Rect& r) const override {
    spotkit::facegraph::FlowField f(r.width, r.height, r.x, r.y);
    for (int y = r.y; y < r.y + r.height; ++y)
      for (int x = r.x; x < r.x + r.width; ++x) {
        const auto pa = d_(static_cast<long>(a), x, y), pb = d_(static_cast<long>(b), x, y);
        f.u[f.index(x, y)] = pb.u - pa.u;
        f.v[f.index(x, y)] = pb.v - pa.v;
      }
    return f;
  }

 private:
  int w_, h_;
  Displacement d_;
};

}  // namespace testsupport
