#pragma once

// Sliding-window multi-resolution optical-flow (SW-MRO) features.
//
// For every frame i of a video the window covers frames i−⌊w/2⌋ .. i+⌊w/2⌋
// (clamped to the video). Slice s of the window holds, for each ROI, the
// mean flow between the window's first frame and its s-th frame after
// head-motion alignment by the nose-tip region. Slice 0 is always zero.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spotkit/binio.hpp"
#include "spotkit/error.hpp"
#include "spotkit/parallel.hpp"

namespace spotkit::facegraph {

struct Rect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  bool operator==(const Rect&) const = default;
  Rect translated(int dx, int dy) const { return {x + dx, y + dy, width, height}; }
};

struct Vec2 {
  double u = 0.0;
  double v = 0.0;

  bool operator==(const Vec2&) const = default;
  double norm() const { return std::hypot(u, v); }
};

enum class FacialPart : int { left_eyebrow = 0, right_eyebrow = 1, mouth = 2 };
inline constexpr std::size_t kPartCount = 3;

inline const char* to_string(FacialPart p) {
  switch (p) {
    case FacialPart::left_eyebrow: return "left_eyebrow";
    case FacialPart::right_eyebrow: return "right_eyebrow";
    case FacialPart::mouth: return "mouth";
  }
  return "?";
}

inline FacialPart parse_part(const std::string& s) {
  if (s == "left_eyebrow") return FacialPart::left_eyebrow;
  if (s == "right_eyebrow") return FacialPart::right_eyebrow;
  if (s == "mouth") return FacialPart::mouth;
  fail(ErrorKind::format, "unknown facial part '" + s + "'");
}

struct Roi {
  Rect rect;
  FacialPart part = FacialPart::mouth;
};

/// ROI layout plus the two pooling levels (ROIs → parts → whole face).
struct FacialGraphSpec {
  int frame_width = 0;
  int frame_height = 0;
  Rect nose;
  std::vector<Roi> rois;

  std::size_t roi_count() const { return rois.size(); }

  bool contains(const Rect& r) const {
    return r.width > 0 && r.height > 0 && r.x >= 0 && r.y >= 0 && r.x + r.width <= frame_width &&
           r.y + r.height <= frame_height;
  }

  std::size_t part_index(std::size_t roi) const { return static_cast<std::size_t>(rois.at(roi).part); }

  /// Members of each part, in part order; this is the 12→3 pooling map.
  std::vector<std::vector<std::size_t>> part_groups() const {
    std::vector<std::vector<std::size_t>> groups(kPartCount);
    for (std::size_t r = 0; r < rois.size(); ++r) groups[part_index(r)].push_back(r);
    return groups;
  }

  /// All parts into one node: the 3→1 pooling map.
  static std::vector<std::vector<std::size_t>> face_group() { return {{0, 1, 2}}; }

  void validate() const {
    require(frame_width > 0 && frame_height > 0, ErrorKind::config, "graph: frame size must be positive");
    require(contains(nose), ErrorKind::config, "graph: nose rectangle outside the frame");
    require(!rois.empty(), ErrorKind::config, "graph: no ROIs");
    for (std::size_t r = 0; r < rois.size(); ++r)
      require(contains(rois[r].rect), ErrorKind::config, "graph: ROI " + std::to_string(r) + " outside the frame");
    for (const auto& g : part_groups())
      require(!g.empty(), ErrorKind::config, "graph: every facial part needs at least one ROI");
  }
};

/// Default layout: 192×192 frame, 12×12 ROIs, four per eyebrow (2×2 grid)
/// and four around the mouth, nose tip region in the middle.
inline FacialGraphSpec default_graph() {
  FacialGraphSpec g;
  g.frame_width = 192;
  g.frame_height = 192;
  g.nose = {90, 92, 12, 12};
  const std::array<std::pair<int, int>, 4> left{{{28, 28}, {52, 28}, {28, 52}, {52, 52}}};
  const std::array<std::pair<int, int>, 4> right{{{128, 28}, {152, 28}, {128, 52}, {152, 52}}};
  const std::array<std::pair<int, int>, 4> mouth{{{66, 136}, {114, 136}, {78, 160}, {102, 160}}};
  for (auto [x, y] : left) g.rois.push_back({{x, y, 12, 12}, FacialPart::left_eyebrow});
  for (auto [x, y] : right) g.rois.push_back({{x, y, 12, 12}, FacialPart::right_eyebrow});
  for (auto [x, y] : mouth) g.rois.push_back({{x, y, 12, 12}, FacialPart::mouth});
  return g;
}

/// First `per_part` ROIs of each part of the default layout (R = 3·per_part).
inline FacialGraphSpec reduced_graph(std::size_t per_part) {
  require(per_part >= 1 && per_part <= 4, ErrorKind::config, "reduced_graph: per_part must be in [1, 4]");
  const FacialGraphSpec full = default_graph();
  FacialGraphSpec g = full;
  g.rois.clear();
  for (std::size_t p = 0; p < kPartCount; ++p)
    for (std::size_t k = 0; k < per_part; ++k) g.rois.push_back(full.rois[p * 4 + k]);
  return g;
}

/// Text form: "frame W H", "nose x y w h", then "roi idx x y w h part" lines.
inline std::string format_graph(const FacialGraphSpec& g) {
  std::ostringstream os;
  os << "frame " << g.frame_width << ' ' << g.frame_height << '\n';
  os << "nose " << g.nose.x << ' ' << g.nose.y << ' ' << g.nose.width << ' ' << g.nose.height << '\n';
  for (std::size_t r = 0; r < g.rois.size(); ++r) {
    const auto& roi = g.rois[r];
    os << "roi " << r << ' ' << roi.rect.x << ' ' << roi.rect.y << ' ' << roi.rect.width << ' ' << roi.rect.height
       << ' ' << to_string(roi.part) << '\n';
  }
  return os.str();
}

inline FacialGraphSpec parse_graph(const std::string& text) {
  FacialGraphSpec g;
  std::istringstream in(text);
  std::string line;
  std::map<std::size_t, Roi> rois;
  bool have_frame = false, have_nose = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    const std::string where = "graph line " + std::to_string(lineno);
    if (key == "frame") {
      require(static_cast<bool>(ls >> g.frame_width >> g.frame_height), ErrorKind::format, where + ": bad frame");
      have_frame = true;
    } else if (key == "nose") {
      require(static_cast<bool>(ls >> g.nose.x >> g.nose.y >> g.nose.width >> g.nose.height), ErrorKind::format,
              where + ": bad nose");
      have_nose = true;
    } else if (key == "roi") {
      std::size_t idx = 0;
      Roi roi;
      std::string part;
      require(static_cast<bool>(ls >> idx >> roi.rect.x >> roi.rect.y >> roi.rect.width >> roi.rect.height >> part),
              ErrorKind::format, where + ": bad roi");
      roi.part = parse_part(part);
      require(rois.emplace(idx, roi).second, ErrorKind::format, where + ": duplicate roi index");
    } else {
      fail(ErrorKind::format, where + ": unknown key '" + key + "'");
    }
  }
  require(have_frame && have_nose, ErrorKind::format, "graph: missing frame or nose line");
  std::size_t expect = 0;
  for (auto& [idx, roi] : rois) {
    require(idx == expect++, ErrorKind::format, "graph: ROI indices must be 0..R-1");
    g.rois.push_back(roi);
  }
  g.validate();
  return g;
}

inline FacialGraphSpec load_graph(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "cannot open graph spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_graph(ss.str());
}

/// Dense displacement field over a rectangular region of the frame.
/// (x0, y0) is the region's top-left pixel in frame coordinates.
struct FlowField {
  int x0 = 0;
  int y0 = 0;
  int width = 0;
  int height = 0;
  std::vector<double> u;
  std::vector<double> v;

  FlowField() = default;
  FlowField(int w, int h, int ox = 0, int oy = 0)
      : x0(ox), y0(oy), width(w), height(h), u(static_cast<std::size_t>(w) * h, 0.0), v(u.size(), 0.0) {}

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y - y0) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x - x0);
  }
  bool covers(const Rect& r) const {
    return r.x >= x0 && r.y >= y0 && r.x + r.width <= x0 + width && r.y + r.height <= y0 + height;
  }

  FlowField crop(const Rect& r) const {
    require(covers(r), ErrorKind::invalid_argument, "flow crop outside field");
    FlowField out(r.width, r.height, r.x, r.y);
    for (int y = r.y; y < r.y + r.height; ++y)
      for (int x = r.x; x < r.x + r.width; ++x) {
        out.u[out.index(x, y)] = u[index(x, y)];
        out.v[out.index(x, y)] = v[index(x, y)];
      }
    return out;
  }
};

/// Source of dense flow between two frames of a video.
/// flow(video, a, a) must be the zero field. Implementations must be safe
/// for concurrent const calls.
class FlowProvider {
 public:
  virtual ~FlowProvider() = default;

  virtual int frame_width() const = 0;
  virtual int frame_height() const = 0;
  virtual FlowField flow(const std::string& video, std::size_t ref, std::size_t target) const = 0;

  /// Flow restricted to `region`; providers that can evaluate sparsely
  /// override this.
  virtual FlowField flow_region(const std::string& video, std::size_t ref, std::size_t target,
                                const Rect& region) const {
    return flow(video, ref, target).crop(region);
  }
};

/// Adds a constant displacement to every query of another provider.
class OffsetFlowProvider final : public FlowProvider {
 public:
  OffsetFlowProvider(const FlowProvider& base, Vec2 offset) : base_(base), offset_(offset) {}

  int frame_width() const override { return base_.frame_width(); }
  int frame_height() const override { return base_.frame_height(); }
  FlowField flow(const std::string& video, std::size_t a, std::size_t b) const override {
    return shift(base_.flow(video, a, b));
  }
  FlowField flow_region(const std::string& video, std::size_t a, std::size_t b, const Rect& r) const override {
    return shift(base_.flow_region(video, a, b, r));
  }

 private:
  FlowField shift(FlowField f) const {
    for (auto& x : f.u) x += offset_.u;
    for (auto& x : f.v) x += offset_.v;
    return f;
  }

  const FlowProvider& base_;
  Vec2 offset_;
};

inline constexpr std::uint32_t kFlowFileVersion = 1;

/// One (ref, target) record of a flow file.
struct FlowPair {
  std::uint32_t ref = 0;
  std::uint32_t target = 0;
  FlowField field;
};

/// "SWMF" v1: u32 version, width, height, pair_count, then per pair
/// u32 ref, u32 target, f32 u-plane, f32 v-plane (row-major).
inline void write_flow_file(const std::string& path, int width, int height, const std::vector<FlowPair>& pairs) {
  binio::Writer w(path);
  w.magic("SWMF");
  w.u32(kFlowFileVersion);
  w.u32(static_cast<std::uint32_t>(width));
  w.u32(static_cast<std::uint32_t>(height));
  w.u32(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& p : pairs) {
    require(p.field.width == width && p.field.height == height && p.field.x0 == 0 && p.field.y0 == 0,
            ErrorKind::invalid_argument, "flow file records must be full frames");
    w.u32(p.ref);
    w.u32(p.target);
    for (double x : p.field.u) w.f32(static_cast<float>(x));
    for (double x : p.field.v) w.f32(static_cast<float>(x));
  }
  w.close();
}

/// Serves precomputed flow from "SWMF" files, one file per video.
class FileFlowProvider final : public FlowProvider {
 public:
  FileFlowProvider() = default;

  void load(const std::string& video, const std::string& path) {
    binio::Reader r(path);
    r.expect_magic("SWMF");
    r.expect_version(kFlowFileVersion);
    const int w = static_cast<int>(r.u32());
    const int h = static_cast<int>(r.u32());
    const std::uint32_t count = r.u32();
    require(w > 0 && h > 0, ErrorKind::format, path + ": empty frame size");
    if (width_ == 0) {
      width_ = w;
      height_ = h;
    }
    require(w == width_ && h == height_, ErrorKind::format, path + ": frame size differs from other flow files");
    auto& pairs = videos_[video];
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t a = r.u32();
      const std::uint32_t b = r.u32();
      FlowField f(w, h);
      for (auto& x : f.u) x = r.f32();
      for (auto& x : f.v) x = r.f32();
      pairs[{a, b}] = std::move(f);
    }
  }

  int frame_width() const override { return width_; }
  int frame_height() const override { return height_; }

  FlowField flow(const std::string& video, std::size_t a, std::size_t b) const override {
    if (a == b) return FlowField(width_, height_);
    return lookup(video, a, b);
  }

  FlowField flow_region(const std::string& video, std::size_t a, std::size_t b, const Rect& r) const override {
    if (a == b) return FlowField(r.width, r.height, r.x, r.y);
    return lookup(video, a, b).crop(r);
  }

 private:
  const FlowField& lookup(const std::string& video, std::size_t a, std::size_t b) const {
    auto v = videos_.find(video);
    require(v != videos_.end(), ErrorKind::data, "no flow file loaded for video " + video);
    auto p = v->second.find({static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)});
    require(p != v->second.end(), ErrorKind::data,
            "flow pair (" + std::to_string(a) + "," + std::to_string(b) + ") missing for video " + video);
    return p->second;
  }

  int width_ = 0;
  int height_ = 0;
  std::map<std::string, std::map<std::pair<std::uint32_t, std::uint32_t>, FlowField>> videos_;
};

/// Frame indices of every window: window i covers i−⌊w/2⌋ .. i+⌊w/2⌋ with
/// out-of-range indices clamped to the first/last frame.
inline std::vector<std::vector<std::size_t>> pad_and_window(std::size_t frames, std::size_t w) {
  require(frames >= 1, ErrorKind::invalid_argument, "pad_and_window: video has no frames");
  require(w >= 3 && w % 2 == 1, ErrorKind::invalid_argument,
          "pad_and_window: window length must be odd and >= 3, got " + std::to_string(w));
  const long half = static_cast<long>(w / 2);
  const long last = static_cast<long>(frames) - 1;
  std::vector<std::vector<std::size_t>> windows(frames, std::vector<std::size_t>(w));
  for (std::size_t i = 0; i < frames; ++i)
    for (std::size_t s = 0; s < w; ++s)
      windows[i][s] = static_cast<std::size_t>(std::clamp(static_cast<long>(i) - half + static_cast<long>(s), 0L, last));
  return windows;
}

/// Mean displacement over `roi`.
inline Vec2 mdmo(const FlowField& flow, const Rect& roi) {
  require(roi.width > 0 && roi.height > 0, ErrorKind::invalid_argument, "mdmo: empty rectangle");
  require(flow.covers(roi), ErrorKind::invalid_argument, "mdmo: rectangle outside the flow field");
  double su = 0.0, sv = 0.0;
  for (int y = roi.y; y < roi.y + roi.height; ++y)
    for (int x = roi.x; x < roi.x + roi.width; ++x) {
      const std::size_t i = flow.index(x, y);
      su += flow.u[i];
      sv += flow.v[i];
    }
  const double n = static_cast<double>(roi.width) * roi.height;
  return {su / n, sv / n};
}

/// Per-extraction counters.
struct Diagnostics {
  std::size_t clamped_rois = 0;
};

/// How the head displacement is removed from an ROI vector.
enum class Alignment {
  subtract,  ///< ROI sampled in place, nose displacement subtracted
  shift,     ///< ROI sampled at its position shifted by round(nose), then subtracted
};

inline const char* to_string(Alignment a) { return a == Alignment::subtract ? "subtract" : "shift"; }
inline Alignment parse_alignment(const std::string& s) {
  if (s == "subtract") return Alignment::subtract;
  if (s == "shift") return Alignment::shift;
  fail(ErrorKind::config, "unknown alignment '" + s + "'");
}

/// Mean flow of `roi` after compensating the head displacement `nose_disp`.
/// Flow is indexed by reference-frame pixel, so re-cropping the target frame
/// amounts to subtracting nose_disp; Alignment::shift additionally moves the
/// sampled rectangle by round(nose_disp) (clamped to the frame).
inline Vec2 aligned_roi_vector(const FlowProvider& provider, const std::string& video, std::size_t ref,
                               std::size_t target, const Rect& roi, Vec2 nose_disp,
                               Alignment alignment = Alignment::subtract, Diagnostics* diag = nullptr) {
  Rect sampled = roi;
  if (alignment == Alignment::shift) {
    const Rect moved = roi.translated(static_cast<int>(std::lround(nose_disp.u)), static_cast<int>(std::lround(nose_disp.v)));
    sampled = {std::clamp(moved.x, 0, std::max(0, provider.frame_width() - moved.width)),
               std::clamp(moved.y, 0, std::max(0, provider.frame_height() - moved.height)), moved.width, moved.height};
    if (!(sampled == moved) && diag) ++diag->clamped_rois;
  }
  const Vec2 m = mdmo(provider.flow_region(video, ref, target, sampled), sampled);
  return {m.u - nose_disp.u, m.v - nose_disp.v};
}

/// How each slice's frame pair is chosen.
enum class FeatureMode {
  swmro,     ///< (first frame of window, s-th frame): growing baselines
  adjacent,  ///< (s−1-th frame, s-th frame): adjacent-frame flow
};

inline const char* to_string(FeatureMode m) { return m == FeatureMode::swmro ? "swmro" : "adjacent"; }
inline FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "swmro") return FeatureMode::swmro;
  if (s == "adjacent") return FeatureMode::adjacent;
  fail(ErrorKind::config, "unknown feature mode '" + s + "'");
}

/// Features of one video: N windows of shape (w, R, 2), stored row-major.
struct SwmroFeatures {
  std::size_t frames = 0;
  std::size_t window = 0;
  std::size_t rois = 0;
  std::vector<float> data;

  SwmroFeatures() = default;
  SwmroFeatures(std::size_t n, std::size_t w, std::size_t r) : frames(n), window(w), rois(r), data(n * w * r * 2, 0.f) {}

  std::size_t per_frame() const { return window * rois * 2; }
  std::size_t offset(std::size_t i, std::size_t s, std::size_t r) const { return ((i * window + s) * rois + r) * 2; }
  Vec2 at(std::size_t i, std::size_t s, std::size_t r) const {
    const std::size_t o = offset(i, s, r);
    return {data[o], data[o + 1]};
  }
  std::span<const float> frame(std::size_t i) const { return {data.data() + i * per_frame(), per_frame()}; }
};

/// Features for all `frames` windows of `video`.
inline SwmroFeatures build_swmro(const FlowProvider& provider, const std::string& video, std::size_t frames,
                                 const FacialGraphSpec& graph, std::size_t w, FeatureMode mode = FeatureMode::swmro,
                                 Alignment alignment = Alignment::subtract, Diagnostics* diag = nullptr) {
  graph.validate();
  require(provider.frame_width() == graph.frame_width && provider.frame_height() == graph.frame_height,
          ErrorKind::config, "build_swmro: graph frame size does not match the flow provider");
  const auto windows = pad_and_window(frames, w);
  SwmroFeatures out(frames, w, graph.roi_count());
  for (std::size_t i = 0; i < frames; ++i) {
    const auto& win = windows[i];
    for (std::size_t s = 1; s < w; ++s) {
      const std::size_t ref = mode == FeatureMode::swmro ? win[0] : win[s - 1];
      const std::size_t target = win[s];
      try {
        const Vec2 nose = mdmo(provider.flow_region(video, ref, target, graph.nose), graph.nose);
        for (std::size_t r = 0; r < graph.roi_count(); ++r) {
          const Vec2 m = aligned_roi_vector(provider, video, ref, target, graph.rois[r].rect, nose, alignment, diag);
          const std::size_t o = out.offset(i, s, r);
          out.data[o] = static_cast<float>(m.u);
          out.data[o + 1] = static_cast<float>(m.v);
        }
      } catch (const Error& e) {
        fail(e.kind(), "feature extraction failed for video " + video + " frame pair (" + std::to_string(ref) + "," +
                           std::to_string(target) + "): " + e.what());
      }
    }
  }
  return out;
}

inline constexpr std::uint32_t kFeatureFileVersion = 1;

/// "SWMR" v1: u32 version, N, w, R, then N·w·R·2 f32 values.
inline void write_features(const std::string& path, const SwmroFeatures& f) {
  binio::Writer w(path);
  w.magic("SWMR");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(f.frames));
  w.u32(static_cast<std::uint32_t>(f.window));
  w.u32(static_cast<std::uint32_t>(f.rois));
  for (float x : f.data) w.f32(x);
  w.close();
}

inline SwmroFeatures read_features(const std::string& path) {
  binio::Reader r(path);
  r.expect_magic("SWMR");
  r.expect_version(kFeatureFileVersion);
  const std::size_t n = r.u32(), w = r.u32(), rois = r.u32();
  require(n > 0 && w > 0 && rois > 0, ErrorKind::format, path + ": empty feature tensor");
  SwmroFeatures f(n, w, rois);
  for (auto& x : f.data) x = r.f32();
  return f;
}

}  // namespace spotkit::facegraph
