#pragma once

// Synthetic facial-motion corpus: analytic per-pixel displacement fields
// with planted macro/micro expression events, a smoothed head-motion random
// walk, and per-pixel flow noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "spotkit/error.hpp"
#include "spotkit/facegraph.hpp"
#include "spotkit/types.hpp"

namespace spotkit::synth {

using facegraph::FacialGraphSpec;
using facegraph::FlowField;
using facegraph::Rect;
using facegraph::Vec2;

struct EventSpec {
  ExpressionType type = ExpressionType::micro;
  long onset = 0;
  long apex = 0;
  long offset = 0;
  std::vector<std::size_t> rois;
  double amplitude = 0.0;  ///< peak displacement, pixels
  double angle = 0.0;      ///< direction of motion, radians

  long duration() const { return offset - onset + 1; }

  /// Raised-cosine ramp: 0 at onset, 1 at apex, 0 at offset.
  double profile(long t) const {
    if (t <= onset || t >= offset) return 0.0;
    if (t <= apex) return 0.5 * (1.0 - std::cos(std::numbers::pi * static_cast<double>(t - onset) / static_cast<double>(apex - onset)));
    return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t - apex) / static_cast<double>(offset - apex)));
  }
};

struct CorpusConfig {
  std::size_t subjects = 20;
  std::size_t videos_per_subject = 4;
  std::size_t frames = 600;
  double event_rate = 3.0;  ///< events of each type per video
  double head_step = 0.5;   ///< σ of the head random-walk step, px/frame
  double head_cap = 5.0;    ///< bound on total head displacement, px
  double head_smoothing = 0.8;
  double flow_noise = 0.3;  ///< σ of per-pixel flow noise, px
  std::uint64_t seed = 7;
  long me_min_duration = 8;
  long me_max_duration = 15;
  long mae_min_duration = 16;
  long mae_max_duration = 36;
  double me_min_amplitude = 0.2;
  double me_max_amplitude = 0.6;
  double mae_min_amplitude = 0.8;
  double mae_max_amplitude = 3.0;
  long min_gap = 12;        ///< frames between any two events
  int footprint_margin = 6; ///< flat-top extension of an ROI footprint, px
  double footprint_falloff = 6.0;  ///< σ of the fall-off outside the flat top, px; 0 = hard edge
  FacialGraphSpec graph = facegraph::default_graph();

  std::size_t video_count() const { return subjects * videos_per_subject; }

  void validate() const {
    require(subjects >= 1 && videos_per_subject >= 1, ErrorKind::config, "corpus: need at least one video");
    require(frames >= 2, ErrorKind::config, "corpus: frames must be >= 2");
    require(event_rate >= 0.0, ErrorKind::config, "corpus: event_rate must be >= 0");
    require(head_step >= 0.0 && head_cap >= 0.0 && flow_noise >= 0.0, ErrorKind::config,
            "corpus: motion and noise scales must be >= 0");
    require(head_smoothing >= 0.0 && head_smoothing < 1.0, ErrorKind::config, "corpus: head_smoothing in [0, 1)");
    require(me_min_duration >= 3 && me_min_duration <= me_max_duration && me_max_duration <= 15, ErrorKind::config,
            "corpus: ME durations must satisfy 3 <= min <= max <= 15");
    require(mae_min_duration >= 16 && mae_min_duration <= mae_max_duration, ErrorKind::config,
            "corpus: MaE durations must satisfy 16 <= min <= max");
    require(me_min_amplitude > 0 && me_min_amplitude <= me_max_amplitude && mae_min_amplitude > 0 &&
                mae_min_amplitude <= mae_max_amplitude,
            ErrorKind::config, "corpus: amplitude ranges must be positive and ordered");
    require(min_gap >= 0 && footprint_margin >= 0 && footprint_falloff >= 0, ErrorKind::config,
            "corpus: min_gap, margin and falloff must be >= 0");
    graph.validate();
  }
};

struct VideoSpec {
  std::string id;
  std::string subject;
  std::size_t frames = 0;
  std::vector<Vec2> head;  ///< head displacement per frame
  std::vector<EventSpec> events;
};

struct Corpus {
  CorpusConfig config;
  std::vector<VideoSpec> videos;

  std::vector<Annotation> annotations() const {
    std::vector<Annotation> out;
    for (const auto& v : videos)
      for (const auto& e : v.events) out.push_back({v.id, v.subject, e.type, e.onset, e.apex, e.offset});
    return out;
  }

  const VideoSpec& video(const std::string& id) const {
    for (const auto& v : videos)
      if (v.id == id) return v;
    fail(ErrorKind::data, "unknown video '" + id + "'");
  }
};

inline std::string video_id(std::size_t subject, std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%02zu_v%zu", subject, k);
  return buf;
}
inline std::string subject_id(std::size_t subject) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%02zu", subject);
  return buf;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double unit_open(std::uint64_t h) { return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53; }

inline std::vector<Vec2> head_walk(const CorpusConfig& c, std::mt19937_64& rng) {
  std::normal_distribution<double> step(0.0, c.head_step);
  std::vector<Vec2> pos(c.frames);
  Vec2 vel{};
  const double keep = c.head_smoothing;
  const double fresh = std::sqrt(1.0 - keep * keep);
  for (std::size_t t = 1; t < c.frames; ++t) {
    vel.u = keep * vel.u + fresh * step(rng);
    vel.v = keep * vel.v + fresh * step(rng);
    Vec2 p{pos[t - 1].u + vel.u, pos[t - 1].v + vel.v};
    const double n = p.norm();
    if (n > c.head_cap && n > 0) {
      p.u *= c.head_cap / n;
      p.v *= c.head_cap / n;
    }
    pos[t] = p;
  }
  return pos;
}

inline std::vector<EventSpec> draw_events(const CorpusConfig& c, std::mt19937_64& rng) {
  const auto count = static_cast<std::size_t>(std::lround(c.event_rate));
  std::vector<ExpressionType> types;
  for (std::size_t k = 0; k < count; ++k) {
    types.push_back(ExpressionType::macro);
    types.push_back(ExpressionType::micro);
  }
  const auto groups = c.graph.part_groups();
  const long n = static_cast<long>(c.frames);
  const long edge = std::max<long>(2, c.min_gap / 2);
  for (int attempt = 0; attempt < 50; ++attempt) {
    std::vector<EventSpec> events;
    bool ok = true;
    for (auto type : types) {
      EventSpec e;
      e.type = type;
      const bool micro = type == ExpressionType::micro;
      std::uniform_int_distribution<long> dur(micro ? c.me_min_duration : c.mae_min_duration,
                                              micro ? c.me_max_duration : c.mae_max_duration);
      std::uniform_real_distribution<double> amp(micro ? c.me_min_amplitude : c.mae_min_amplitude,
                                                 micro ? c.me_max_amplitude : c.mae_max_amplitude);
      std::uniform_real_distribution<double> apex_frac(0.4, 0.6);
      std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
      const long d = dur(rng);
      e.amplitude = amp(rng);
      e.angle = angle(rng);
      if (micro) {
        // one part, one or two of its ROIs
        const auto& grp = groups[std::uniform_int_distribution<std::size_t>(0, groups.size() - 1)(rng)];
        std::vector<std::size_t> members = grp;
        std::shuffle(members.begin(), members.end(), rng);
        const std::size_t k = std::min<std::size_t>(members.size(), std::uniform_int_distribution<std::size_t>(1, 2)(rng));
        e.rois.assign(members.begin(), members.begin() + static_cast<long>(k));
      } else {
        // every ROI of one or two parts
        std::vector<std::size_t> parts{0, 1, 2};
        std::shuffle(parts.begin(), parts.end(), rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
        for (std::size_t p = 0; p < k; ++p)
          for (auto r : groups[parts[p]]) e.rois.push_back(r);
      }
      std::sort(e.rois.begin(), e.rois.end());
      if (n - 2 * edge - d < 0) {
        ok = false;
        break;
      }
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        const long onset = std::uniform_int_distribution<long>(edge, n - edge - d)(rng);
        const long offset = onset + d - 1;
        placed = std::none_of(events.begin(), events.end(), [&](const EventSpec& o) {
          return onset <= o.offset + c.min_gap && o.onset <= offset + c.min_gap;
        });
        if (placed) {
          e.onset = onset;
          e.offset = offset;
          e.apex = onset + std::lround(apex_frac(rng) * static_cast<double>(d - 1));
          e.apex = std::clamp(e.apex, onset + 1, offset - 1);
        }
      }
      if (!placed) {
        ok = false;
        break;
      }
      events.push_back(std::move(e));
    }
    if (ok) {
      std::sort(events.begin(), events.end(), [](const EventSpec& a, const EventSpec& b) { return a.onset < b.onset; });
      return events;
    }
  }
  fail(ErrorKind::config, "corpus: cannot pack " + std::to_string(types.size()) + " events into " +
                              std::to_string(c.frames) + " frames");
}

}  // namespace detail

/// Deterministic for a given config: video k of subject s draws from its own
/// seeded stream.
inline Corpus generate(const CorpusConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  for (std::size_t s = 0; s < config.subjects; ++s)
    for (std::size_t k = 0; k < config.videos_per_subject; ++k) {
      std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                        static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(k)};
      std::mt19937_64 rng(seq);
      VideoSpec v;
      v.id = video_id(s, k);
      v.subject = subject_id(s);
      v.frames = config.frames;
      v.head = detail::head_walk(config, rng);
      v.events = detail::draw_events(config, rng);
      corpus.videos.push_back(std::move(v));
    }
  return corpus;
}

/// Analytic flow: displacement(target) − displacement(ref) + noise, where
/// displacement(t, p) = head(t) + Σ events amplitude·profile(t)·footprint(p)·direction.
class SyntheticFlowProvider final : public facegraph::FlowProvider {
 public:
  explicit SyntheticFlowProvider(const Corpus& corpus) : corpus_(corpus) {
    for (std::size_t i = 0; i < corpus_.videos.size(); ++i) index_[corpus_.videos[i].id] = i;
  }

  int frame_width() const override { return corpus_.config.graph.frame_width; }
  int frame_height() const override { return corpus_.config.graph.frame_height; }

  FlowField flow(const std::string& video, std::size_t ref, std::size_t target) const override {
    return flow_region(video, ref, target, {0, 0, frame_width(), frame_height()});
  }

  FlowField flow_region(const std::string& video, std::size_t ref, std::size_t target,
                        const Rect& region) const override {
    const std::size_t vi = lookup(video);
    const VideoSpec& v = corpus_.videos[vi];
    require(ref < v.frames && target < v.frames, ErrorKind::invalid_argument,
            "synthetic flow: frame out of range for video " + video);
    require(corpus_.config.graph.contains(region), ErrorKind::invalid_argument, "synthetic flow: region outside frame");
    FlowField f(region.width, region.height, region.x, region.y);
    if (ref == target) return f;
    const double sigma = corpus_.config.flow_noise;
    const std::uint64_t base = detail::splitmix64(corpus_.config.seed ^ detail::splitmix64(
        (static_cast<std::uint64_t>(vi) << 42) ^ (static_cast<std::uint64_t>(ref) << 21) ^ target));
    for (int y = region.y; y < region.y + region.height; ++y)
      for (int x = region.x; x < region.x + region.width; ++x) {
        const Vec2 a = displacement(v, static_cast<long>(ref), x, y);
        const Vec2 b = displacement(v, static_cast<long>(target), x, y);
        double du = b.u - a.u, dv = b.v - a.v;
        if (sigma > 0) {
          const std::uint64_t h1 = detail::splitmix64(base ^ ((static_cast<std::uint64_t>(y) << 32) | static_cast<std::uint32_t>(x)));
          const std::uint64_t h2 = detail::splitmix64(h1);
          const double r = std::sqrt(-2.0 * std::log(detail::unit_open(h1)));
          const double th = 2.0 * std::numbers::pi * detail::unit_open(h2);
          du += sigma * r * std::cos(th);
          dv += sigma * r * std::sin(th);
        }
        f.u[f.index(x, y)] = du;
        f.v[f.index(x, y)] = dv;
      }
    return f;
  }

  /// Noise-free displacement of pixel (x, y) at frame t.
  Vec2 displacement(const VideoSpec& v, long t, int x, int y) const {
    Vec2 d = v.head[static_cast<std::size_t>(t)];
    for (const auto& e : v.events) {
      if (t <= e.onset || t >= e.offset) continue;
      const double a = e.amplitude * e.profile(t) * footprint(e, x, y);
      d.u += a * std::cos(e.angle);
      d.v += a * std::sin(e.angle);
    }
    return d;
  }

  /// 1 on each affected ROI grown by the margin, Gaussian fall-off outside
  /// (σ = footprint_falloff, hard edge when 0); the maximum over affected ROIs.
  double footprint(const EventSpec& e, int x, int y) const {
    const auto& g = corpus_.config.graph;
    const int m = corpus_.config.footprint_margin;
    const double sigma = corpus_.config.footprint_falloff;
    double best = 0.0;
    for (auto r : e.rois) {
      const Rect& rc = g.rois[r].rect;
      const double px = x + 0.5, py = y + 0.5;
      const double dx = std::max({static_cast<double>(rc.x - m) - px, 0.0, px - static_cast<double>(rc.x + rc.width + m)});
      const double dy = std::max({static_cast<double>(rc.y - m) - py, 0.0, py - static_cast<double>(rc.y + rc.height + m)});
      if (dx == 0.0 && dy == 0.0) return 1.0;
      if (sigma > 0) best = std::max(best, std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
    }
    return best;
  }

  const Corpus& corpus() const { return corpus_; }

 private:
  std::size_t lookup(const std::string& video) const {
    auto it = index_.find(video);
    require(it != index_.end(), ErrorKind::invalid_argument, "synthetic flow: unknown video '" + video + "'");
    return it->second;
  }

  const Corpus& corpus_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace spotkit::synth
