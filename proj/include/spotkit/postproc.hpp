#pragma once

// Frame probabilities → expression proposals.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spotkit/error.hpp"
#include "spotkit/spotformer.hpp"
#include "spotkit/types.hpp"

namespace spotkit::postproc {

using spotformer::Kind;
using spotformer::kChannels;

/// Per-frame probabilities of one video, N × 10.
using ProbMap = std::vector<std::array<double, kChannels>>;

inline double prob(const ProbMap& p, std::size_t frame, Kind k, ExpressionType t) {
  return p[frame][spotformer::channel(k, t)];
}

struct Durations {
  double mean = 0.0;     ///< k
  std::size_t min = 0;   ///< j
};

struct SpottingConfig {
  double apex_threshold = 0.5;
  double overlap_threshold = 0.5;
  std::array<Durations, 2> durations{};  ///< indexed by ExpressionType

  const Durations& of(ExpressionType t) const { return durations[static_cast<std::size_t>(t)]; }

  void validate() const {
    require(apex_threshold > 0.0 && apex_threshold < 1.0, ErrorKind::config, "spotting: apex threshold must be in (0,1)");
    require(overlap_threshold > 0.0 && overlap_threshold < 1.0, ErrorKind::config,
            "spotting: overlap threshold must be in (0,1)");
    for (auto t : {ExpressionType::micro, ExpressionType::macro}) {
      const auto& d = of(t);
      require(d.min > 0 && static_cast<double>(d.min) <= d.mean, ErrorKind::config,
              std::string("spotting: need 0 < j <= k for ") + to_string(t));
    }
  }
};

/// k (mean) and j (minimum) of inclusive durations per type.
inline std::array<Durations, 2> durations_from(const std::vector<Annotation>& annotations) {
  std::array<Durations, 2> out{};
  std::array<std::size_t, 2> count{};
  std::array<double, 2> sum{};
  for (const auto& a : annotations) {
    const auto t = static_cast<std::size_t>(a.type);
    const auto len = static_cast<std::size_t>(a.offset - a.onset + 1);
    sum[t] += static_cast<double>(len);
    out[t].min = count[t] == 0 ? len : std::min(out[t].min, len);
    ++count[t];
  }
  for (std::size_t t = 0; t < 2; ++t) {
    require(count[t] > 0, ErrorKind::data,
            std::string("no ") + to_string(static_cast<ExpressionType>(t)) + " annotations to derive durations from");
    out[t].mean = sum[t] / static_cast<double>(count[t]);
  }
  return out;
}

struct Proposal {
  std::string video_id;
  ExpressionType type = ExpressionType::micro;
  long onset = 0;
  long apex = 0;
  long offset = 0;
  double score = 0.0;

  Interval interval() const { return {onset, offset}; }
  bool operator==(const Proposal&) const = default;
};

/// Frames whose apex probability exceeds `threshold`, ascending.
inline std::vector<std::size_t> spot_apexes(const ProbMap& p, ExpressionType t, double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (prob(p, i, Kind::apex, t) > threshold) out.push_back(i);
  return out;
}

/// Onset in [l−⌈k/2⌉, l−⌊j/2⌋] and offset in [l+⌊j/2⌋, l+⌈k/2⌉], both clamped
/// to the video; argmax with ties to the frame nearest l. nullopt when a
/// range is empty.
inline std::optional<std::pair<long, long>> select_boundaries(const ProbMap& p, long l, ExpressionType t,
                                                              const Durations& d) {
  const long n = static_cast<long>(p.size());
  const long outer = static_cast<long>(std::ceil(d.mean / 2.0));
  const long inner = static_cast<long>(d.min / 2);
  const long b_lo = std::max(0L, l - outer), b_hi = std::min(n - 1, l - inner);
  const long d_lo = std::max(0L, l + inner), d_hi = std::min(n - 1, l + outer);
  if (b_lo > b_hi || d_lo > d_hi) return std::nullopt;
  long b = b_hi;
  for (long i = b_hi; i >= b_lo; --i)
    if (prob(p, static_cast<std::size_t>(i), Kind::onset, t) > prob(p, static_cast<std::size_t>(b), Kind::onset, t)) b = i;
  long e = d_lo;
  for (long i = d_lo; i <= d_hi; ++i)
    if (prob(p, static_cast<std::size_t>(i), Kind::offset, t) > prob(p, static_cast<std::size_t>(e), Kind::offset, t))
      e = i;
  return std::pair{b, e};
}

inline double score(const ProbMap& p, long b, long l, long d, ExpressionType t) {
  return prob(p, static_cast<std::size_t>(b), Kind::onset, t) * prob(p, static_cast<std::size_t>(l), Kind::apex, t) *
         prob(p, static_cast<std::size_t>(d), Kind::offset, t);
}

/// Greedy suppression: highest score first (ties: earlier onset, then
/// shorter interval); a proposal survives iff its IoU with every kept one is
/// at most `overlap`.
inline std::vector<Proposal> nms(std::vector<Proposal> proposals, double overlap) {
  std::stable_sort(proposals.begin(), proposals.end(), [](const Proposal& a, const Proposal& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.onset != b.onset) return a.onset < b.onset;
    return a.interval().length() < b.interval().length();
  });
  std::vector<Proposal> kept;
  for (const auto& p : proposals) {
    bool ok = true;
    for (const auto& k : kept)
      if (iou(p.interval(), k.interval()) > overlap) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(p);
  }
  return kept;
}

inline std::vector<Proposal> spot_video(const std::string& video_id, const ProbMap& p, const SpottingConfig& cfg) {
  std::vector<Proposal> out;
  for (auto t : {ExpressionType::macro, ExpressionType::micro}) {
    std::vector<Proposal> cand;
    for (std::size_t l : spot_apexes(p, t, cfg.apex_threshold)) {
      const auto bd = select_boundaries(p, static_cast<long>(l), t, cfg.of(t));
      if (!bd) continue;
      cand.push_back({video_id, t, bd->first, static_cast<long>(l), bd->second,
                      score(p, bd->first, static_cast<long>(l), bd->second, t)});
    }
    auto kept = nms(std::move(cand), cfg.overlap_threshold);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const Proposal& a, const Proposal& b) {
    if (a.type != b.type) return a.type < b.type;
    return a.onset < b.onset;
  });
  return out;
}

inline void write_proposals(const std::string& path, const std::vector<Proposal>& proposals) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write " + path);
  out.precision(17);
  out << "video_id,type,onset,apex,offset,score\n";
  for (const auto& p : proposals)
    out << p.video_id << ',' << to_string(p.type) << ',' << p.onset << ',' << p.apex << ',' << p.offset << ','
        << p.score << '\n';
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

inline std::vector<Proposal> read_proposals(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "video_id,type,onset,apex,offset,score",
          ErrorKind::format, path + ": expected header video_id,type,onset,apex,offset,score");
  std::vector<Proposal> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == 6, ErrorKind::format, path + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      Proposal p{f[0], parse_expression_type(f[1]), std::stol(f[2]), std::stol(f[3]), std::stol(f[4]), std::stod(f[5])};
      require(p.onset <= p.apex && p.apex <= p.offset && p.onset >= 0, ErrorKind::format,
              "proposal frames out of order");
      out.push_back(std::move(p));
    } catch (const std::logic_error& e) {
      fail(ErrorKind::format, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// "video_id,frame,<10 channels>"
inline void write_probabilities(const std::string& path, const std::vector<std::pair<std::string, ProbMap>>& maps) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write " + path);
  out.precision(17);
  out << "video_id,frame";
  for (std::size_t c = 0; c < kChannels; ++c) out << ',' << spotformer::channel_name(c);
  out << '\n';
  for (const auto& [id, map] : maps)
    for (std::size_t i = 0; i < map.size(); ++i) {
      out << id << ',' << i;
      for (double v : map[i]) out << ',' << v;
      out << '\n';
    }
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

inline std::vector<std::pair<std::string, ProbMap>> read_probabilities(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line.rfind("video_id,frame,", 0) == 0, ErrorKind::format,
          path + ": missing probability header");
  std::vector<std::pair<std::string, ProbMap>> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path + ":" + std::to_string(lineno);
    require(f.size() == 2 + kChannels, ErrorKind::format, where + ": expected " + std::to_string(2 + kChannels) + " fields");
    if (out.empty() || out.back().first != f[0]) out.push_back({f[0], {}});
    auto& map = out.back().second;
    try {
      require(std::stoul(f[1]) == map.size(), ErrorKind::format, "frames must be consecutive from 0");
      std::array<double, kChannels> row{};
      for (std::size_t c = 0; c < kChannels; ++c) row[c] = std::stod(f[2 + c]);
      map.push_back(row);
    } catch (const std::logic_error& e) {
      fail(ErrorKind::format, where + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::format, where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace spotkit::postproc
