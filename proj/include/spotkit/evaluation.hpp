#pragma once

// Interval matching, precision/recall/F1 and subject-wise folds.

#include <algorithm>
#include <array>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "spotkit/error.hpp"
#include "spotkit/postproc.hpp"
#include "spotkit/types.hpp"

namespace spotkit::evaluation {

using postproc::Proposal;

struct Counts {
  std::size_t total = 0;  ///< ground-truth clips
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  double precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }

  Counts& operator+=(const Counts& o) {
    total += o.total;
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const Counts&) const = default;
};

struct Metrics {
  std::array<Counts, 2> per_type{};  ///< indexed by ExpressionType

  const Counts& of(ExpressionType t) const { return per_type[static_cast<std::size_t>(t)]; }
  Counts overall() const {
    Counts c = per_type[0];
    c += per_type[1];
    return c;
  }
  bool operator==(const Metrics&) const = default;
};

/// Greedy matching per type: proposals in descending score (ties: earlier
/// onset, then shorter) each take the unmatched ground truth with the highest
/// IoU ≥ threshold in the same video (IoU ties: earlier onset).
inline Metrics match(const std::vector<Proposal>& proposals, const std::vector<Annotation>& annotations,
                     double threshold = 0.5) {
  {
    std::set<std::tuple<std::string, int, long, long, long>> seen;
    for (const auto& p : proposals)
      require(seen.insert({p.video_id, static_cast<int>(p.type), p.onset, p.apex, p.offset}).second,
              ErrorKind::data,
              "duplicate proposal " + p.video_id + " " + to_string(p.type) + " [" + std::to_string(p.onset) + "," +
                  std::to_string(p.offset) + "]");
  }
  Metrics m;
  for (auto t : {ExpressionType::micro, ExpressionType::macro}) {
    auto& c = m.per_type[static_cast<std::size_t>(t)];
    std::vector<const Annotation*> gts;
    for (const auto& a : annotations)
      if (a.type == t) gts.push_back(&a);
    std::vector<const Proposal*> props;
    for (const auto& p : proposals)
      if (p.type == t) props.push_back(&p);
    std::stable_sort(props.begin(), props.end(), [](const Proposal* a, const Proposal* b) {
      if (a->score != b->score) return a->score > b->score;
      if (a->onset != b->onset) return a->onset < b->onset;
      return a->interval().length() < b->interval().length();
    });
    std::vector<bool> used(gts.size(), false);
    c.total = gts.size();
    for (const Proposal* p : props) {
      std::size_t best = gts.size();
      double best_iou = -1.0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (used[g] || gts[g]->video_id != p->video_id) continue;
        const double v = iou(p->interval(), gts[g]->interval());
        if (v < threshold) continue;
        if (v > best_iou || (v == best_iou && gts[g]->onset < gts[best]->onset)) {
          best = g;
          best_iou = v;
        }
      }
      if (best < gts.size()) {
        used[best] = true;
        ++c.tp;
      } else {
        ++c.fp;
      }
    }
    c.fn = c.total - c.tp;
  }
  return m;
}

struct Fold {
  std::string test_subject;
  std::vector<std::string> train_subjects;
  std::vector<std::string> test_videos;
  std::vector<std::string> train_videos;
};

/// One fold per subject, holding out all of its videos.
inline std::vector<Fold> loso_split(const std::vector<std::pair<std::string, std::string>>& video_subjects) {
  std::map<std::string, std::vector<std::string>> by_subject;
  for (const auto& [video, subject] : video_subjects) by_subject[subject].push_back(video);
  require(by_subject.size() >= 2, ErrorKind::data, "leave-one-subject-out needs at least 2 subjects");
  std::vector<Fold> folds;
  for (const auto& [subject, videos] : by_subject) {
    Fold f;
    f.test_subject = subject;
    f.test_videos = videos;
    for (const auto& [other, ov] : by_subject)
      if (other != subject) {
        f.train_subjects.push_back(other);
        f.train_videos.insert(f.train_videos.end(), ov.begin(), ov.end());
      }
    folds.push_back(std::move(f));
  }
  return folds;
}

/// Distinct (video, subject) pairs of an annotation list.
inline std::vector<std::pair<std::string, std::string>> videos_of(const std::vector<Annotation>& annotations) {
  std::set<std::pair<std::string, std::string>> s;
  for (const auto& a : annotations) s.insert({a.video_id, a.subject_id});
  return {s.begin(), s.end()};
}

inline void write_metrics_csv(const std::string& path, const Metrics& m) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write " + path);
  out << "type,total,tp,fp,fn,precision,recall,f1\n" << std::setprecision(6) << std::fixed;
  auto row = [&](const char* name, const Counts& c) {
    out << name << ',' << c.total << ',' << c.tp << ',' << c.fp << ',' << c.fn << ',' << c.precision() << ','
        << c.recall() << ',' << c.f1() << '\n';
  };
  row("micro", m.of(ExpressionType::micro));
  row("macro", m.of(ExpressionType::macro));
  row("overall", m.overall());
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

/// Human-readable table with Total/TP/FP/FN/Precision/Recall/F1 rows.
inline std::string format_table(const Metrics& m) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "" << std::right << std::setw(10) << "MaE" << std::setw(10) << "ME"
     << std::setw(10) << "Overall" << '\n';
  const Counts ma = m.of(ExpressionType::macro), me = m.of(ExpressionType::micro), all = m.overall();
  auto count_row = [&](const char* name, std::size_t Counts::*f) {
    os << std::left << std::setw(10) << name << std::right << std::setw(10) << ma.*f << std::setw(10) << me.*f
       << std::setw(10) << all.*f << '\n';
  };
  auto ratio_row = [&](const char* name, double (Counts::*f)() const) {
    os << std::left << std::setw(10) << name << std::right << std::fixed << std::setprecision(4) << std::setw(10)
       << (ma.*f)() << std::setw(10) << (me.*f)() << std::setw(10) << (all.*f)() << '\n';
  };
  count_row("Total", &Counts::total);
  count_row("TP", &Counts::tp);
  count_row("FP", &Counts::fp);
  count_row("FN", &Counts::fn);
  ratio_row("Precision", &Counts::precision);
  ratio_row("Recall", &Counts::recall);
  ratio_row("F1", &Counts::f1);
  return os.str();
}

}  // namespace spotkit::evaluation
