#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spotkit/error.hpp"

namespace spotkit {

enum class ExpressionType : int { micro = 0, macro = 1 };

inline const char* to_string(ExpressionType t) { return t == ExpressionType::micro ? "micro" : "macro"; }

inline ExpressionType parse_expression_type(const std::string& s) {
  if (s == "micro" || s == "ME") return ExpressionType::micro;
  if (s == "macro" || s == "MaE") return ExpressionType::macro;
  fail(ErrorKind::format, "unknown expression type '" + s + "'");
}

/// Inclusive frame interval [begin, end].
struct Interval {
  long begin = 0;
  long end = 0;

  long length() const { return end - begin + 1; }
  bool operator==(const Interval&) const = default;
};

/// |a ∩ b| / |a ∪ b| counting frames inclusively.
inline double iou(const Interval& a, const Interval& b) {
  const long inter = std::max(0L, std::min(a.end, b.end) - std::max(a.begin, b.begin) + 1);
  const long uni = a.length() + b.length() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Ground-truth expression clip.
struct Annotation {
  std::string video_id;
  std::string subject_id;
  ExpressionType type = ExpressionType::micro;
  long onset = 0;
  long apex = 0;
  long offset = 0;

  Interval interval() const { return {onset, offset}; }
  bool operator==(const Annotation&) const = default;
};

inline void validate(const Annotation& a) {
  require(a.onset <= a.apex && a.apex <= a.offset && a.onset >= 0, ErrorKind::data,
          "malformed annotation in video " + a.video_id + ": onset " + std::to_string(a.onset) + ", apex " +
              std::to_string(a.apex) + ", offset " + std::to_string(a.offset));
}

/// Comma-separated fields; no quoting.
inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline constexpr const char* kAnnotationHeader = "video_id,subject_id,type,onset,apex,offset";

inline void write_annotations(const std::string& path, const std::vector<Annotation>& annotations) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write " + path);
  out << kAnnotationHeader << '\n';
  for (const auto& a : annotations)
    out << a.video_id << ',' << a.subject_id << ',' << to_string(a.type) << ',' << a.onset << ',' << a.apex << ','
        << a.offset << '\n';
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

inline std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kAnnotationHeader, ErrorKind::format,
          path + ": expected header " + kAnnotationHeader);
  std::vector<Annotation> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path + ":" + std::to_string(lineno);
    require(f.size() == 6, ErrorKind::format, where + ": expected 6 fields");
    Annotation a;
    try {
      a = {f[0], f[1], parse_expression_type(f[2]), std::stol(f[3]), std::stol(f[4]), std::stol(f[5])};
    } catch (const std::logic_error& e) {
      fail(ErrorKind::format, where + ": " + e.what());
    }
    validate(a);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace spotkit
