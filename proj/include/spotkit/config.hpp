#pragma once

// INI run configuration: [corpus] [features] [model] [train] [spotting] [eval].
// Every key has a default; unknown sections or keys are rejected.

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "spotkit/error.hpp"
#include "spotkit/facegraph.hpp"
#include "spotkit/postproc.hpp"
#include "spotkit/spotformer.hpp"
#include "spotkit/synthcorpus.hpp"
#include "spotkit/training.hpp"

namespace spotkit::config {

struct FeatureConfig {
  std::size_t window = 17;
  facegraph::FeatureMode mode = facegraph::FeatureMode::swmro;
  facegraph::Alignment alignment = facegraph::Alignment::subtract;
  std::string source = "synthetic";  ///< synthetic | files
};

struct SpottingSettings {
  double apex_threshold = 0.5;
  double overlap_threshold = 0.5;
  /// k and j per type; 0 derives them (corpus generator ranges for the
  /// synthetic source, training annotations otherwise).
  double k_micro = 0.0;
  double j_micro = 0.0;
  double k_macro = 0.0;
  double j_macro = 0.0;
};

struct EvalConfig {
  double iou_threshold = 0.5;
  double test_fraction = 0.2;  ///< share of subjects held out for testing
  double val_fraction = 0.1;   ///< share of training subjects used for validation
};

struct RunConfig {
  std::string graph = "default";  ///< default | reduced:<per part> | path to a graph file
  synth::CorpusConfig corpus;
  FeatureConfig features;
  spotformer::ModelConfig model;
  training::TrainConfig train;
  SpottingSettings spotting;
  EvalConfig eval;

  /// Seeds the corpus, model initialisation and training streams at once.
  void set_seed(std::uint64_t seed) {
    corpus.seed = seed;
    model.seed = seed;
    train.seed = seed;
  }

  /// Model config with the window and graph taken from the other sections.
  spotformer::ModelConfig model_config() const {
    auto m = model;
    m.window = features.window;
    m.graph = corpus.graph;
    return m;
  }

  /// Durations used by the spotting stage.
  postproc::SpottingConfig spotting_config(const std::vector<Annotation>* training_annotations = nullptr) const {
    postproc::SpottingConfig s;
    s.apex_threshold = spotting.apex_threshold;
    s.overlap_threshold = spotting.overlap_threshold;
    std::array<postproc::Durations, 2> derived{};
    if (features.source == "synthetic" || !training_annotations) {
      derived[0] = {0.5 * static_cast<double>(corpus.me_min_duration + corpus.me_max_duration),
                    static_cast<std::size_t>(corpus.me_min_duration)};
      derived[1] = {0.5 * static_cast<double>(corpus.mae_min_duration + corpus.mae_max_duration),
                    static_cast<std::size_t>(corpus.mae_min_duration)};
    } else {
      derived = postproc::durations_from(*training_annotations);
    }
    auto pick = [](double k, double j, const postproc::Durations& d) {
      return postproc::Durations{k > 0 ? k : d.mean, j > 0 ? static_cast<std::size_t>(j) : d.min};
    };
    s.durations[0] = pick(spotting.k_micro, spotting.j_micro, derived[0]);
    s.durations[1] = pick(spotting.k_macro, spotting.j_macro, derived[1]);
    s.validate();
    return s;
  }

  void validate() const {
    corpus.validate();
    require(features.window >= 3 && features.window % 2 == 1, ErrorKind::config, "features: window must be odd and >= 3");
    require(features.source == "synthetic" || features.source == "files", ErrorKind::config,
            "features: source must be synthetic or files");
    model_config().validate();
    train.validate();
    require(eval.iou_threshold > 0.0 && eval.iou_threshold <= 1.0, ErrorKind::config, "eval: iou_threshold in (0,1]");
    require(eval.test_fraction > 0.0 && eval.test_fraction < 1.0, ErrorKind::config, "eval: test_fraction in (0,1)");
    require(eval.val_fraction >= 0.0 && eval.val_fraction < 1.0, ErrorKind::config, "eval: val_fraction in [0,1)");
    require(spotting.apex_threshold > 0.0 && spotting.apex_threshold < 1.0, ErrorKind::config,
            "spotting: apex_threshold in (0,1)");
    require(spotting.overlap_threshold > 0.0 && spotting.overlap_threshold < 1.0, ErrorKind::config,
            "spotting: overlap_threshold in (0,1)");
  }
};

inline facegraph::FacialGraphSpec resolve_graph(const std::string& spec) {
  if (spec == "default") return facegraph::default_graph();
  if (spec.rfind("reduced:", 0) == 0) {
    std::size_t n = 0;
    const auto s = spec.substr(8);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
    require(ec == std::errc() && ptr == s.data() + s.size() && n > 0, ErrorKind::config, "bad graph spec '" + spec + "'");
    return facegraph::reduced_graph(n);
  }
  return facegraph::load_graph(spec);
}

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(long v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }
inline std::string fmt(const std::string& v) { return v; }

template <class T>
T parse(const std::string& key, const std::string& text) {
  T v{};
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    fail(ErrorKind::config, key + ": expected true or false, got '" + text + "'");
  } else {
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    require(ec == std::errc() && ptr == text.data() + text.size(), ErrorKind::config,
            key + ": cannot parse '" + text + "'");
    return v;
  }
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <class T>
Field field_of(const std::string& section, const std::string& key, T& ref) {
  return {section, key, [&ref] { return fmt(ref); },
          [&ref, name = section + "." + key](const std::string& s) { ref = parse<T>(name, s); }};
}

inline std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  auto& co = c.corpus;
  f.push_back(field_of("corpus", "subjects", co.subjects));
  f.push_back(field_of("corpus", "videos_per_subject", co.videos_per_subject));
  f.push_back(field_of("corpus", "frames", co.frames));
  f.push_back(field_of("corpus", "event_rate", co.event_rate));
  f.push_back(field_of("corpus", "head_step", co.head_step));
  f.push_back(field_of("corpus", "head_cap", co.head_cap));
  f.push_back(field_of("corpus", "head_smoothing", co.head_smoothing));
  f.push_back(field_of("corpus", "flow_noise", co.flow_noise));
  f.push_back(field_of("corpus", "seed", co.seed));
  f.push_back(field_of("corpus", "me_min_duration", co.me_min_duration));
  f.push_back(field_of("corpus", "me_max_duration", co.me_max_duration));
  f.push_back(field_of("corpus", "mae_min_duration", co.mae_min_duration));
  f.push_back(field_of("corpus", "mae_max_duration", co.mae_max_duration));
  f.push_back(field_of("corpus", "me_min_amplitude", co.me_min_amplitude));
  f.push_back(field_of("corpus", "me_max_amplitude", co.me_max_amplitude));
  f.push_back(field_of("corpus", "mae_min_amplitude", co.mae_min_amplitude));
  f.push_back(field_of("corpus", "mae_max_amplitude", co.mae_max_amplitude));
  f.push_back(field_of("corpus", "min_gap", co.min_gap));
  f.push_back(field_of("corpus", "footprint_margin", co.footprint_margin));
  f.push_back(field_of("corpus", "footprint_falloff", co.footprint_falloff));
  f.push_back(field_of("corpus", "graph", c.graph));
  f.push_back(field_of("features", "window", c.features.window));
  f.push_back({"features", "mode", [&c] { return std::string(facegraph::to_string(c.features.mode)); },
               [&c](const std::string& s) { c.features.mode = facegraph::parse_feature_mode(s); }});
  f.push_back({"features", "alignment", [&c] { return std::string(facegraph::to_string(c.features.alignment)); },
               [&c](const std::string& s) { c.features.alignment = facegraph::parse_alignment(s); }});
  f.push_back(field_of("features", "source", c.features.source));
  f.push_back(field_of("model", "embed_dim", c.model.embed_dim));
  f.push_back(field_of("model", "heads", c.model.heads));
  f.push_back(field_of("model", "mlp_ratio", c.model.mlp_ratio));
  f.push_back({"model", "variant", [&c] { return std::string(spotformer::to_string(c.model.variant)); },
               [&c](const std::string& s) { c.model.variant = spotformer::parse_variant(s); }});
  f.push_back(field_of("model", "seed", c.model.seed));
  auto& t = c.train;
  f.push_back(field_of("train", "epochs", t.epochs));
  f.push_back(field_of("train", "batch_size", t.batch_size));
  f.push_back(field_of("train", "lr", t.optimizer.lr));
  f.push_back(field_of("train", "beta1", t.optimizer.beta1));
  f.push_back(field_of("train", "beta2", t.optimizer.beta2));
  f.push_back(field_of("train", "weight_decay", t.optimizer.weight_decay));
  f.push_back(field_of("train", "eps", t.optimizer.eps));
  f.push_back(field_of("train", "alpha", t.loss.alpha));
  f.push_back(field_of("train", "gamma", t.loss.gamma));
  f.push_back(field_of("train", "tau", t.loss.tau));
  f.push_back(field_of("train", "lambda", t.loss.lambda));
  f.push_back(field_of("train", "contrastive_mean", t.loss.contrastive_mean));
  f.push_back(field_of("train", "label_radius", t.label_radius));
  f.push_back(field_of("train", "neutral_ratio", t.neutral_ratio));
  f.push_back(field_of("train", "max_windows", t.max_windows));
  f.push_back(field_of("train", "seed", t.seed));
  f.push_back(field_of("spotting", "apex_threshold", c.spotting.apex_threshold));
  f.push_back(field_of("spotting", "overlap_threshold", c.spotting.overlap_threshold));
  f.push_back(field_of("spotting", "k_micro", c.spotting.k_micro));
  f.push_back(field_of("spotting", "j_micro", c.spotting.j_micro));
  f.push_back(field_of("spotting", "k_macro", c.spotting.k_macro));
  f.push_back(field_of("spotting", "j_macro", c.spotting.j_macro));
  f.push_back(field_of("eval", "iou_threshold", c.eval.iou_threshold));
  f.push_back(field_of("eval", "test_fraction", c.eval.test_fraction));
  f.push_back(field_of("eval", "val_fraction", c.eval.val_fraction));
  return f;
}

}  // namespace detail

/// Applies "section.key=value" overrides on top of the current values.
inline void apply(RunConfig& c, const std::string& section, const std::string& key, const std::string& value) {
  for (auto& f : detail::fields(c))
    if (f.section == section && f.key == key) {
      f.set(value);
      if (section == "corpus" && key == "graph") c.corpus.graph = resolve_graph(c.graph);
      return;
    }
  fail(ErrorKind::config, "unknown config key [" + section + "] " + key);
}

inline RunConfig parse_run_config(std::istream& in, const std::string& origin = "<config>") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::config, origin + ": " + e.what());
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    require(body.data().empty(), ErrorKind::config, origin + ": key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      try {
        apply(c, section, key, value.data());
      } catch (const Error& e) {
        fail(ErrorKind::config, origin + ": " + e.what());
      }
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "cannot open config " + path);
  return parse_run_config(in, path);
}

/// Every key with its effective value, in section order.
inline std::string format_run_config(const RunConfig& c) {
  RunConfig copy = c;
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::fields(copy)) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get() << '\n';
  }
  return os.str();
}

inline void write_run_config(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write " + path);
  out << format_run_config(c);
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

}  // namespace spotkit::config
