#pragma once

// Stage helpers shared by the CLI and the end-to-end checks: video lists,
// subject splits, batched feature extraction, inference and a complete
// train → infer → spot → evaluate run.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "spotkit/config.hpp"
#include "spotkit/error.hpp"
#include "spotkit/evaluation.hpp"
#include "spotkit/facegraph.hpp"
#include "spotkit/parallel.hpp"
#include "spotkit/postproc.hpp"
#include "spotkit/spotformer.hpp"
#include "spotkit/synthcorpus.hpp"
#include "spotkit/training.hpp"

namespace spotkit::pipeline {

struct VideoInfo {
  std::string id;
  std::string subject;
  std::size_t frames = 0;
};

inline std::vector<VideoInfo> videos_of(const synth::Corpus& corpus) {
  std::vector<VideoInfo> out;
  for (const auto& v : corpus.videos) out.push_back({v.id, v.subject, v.frames});
  return out;
}

inline void write_videos(const std::string& path, const std::vector<VideoInfo>& videos) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write " + path);
  out << "video_id,subject_id,frames\n";
  for (const auto& v : videos) out << v.id << ',' << v.subject << ',' << v.frames << '\n';
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

inline std::vector<VideoInfo> read_videos(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "video_id,subject_id,frames", ErrorKind::format,
          path + ": expected header video_id,subject_id,frames");
  std::vector<VideoInfo> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == 3, ErrorKind::format, path + ":" + std::to_string(lineno) + ": expected 3 fields");
    try {
      out.push_back({f[0], f[1], std::stoul(f[2])});
    } catch (const std::logic_error& e) {
      fail(ErrorKind::format, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  require(!out.empty(), ErrorKind::data, path + ": no videos");
  return out;
}

enum class Role { train, val, test };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::val: return "val";
    case Role::test: return "test";
  }
  return "?";
}

/// Subject → role.
using Split = std::map<std::string, Role>;

/// Shuffles the subjects with `seed`; the first ⌈test_fraction·n⌉ are test,
/// the next ⌊val_fraction·rest⌋ validation, the remainder training.
inline Split split_subjects(const std::vector<VideoInfo>& videos, double test_fraction, double val_fraction,
                            std::uint64_t seed) {
  std::set<std::string> uniq;
  for (const auto& v : videos) uniq.insert(v.subject);
  std::vector<std::string> subjects(uniq.begin(), uniq.end());
  require(subjects.size() >= 2, ErrorKind::data, "subject split needs at least 2 subjects");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  const std::size_t n = subjects.size();
  const std::size_t test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n) - 1e-9)), 1, n - 1);
  const std::size_t val = std::min<std::size_t>(
      static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n - test) + 1e-9)), n - test - 1);
  Split split;
  for (std::size_t i = 0; i < n; ++i) split[subjects[i]] = i < test ? Role::test : i < test + val ? Role::val : Role::train;
  return split;
}

inline void write_split(const std::string& path, const std::vector<VideoInfo>& videos, const Split& split) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write " + path);
  out << "video_id,subject_id,role\n";
  for (const auto& v : videos) out << v.id << ',' << v.subject << ',' << to_string(split.at(v.subject)) << '\n';
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

/// video id → role
inline std::map<std::string, Role> read_split(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::missing_file, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "video_id,subject_id,role", ErrorKind::format,
          path + ": expected header video_id,subject_id,role");
  std::map<std::string, Role> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == 3, ErrorKind::format, path + ": expected 3 fields per row");
    if (f[2] == "train") out[f[0]] = Role::train;
    else if (f[2] == "val") out[f[0]] = Role::val;
    else if (f[2] == "test") out[f[0]] = Role::test;
    else fail(ErrorKind::format, path + ": unknown role '" + f[2] + "'");
  }
  return out;
}

inline std::vector<Annotation> annotations_for(const std::vector<Annotation>& all, const std::set<std::string>& videos) {
  std::vector<Annotation> out;
  for (const auto& a : all)
    if (videos.count(a.video_id)) out.push_back(a);
  return out;
}

inline std::vector<facegraph::SwmroFeatures> extract_all(const facegraph::FlowProvider& provider,
                                                         const std::vector<VideoInfo>& videos,
                                                         const facegraph::FacialGraphSpec& graph, std::size_t window,
                                                         facegraph::FeatureMode mode,
                                                         facegraph::Alignment alignment = facegraph::Alignment::subtract) {
  std::vector<facegraph::SwmroFeatures> out(videos.size());
  parallel_for(videos.size(), [&](std::size_t i) {
    out[i] = facegraph::build_swmro(provider, videos[i].id, videos[i].frames, graph, window, mode, alignment);
  });
  return out;
}

inline std::string feature_path(const std::string& dir, const std::string& video) {
  return (std::filesystem::path(dir) / (video + ".swmr")).string();
}

struct Inference {
  postproc::ProbMap probs;
  std::vector<std::vector<double>> embeddings;  ///< filled on request
};

/// Per-frame probabilities of one video in eval mode.
inline Inference infer_video(spotformer::SpotFormer& model, const facegraph::SwmroFeatures& f, bool with_embeddings = false,
                             std::size_t batch = 256) {
  require(f.window == model.config().window && f.rois == model.config().rois(), ErrorKind::data,
          "infer: features do not match the model window/ROI count");
  Inference out;
  out.probs.resize(f.frames);
  if (with_embeddings) out.embeddings.resize(f.frames);
  const std::size_t chunks = (f.frames + batch - 1) / batch;
  const std::size_t per = f.per_frame(), d = model.config().embed_dim;
  parallel_for(chunks, [&](std::size_t c) {
    tensor::NoGradScope no_grad;
    const std::size_t lo = c * batch, hi = std::min(f.frames, lo + batch);
    std::vector<double> clips((hi - lo) * per);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto src = f.frame(i);
      std::copy(src.begin(), src.end(), clips.begin() + static_cast<std::ptrdiff_t>((i - lo) * per));
    }
    const tensor::Tensor x({hi - lo, f.window, f.rois, 2}, std::move(clips));
    const auto r = model.forward(x, tensor::NormMode::eval);
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t k = 0; k < spotformer::kChannels; ++k) out.probs[i][k] = r.probs[(i - lo) * spotformer::kChannels + k];
      if (with_embeddings)
        out.embeddings[i].assign(r.features.values().begin() + static_cast<std::ptrdiff_t>((i - lo) * d),
                                 r.features.values().begin() + static_cast<std::ptrdiff_t>((i - lo + 1) * d));
    }
  });
  return out;
}

/// Parameter values and batch-norm statistics of a model.
struct Snapshot {
  std::vector<std::vector<double>> params;
  std::vector<tensor::BatchNormStats> stats;
};

inline Snapshot snapshot(spotformer::SpotFormer& model) {
  Snapshot s;
  for (const auto& p : model.parameters()) s.params.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  for (auto& [name, st] : model.buffers()) s.stats.push_back(*st);
  return s;
}

inline void restore(spotformer::SpotFormer& model, const Snapshot& s) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    std::copy(s.params[i].begin(), s.params[i].end(), params[i].tensor.mutable_values().begin());
  auto bufs = model.buffers();
  for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = s.stats[i];
}

using Logger = std::function<void(const std::string&)>;

struct ExperimentResult {
  evaluation::Metrics metrics;
  std::vector<training::EpochLog> log;
  std::vector<postproc::Proposal> proposals;
  Split split;
};

/// Extracts features, trains on the training subjects (best validation
/// checkpoint kept), infers the test subjects, spots and scores them.
inline ExperimentResult run_experiment(const config::RunConfig& cfg, const synth::Corpus& corpus,
                                       const facegraph::FlowProvider& provider, const Logger& log = {}) {
  cfg.validate();
  const auto videos = videos_of(corpus);
  const auto annotations = corpus.annotations();
  ExperimentResult result;
  result.split = split_subjects(videos, cfg.eval.test_fraction, cfg.eval.val_fraction, cfg.train.seed);
  const auto features = extract_all(provider, videos, corpus.config.graph, cfg.features.window, cfg.features.mode,
                                    cfg.features.alignment);
  std::map<std::string, std::vector<Annotation>> by_video;
  for (const auto& a : annotations) by_video[a.video_id].push_back(a);
  std::vector<training::VideoSample> train_set, val_set;
  std::vector<std::size_t> test_idx;
  std::set<std::string> test_videos;
  std::vector<Annotation> train_annotations;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const Role role = result.split.at(videos[i].subject);
    if (role == Role::test) {
      test_idx.push_back(i);
      test_videos.insert(videos[i].id);
      continue;
    }
    auto sample = training::make_sample(videos[i].id, videos[i].subject, features[i], by_video[videos[i].id],
                                        cfg.train.label_radius);
    if (role == Role::train) {
      train_annotations.insert(train_annotations.end(), by_video[videos[i].id].begin(), by_video[videos[i].id].end());
      train_set.push_back(std::move(sample));
    } else {
      val_set.push_back(std::move(sample));
    }
  }
  spotformer::SpotFormer model(cfg.model_config());
  Snapshot best;
  training::TrainCallbacks cb;
  cb.on_epoch = [&](const training::EpochLog& e, bool improved) {
    if (improved) best = snapshot(model);
    if (log)
      log("epoch " + std::to_string(e.epoch) + " cls " + config::detail::fmt(e.cls) + " con " +
          config::detail::fmt(e.con) + " total " + config::detail::fmt(e.total) + " val " +
          config::detail::fmt(e.validation));
  };
  result.log = training::train(model, train_set, val_set, cfg.train, cb);
  restore(model, best);
  const auto scfg = cfg.spotting_config(&train_annotations);
  for (std::size_t i : test_idx) {
    const auto inf = infer_video(model, features[i]);
    const auto props = postproc::spot_video(videos[i].id, inf.probs, scfg);
    result.proposals.insert(result.proposals.end(), props.begin(), props.end());
  }
  result.metrics =
      evaluation::match(result.proposals, annotations_for(annotations, test_videos), cfg.eval.iou_threshold);
  return result;
}

}  // namespace spotkit::pipeline
