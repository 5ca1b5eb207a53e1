// spotkit: synthetic corpus → features → training → inference → spotting →
// evaluation, plus gradient checking, ablation sweeps and embedding export.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spotkit/config.hpp"
#include "spotkit/error.hpp"
#include "spotkit/evaluation.hpp"
#include "spotkit/facegraph.hpp"
#include "spotkit/gradcheck.hpp"
#include "spotkit/pipeline.hpp"
#include "spotkit/postproc.hpp"
#include "spotkit/spotformer.hpp"
#include "spotkit/synthcorpus.hpp"
#include "spotkit/training.hpp"

namespace fs = std::filesystem;
using namespace spotkit;

namespace {

enum Exit : int {
  ok = 0,
  failure = 1,
  usage = 2,
  config_error = 3,
  missing_file = 4,
  bad_format = 5,
  version_mismatch = 6,
  bad_data = 7,
  numeric_error = 8,
  bad_argument = 9,
  check_failed = 10,
};

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return config_error;
    case ErrorKind::missing_file: return missing_file;
    case ErrorKind::format: return bad_format;
    case ErrorKind::version_mismatch: return version_mismatch;
    case ErrorKind::data: return bad_data;
    case ErrorKind::numeric: return numeric_error;
    case ErrorKind::invalid_argument:
    case ErrorKind::shape: return bad_argument;
  }
  return failure;
}

void progress(const std::string& msg) { std::cerr << msg << '\n'; }

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::missing_file, "cannot create directory " + dir + ": " + ec.message());
}

void require_file(const std::string& path) {
  require(fs::exists(path), ErrorKind::missing_file, "missing file " + path);
}

/// Shared --config/--seed/--set handling.
struct ConfigOptions {
  std::string path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  void add_to(CLI::App* app) {
    app->add_option("--config", path, "INI run configuration (defaults when omitted)");
    app->add_option("--seed", seed, "seed for corpus, model initialisation and training");
    app->add_option("--set", overrides, "override as section.key=value (repeatable)");
  }

  /// `fallback` is used when --config is absent and the file exists.
  config::RunConfig load(const std::string& fallback = "") const {
    config::RunConfig cfg;
    if (!path.empty()) cfg = config::load_run_config(path);
    else if (!fallback.empty() && fs::exists(fallback)) cfg = config::load_run_config(fallback);
    if (seed) cfg.set_seed(*seed);
    for (const auto& o : overrides) {
      const auto dot = o.find('.');
      const auto eq = o.find('=');
      require(dot != std::string::npos && eq != std::string::npos && dot < eq, ErrorKind::config,
              "--set expects section.key=value, got '" + o + "'");
      config::apply(cfg, o.substr(0, dot), o.substr(dot + 1, eq - dot - 1), o.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

std::map<std::string, std::vector<Annotation>> by_video(const std::vector<Annotation>& all) {
  std::map<std::string, std::vector<Annotation>> out;
  for (const auto& a : all) out[a.video_id].push_back(a);
  return out;
}

/// Videos selected by a split file and a role name ("all" keeps everything).
std::set<std::string> select_videos(const std::vector<pipeline::VideoInfo>& videos, const std::string& split_path,
                                    const std::string& subset) {
  std::set<std::string> out;
  if (split_path.empty() || subset == "all") {
    for (const auto& v : videos) out.insert(v.id);
    return out;
  }
  require(subset == "train" || subset == "val" || subset == "test", ErrorKind::invalid_argument,
          "--subset must be train, val, test or all");
  for (const auto& [video, role] : pipeline::read_split(split_path))
    if (subset == pipeline::to_string(role)) out.insert(video);
  return out;
}

// ---------------------------------------------------------------- synth

int cmd_synth(const ConfigOptions& co, const std::string& out, std::size_t flow_videos) {
  const auto cfg = co.load();
  ensure_dir(out);
  const auto corpus = synth::generate(cfg.corpus);
  write_annotations(path_in(out, "annotations.csv"), corpus.annotations());
  pipeline::write_videos(path_in(out, "videos.csv"), pipeline::videos_of(corpus));
  config::write_run_config(path_in(out, "config.ini"), cfg);
  if (flow_videos > 0) {
    // every (ref, target) pair the configured windows need
    const synth::SyntheticFlowProvider provider(corpus);
    ensure_dir(path_in(out, "flow"));
    for (std::size_t k = 0; k < std::min(flow_videos, corpus.videos.size()); ++k) {
      const auto& v = corpus.videos[k];
      std::set<std::pair<std::size_t, std::size_t>> needed;
      for (const auto& win : facegraph::pad_and_window(v.frames, cfg.features.window))
        for (std::size_t s = 1; s < win.size(); ++s) {
          const std::size_t ref = cfg.features.mode == facegraph::FeatureMode::swmro ? win[0] : win[s - 1];
          if (ref != win[s]) needed.insert({ref, win[s]});
        }
      std::vector<facegraph::FlowPair> pairs;
      for (const auto& [a, b] : needed)
        pairs.push_back({static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), provider.flow(v.id, a, b)});
      facegraph::write_flow_file(path_in(path_in(out, "flow"), v.id + ".swmf"), provider.frame_width(),
                                 provider.frame_height(), pairs);
    }
  }
  std::cout << "videos=" << corpus.videos.size() << " annotations=" << corpus.annotations().size() << '\n';
  return ok;
}

// ---------------------------------------------------------------- extract

int cmd_extract(const ConfigOptions& co, const std::string& corpus_dir, const std::string& out) {
  const std::string corpus_cfg_path = path_in(corpus_dir, "config.ini");
  require_file(corpus_cfg_path);
  auto cfg = co.load(corpus_cfg_path);
  // the corpus is defined by the directory, not by the stage config
  const auto corpus_cfg = config::load_run_config(corpus_cfg_path);
  cfg.graph = corpus_cfg.graph;
  cfg.corpus = corpus_cfg.corpus;
  cfg.validate();
  const auto videos = pipeline::read_videos(path_in(corpus_dir, "videos.csv"));
  const auto annotations = read_annotations(path_in(corpus_dir, "annotations.csv"));
  ensure_dir(out);
  std::vector<facegraph::SwmroFeatures> features;
  if (cfg.features.source == "synthetic") {
    const auto corpus = synth::generate(cfg.corpus);
    const synth::SyntheticFlowProvider provider(corpus);
    for (const auto& v : videos)
      require(v.frames == corpus.video(v.id).frames, ErrorKind::data,
              "video " + v.id + " does not match the regenerated corpus");
    features = pipeline::extract_all(provider, videos, cfg.corpus.graph, cfg.features.window, cfg.features.mode,
                                          cfg.features.alignment);
  } else {
    facegraph::FileFlowProvider provider;
    for (const auto& v : videos) provider.load(v.id, path_in(path_in(corpus_dir, "flow"), v.id + ".swmf"));
    features = pipeline::extract_all(provider, videos, cfg.corpus.graph, cfg.features.window, cfg.features.mode,
                                          cfg.features.alignment);
  }
  for (std::size_t i = 0; i < videos.size(); ++i)
    facegraph::write_features(pipeline::feature_path(out, videos[i].id), features[i]);
  pipeline::write_videos(path_in(out, "videos.csv"), videos);
  write_annotations(path_in(out, "annotations.csv"), annotations);
  config::write_run_config(path_in(out, "config.ini"), cfg);
  std::cout << "videos=" << videos.size() << " window=" << cfg.features.window
            << " mode=" << facegraph::to_string(cfg.features.mode) << '\n';
  return ok;
}

// ---------------------------------------------------------------- train

int cmd_train(const ConfigOptions& co, const std::string& feat_dir, const std::string& out) {
  const auto cfg = co.load(path_in(feat_dir, "config.ini"));
  const auto videos = pipeline::read_videos(path_in(feat_dir, "videos.csv"));
  const auto annotations = by_video(read_annotations(path_in(feat_dir, "annotations.csv")));
  const auto split = pipeline::split_subjects(videos, cfg.eval.test_fraction, cfg.eval.val_fraction, cfg.train.seed);
  std::vector<training::VideoSample> train_set, val_set;
  for (const auto& v : videos) {
    const auto role = split.at(v.subject);
    if (role == pipeline::Role::test) continue;
    auto f = facegraph::read_features(pipeline::feature_path(feat_dir, v.id));
    require(f.frames == v.frames, ErrorKind::data, "feature file of " + v.id + " has the wrong frame count");
    auto it = annotations.find(v.id);
    auto s = training::make_sample(v.id, v.subject, std::move(f), it == annotations.end() ? std::vector<Annotation>{}
                                                                                            : it->second,
                                   cfg.train.label_radius);
    (role == pipeline::Role::train ? train_set : val_set).push_back(std::move(s));
  }
  ensure_dir(out);
  config::write_run_config(path_in(out, "config.ini"), cfg);
  pipeline::write_split(path_in(out, "split.csv"), videos, split);
  spotformer::SpotFormer model(cfg.model_config());
  std::vector<training::EpochLog> log;
  training::TrainCallbacks cb;
  cb.on_epoch = [&](const training::EpochLog& e, bool improved) {
    log.push_back(e);
    training::write_loss_log(path_in(out, "loss.csv"), log);
    if (improved) spotformer::save_checkpoint(path_in(out, "best.ckpt"), model);
    progress("epoch " + std::to_string(e.epoch) + " cls=" + config::detail::fmt(e.cls) +
             " con=" + config::detail::fmt(e.con) + " total=" + config::detail::fmt(e.total) +
             " val=" + config::detail::fmt(e.validation) + (improved ? " *" : ""));
  };
  training::train(model, train_set, val_set, cfg.train, cb);
  spotformer::save_checkpoint(path_in(out, "final.ckpt"), model);
  std::cout << "epochs=" << log.size() << " final_total=" << config::detail::fmt(log.back().total) << '\n';
  return ok;
}

// ---------------------------------------------------------------- infer

std::string default_split(const std::string& checkpoint) {
  const auto p = fs::path(checkpoint).parent_path() / "split.csv";
  return fs::exists(p) ? p.string() : std::string();
}

int cmd_infer(const std::string& checkpoint, const std::string& feat_dir, const std::string& out,
              std::string split_path, std::string subset) {
  if (split_path.empty()) split_path = default_split(checkpoint);
  if (subset.empty()) subset = split_path.empty() ? "all" : "test";
  auto model = spotformer::load_checkpoint(checkpoint);
  const auto videos = pipeline::read_videos(path_in(feat_dir, "videos.csv"));
  const auto keep = select_videos(videos, split_path, subset);
  std::vector<std::pair<std::string, postproc::ProbMap>> maps;
  for (const auto& v : videos) {
    if (!keep.count(v.id)) continue;
    const auto f = facegraph::read_features(pipeline::feature_path(feat_dir, v.id));
    maps.emplace_back(v.id, pipeline::infer_video(model, f).probs);
  }
  postproc::write_probabilities(out, maps);
  std::ofstream echo(out + ".model.txt");
  echo << spotformer::format_model_config(model.config());
  std::cout << "videos=" << maps.size() << '\n';
  return ok;
}

// ---------------------------------------------------------------- spot

int cmd_spot(const ConfigOptions& co, const std::string& probs_path, const std::string& out,
             const std::string& train_annotations) {
  const auto cfg = co.load();
  std::vector<Annotation> ann;
  if (!train_annotations.empty()) ann = read_annotations(train_annotations);
  const auto scfg = cfg.spotting_config(train_annotations.empty() ? nullptr : &ann);
  std::vector<postproc::Proposal> all;
  for (const auto& [video, map] : postproc::read_probabilities(probs_path)) {
    const auto p = postproc::spot_video(video, map, scfg);
    all.insert(all.end(), p.begin(), p.end());
  }
  postproc::write_proposals(out, all);
  config::write_run_config(out + ".config.ini", cfg);
  std::cout << "proposals=" << all.size() << '\n';
  return ok;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const std::string& proposals_path, const std::string& annotations_path, const std::string& split_path,
             const std::string& subset, double iou, const std::string& out) {
  const auto proposals = postproc::read_proposals(proposals_path);
  auto annotations = read_annotations(annotations_path);
  if (!split_path.empty()) {
    std::set<std::string> keep;
    for (const auto& [video, role] : pipeline::read_split(split_path))
      if (subset == "all" || subset == pipeline::to_string(role)) keep.insert(video);
    annotations = pipeline::annotations_for(annotations, keep);
  }
  const auto m = evaluation::match(proposals, annotations, iou);
  std::cout << evaluation::format_table(m);
  if (!out.empty()) evaluation::write_metrics_csv(out, m);
  return ok;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const ConfigOptions& co) {
  auto cfg = co.load();
  const auto mcfg = cfg.model_config();
  spotformer::SpotFormer model(mcfg);
  const std::size_t b = cfg.train.batch_size, w = mcfg.window, r = mcfg.rois();
  std::mt19937_64 rng(cfg.train.seed);
  std::normal_distribution<double> normal(0.0, 0.5);
  tensor::Tensor clips({b, w, r, 2});
  for (auto& x : clips.mutable_values()) x = normal(rng);
  tensor::Tensor targets({b, spotformer::kChannels});
  std::bernoulli_distribution coin(0.3);
  for (auto& x : targets.mutable_values()) x = coin(rng) ? 1.0 : 0.0;
  std::vector<int> classes(b);
  for (std::size_t i = 0; i < b; ++i) classes[i] = static_cast<int>(i % 2);
  const training::Batch batch{clips, targets, classes};
  const auto report = tensor::finite_diff_check(
      [&] { return training::batch_loss(model, batch, cfg.train.loss, tensor::NormMode::train).total; },
      model.parameters());
  const bool pass = report.max_rel_error < 1e-4;
  std::cout << "max_rel_error=" << report.max_rel_error << " worst=" << report.worst_param << '['
            << report.worst_index << "] coordinates=" << report.coordinates << " result=" << (pass ? "PASS" : "FAIL")
            << '\n';
  return pass ? ok : check_failed;
}

// ---------------------------------------------------------------- sweeps

template <class Apply>
int run_sweep(const ConfigOptions& co, const std::string& out, const std::string& column,
              const std::vector<std::string>& values, Apply&& apply) {
  const auto base = co.load();
  ensure_dir(out);
  config::write_run_config(path_in(out, "config.ini"), base);
  const auto corpus = synth::generate(base.corpus);
  const synth::SyntheticFlowProvider provider(corpus);
  const std::string csv = path_in(out, "sweep.csv");
  std::ofstream table(csv);
  require(static_cast<bool>(table), ErrorKind::missing_file, "cannot write " + csv);
  table << column << ",micro_f1,macro_f1,overall_f1\n";
  for (const auto& v : values) {
    auto cfg = base;
    apply(cfg, v);
    cfg.validate();
    progress(column + "=" + v);
    const auto r = pipeline::run_experiment(cfg, corpus, provider, progress);
    const auto& m = r.metrics;
    table << v << ',' << m.of(ExpressionType::micro).f1() << ',' << m.of(ExpressionType::macro).f1() << ','
          << m.overall().f1() << '\n'
          << std::flush;
    std::cout << column << '=' << v << " micro_f1=" << m.of(ExpressionType::micro).f1()
              << " macro_f1=" << m.of(ExpressionType::macro).f1() << " overall_f1=" << m.overall().f1() << '\n';
  }
  return ok;
}

// ---------------------------------------------------------------- export-embeddings

int cmd_export(const std::string& checkpoint, const std::string& feat_dir, const std::string& out,
               std::string split_path, std::string subset, std::size_t stride, std::size_t radius) {
  require(stride > 0, ErrorKind::invalid_argument, "--stride must be positive");
  if (split_path.empty()) split_path = default_split(checkpoint);
  if (subset.empty()) subset = split_path.empty() ? "all" : "test";
  auto model = spotformer::load_checkpoint(checkpoint);
  const auto videos = pipeline::read_videos(path_in(feat_dir, "videos.csv"));
  const auto annotations = by_video(read_annotations(path_in(feat_dir, "annotations.csv")));
  const auto keep = select_videos(videos, split_path, subset);
  std::ofstream os(out);
  require(static_cast<bool>(os), ErrorKind::missing_file, "cannot write " + out);
  os.precision(9);
  os << "video_id,frame,label";
  for (std::size_t k = 0; k < model.config().embed_dim; ++k) os << ",z" << k;
  os << '\n';
  std::size_t rows = 0;
  for (const auto& v : videos) {
    if (!keep.count(v.id)) continue;
    const auto f = facegraph::read_features(pipeline::feature_path(feat_dir, v.id));
    auto it = annotations.find(v.id);
    const auto labels =
        training::derive_labels(it == annotations.end() ? std::vector<Annotation>{} : it->second, f.frames, radius);
    const auto inf = pipeline::infer_video(model, f, true);
    for (std::size_t i = 0; i < f.frames; i += stride) {
      os << v.id << ',' << i << ',' << training::to_string(labels.classes[i]);
      for (double z : inf.embeddings[i]) os << ',' << z;
      os << '\n';
      ++rows;
    }
  }
  require(static_cast<bool>(os), ErrorKind::missing_file, "write failed: " + out);
  std::cout << "rows=" << rows << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spotkit: facial expression spotting toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "spotkit 1.0");

  ConfigOptions synth_co, extract_co, train_co, spot_co, grad_co, sweepw_co, sweepl_co;
  std::string out, corpus_dir, feat_dir, checkpoint, probs, proposals, annotations, split_path, subset,
      train_annotations;
  std::size_t flow_videos = 0, stride = 1, radius = 2;
  double iou = 0.5;
  std::vector<std::size_t> windows{9, 11, 15, 17, 19, 21, 25};
  std::vector<double> lambdas{0, 0.001, 0.003, 0.005, 0.008, 0.01, 0.03, 0.05};

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus (annotations, video list, optional flow files)");
  synth_co.add_to(synth);
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--flow-videos", flow_videos, "also write SWMF flow files for the first N videos");

  auto* extract = app.add_subcommand("extract", "compute SW-MRO features for every video of a corpus");
  extract_co.add_to(extract);
  extract->add_option("--corpus", corpus_dir, "corpus directory written by synth")->required();
  extract->add_option("--out", out, "feature directory")->required();

  auto* train = app.add_subcommand("train", "train a model on the training subjects of a feature directory");
  train_co.add_to(train);
  train->add_option("--features", feat_dir, "feature directory written by extract")->required();
  train->add_option("--out", out, "model directory")->required();

  auto* infer = app.add_subcommand("infer", "write per-frame probabilities");
  infer->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  infer->add_option("--features", feat_dir, "feature directory")->required();
  infer->add_option("--out", out, "probability CSV")->required();
  infer->add_option("--split", split_path, "split CSV (default: split.csv next to the checkpoint)");
  infer->add_option("--subset", subset, "train, val, test or all (default: test when a split is known)");

  auto* spot = app.add_subcommand("spot", "turn probabilities into expression proposals");
  spot_co.add_to(spot);
  spot->add_option("--probs", probs, "probability CSV")->required();
  spot->add_option("--out", out, "proposal CSV")->required();
  spot->add_option("--train-annotations", train_annotations, "derive durations from these annotations");

  auto* eval = app.add_subcommand("eval", "score proposals against annotations");
  eval->add_option("--proposals", proposals, "proposal CSV")->required();
  eval->add_option("--annotations", annotations, "annotation CSV")->required();
  eval->add_option("--split", split_path, "restrict ground truth to one role of this split CSV");
  eval->add_option("--subset", subset, "role used with --split (default test)");
  eval->add_option("--iou", iou, "IoU threshold")->capture_default_str();
  eval->add_option("--out", out, "metrics CSV");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the training loss gradient");
  grad_co.add_to(grad);

  auto* sweepw = app.add_subcommand("sweep-window", "train and score one model per window length");
  sweepw_co.add_to(sweepw);
  sweepw->add_option("--out", out, "output directory")->required();
  sweepw->add_option("--windows", windows, "window lengths")->capture_default_str();

  auto* sweepl = app.add_subcommand("sweep-lambda", "train and score one model per contrastive weight");
  sweepl_co.add_to(sweepl);
  sweepl->add_option("--out", out, "output directory")->required();
  sweepl->add_option("--lambdas", lambdas, "contrastive weights")->capture_default_str();

  auto* emb = app.add_subcommand("export-embeddings", "dump pre-head features with frame classes");
  emb->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  emb->add_option("--features", feat_dir, "feature directory")->required();
  emb->add_option("--out", out, "embedding CSV")->required();
  emb->add_option("--split", split_path, "split CSV (default: split.csv next to the checkpoint)");
  emb->add_option("--subset", subset, "train, val, test or all");
  emb->add_option("--stride", stride, "keep every k-th frame")->capture_default_str();
  emb->add_option("--label-radius", radius, "label radius")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: code=usage message=" << e.what() << '\n';
    return usage;
  }

  try {
    if (*synth) return cmd_synth(synth_co, out, flow_videos);
    if (*extract) return cmd_extract(extract_co, corpus_dir, out);
    if (*train) return cmd_train(train_co, feat_dir, out);
    if (*infer) return cmd_infer(checkpoint, feat_dir, out, split_path, subset);
    if (*spot) return cmd_spot(spot_co, probs, out, train_annotations);
    if (*eval) return cmd_eval(proposals, annotations, split_path, subset.empty() ? "test" : subset, iou, out);
    if (*grad) return cmd_gradcheck(grad_co);
    if (*sweepw) {
      std::vector<std::string> vals;
      for (auto w : windows) vals.push_back(std::to_string(w));
      return run_sweep(sweepw_co, out, "window", vals,
                       [](config::RunConfig& c, const std::string& v) { config::apply(c, "features", "window", v); });
    }
    if (*sweepl) {
      std::vector<std::string> vals;
      for (auto l : lambdas) vals.push_back(config::detail::fmt(l));
      return run_sweep(sweepl_co, out, "lambda", vals,
                       [](config::RunConfig& c, const std::string& v) { config::apply(c, "train", "lambda", v); });
    }
    if (*emb) return cmd_export(checkpoint, feat_dir, out, split_path, subset, stride, radius);
  } catch (const Error& e) {
    std::cerr << "error: code=" << to_string(e.kind()) << " message=" << one_line(e.what()) << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: code=internal message=" << e.what() << '\n';
    return failure;
  }
  return failure;
}
