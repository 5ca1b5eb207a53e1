#include <gtest/gtest.h>

#include <fstream>
#include <optional>
#include <sstream>

#include "spotkit/config.hpp"
#include "spotkit/pipeline.hpp"
#include "support.hpp"

using namespace spotkit;
using namespace spotkit::config;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in);
}

std::optional<ErrorKind> kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace

TEST(Config, DefaultsAreValid) {
  const RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.features.window, 17u);
  EXPECT_EQ(c.train.batch_size, 512u);
  EXPECT_EQ(c.train.epochs, 100u);
  EXPECT_EQ(c.train.optimizer.lr, 2e-4);
  EXPECT_EQ(c.train.optimizer.beta1, 0.7);
  EXPECT_EQ(c.train.optimizer.beta2, 0.9);
  EXPECT_EQ(c.train.loss.tau, 0.5);
  EXPECT_EQ(c.train.loss.lambda, 0.005);
  EXPECT_EQ(c.features.alignment, facegraph::Alignment::subtract);
  EXPECT_EQ(c.model_config().rois(), 12u);
}

TEST(Config, ParsesSectionsAndKeys) {
  const auto c = parse(
      "[corpus]\nsubjects = 4\ngraph = reduced:2\nfootprint_falloff = 0\n"
      "[features]\nwindow = 9\nmode = adjacent\nalignment = shift\n"
      "[model]\nembed_dim = 8\nheads = 2\nvariant = paral_st\n"
      "[train]\nlr = 0.001\ncontrastive_mean = false\n"
      "[spotting]\napex_threshold = 0.3\n");
  EXPECT_EQ(c.corpus.subjects, 4u);
  EXPECT_EQ(c.corpus.graph.rois.size(), 6u);
  EXPECT_EQ(c.corpus.footprint_falloff, 0.0);
  EXPECT_EQ(c.features.window, 9u);
  EXPECT_EQ(c.features.mode, facegraph::FeatureMode::adjacent);
  EXPECT_EQ(c.features.alignment, facegraph::Alignment::shift);
  EXPECT_EQ(c.model.variant, spotformer::Variant::paral_st);
  EXPECT_EQ(c.train.optimizer.lr, 0.001);
  EXPECT_FALSE(c.train.loss.contrastive_mean);
  EXPECT_EQ(c.spotting.apex_threshold, 0.3);
  const auto m = c.model_config();
  EXPECT_EQ(m.window, 9u);
  EXPECT_EQ(m.rois(), 6u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_EQ(kind_of([] { parse("[corpus]\nsubjectz = 4\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[nowhere]\nx = 1\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[corpus]\nsubjects = four\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[features]\nwindow = 8\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[features]\nalignment = rotate\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[model]\nembed_dim = 10\nheads = 3\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[train]\ntau = 0\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[train]\nalpha = 1\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[corpus]\nfootprint_falloff = -1\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[corpus]\ngraph = reduced:x\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("[train]\ncontrastive_mean = maybe\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { parse("loose = 1\n"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { load_run_config("/nonexistent/run.cfg"); }), ErrorKind::missing_file);
}

TEST(Config, EchoRoundTrip) {
  auto c = parse("[corpus]\ngraph = reduced:3\nflow_noise = 0.123456789\n[train]\nlambda = 0.01\n");
  c.set_seed(42);
  const std::string echo = format_run_config(c);
  const auto back = parse(echo);
  EXPECT_EQ(format_run_config(back), echo);
  EXPECT_EQ(back.corpus.flow_noise, 0.123456789);
  EXPECT_EQ(back.corpus.graph.rois.size(), 9u);
  EXPECT_EQ(back.corpus.seed, 42u);
  EXPECT_EQ(back.model.seed, 42u);
  EXPECT_EQ(back.train.seed, 42u);
  for (const char* key : {"[corpus]", "[features]", "[model]", "[train]", "[spotting]", "[eval]", "alignment = subtract",
                          "footprint_falloff = 6"})
    EXPECT_NE(echo.find(key), std::string::npos) << key;
  testsupport::TempDir dir("config");
  write_run_config(dir / "run.cfg", c);
  EXPECT_EQ(format_run_config(load_run_config(dir / "run.cfg")), echo);
}

TEST(Config, OverridesApplyInOrder) {
  RunConfig c;
  apply(c, "train", "epochs", "3");
  apply(c, "train", "epochs", "5");
  apply(c, "corpus", "graph", "reduced:1");
  EXPECT_EQ(c.train.epochs, 5u);
  EXPECT_EQ(c.corpus.graph.rois.size(), 3u);
  EXPECT_THROW(apply(c, "train", "nope", "1"), Error);
}

TEST(Config, GraphFromFile) {
  testsupport::TempDir dir("graph");
  {
    std::ofstream out(dir / "g.txt");
    out << facegraph::format_graph(facegraph::reduced_graph(4));
  }
  EXPECT_EQ(resolve_graph(dir / "g.txt").rois.size(), 12u);
  EXPECT_THROW(resolve_graph(dir / "none.txt"), Error);
}

TEST(Config, SpottingDurations) {
  RunConfig c;
  const auto s = c.spotting_config();
  EXPECT_DOUBLE_EQ(s.of(ExpressionType::micro).mean, 11.5);
  EXPECT_EQ(s.of(ExpressionType::micro).min, 8u);
  EXPECT_DOUBLE_EQ(s.of(ExpressionType::macro).mean, 26.0);
  EXPECT_EQ(s.of(ExpressionType::macro).min, 16u);
  c.spotting.k_micro = 9;
  c.spotting.j_micro = 4;
  EXPECT_DOUBLE_EQ(c.spotting_config().of(ExpressionType::micro).mean, 9.0);
  EXPECT_EQ(c.spotting_config().of(ExpressionType::micro).min, 4u);
  // files source derives them from training annotations
  c = RunConfig{};
  c.features.source = "files";
  const std::vector<Annotation> anns{{"v", "s", ExpressionType::micro, 0, 2, 5},
                                     {"v", "s", ExpressionType::macro, 10, 20, 29}};
  const auto f = c.spotting_config(&anns);
  EXPECT_DOUBLE_EQ(f.of(ExpressionType::micro).mean, 6.0);
  EXPECT_EQ(f.of(ExpressionType::macro).min, 20u);
}

TEST(Split, FractionsAndDeterminism) {
  std::vector<pipeline::VideoInfo> videos;
  for (int s = 0; s < 10; ++s)
    for (int v = 0; v < 3; ++v) videos.push_back({"s" + std::to_string(s) + "_v" + std::to_string(v), "s" + std::to_string(s), 100});
  const auto a = pipeline::split_subjects(videos, 0.2, 0.1, 7);
  std::map<pipeline::Role, int> count;
  for (const auto& [s, r] : a) ++count[r];
  EXPECT_EQ(count[pipeline::Role::test], 2);  // ⌈0.2·10⌉
  EXPECT_EQ(count[pipeline::Role::val], 0);   // ⌊0.1·8⌋
  EXPECT_EQ(count[pipeline::Role::train], 8);
  EXPECT_EQ(pipeline::split_subjects(videos, 0.2, 0.1, 7), a);
  const auto b = pipeline::split_subjects(videos, 0.3, 0.3, 7);
  count.clear();
  for (const auto& [s, r] : b) ++count[r];
  EXPECT_EQ(count[pipeline::Role::test], 3);
  EXPECT_EQ(count[pipeline::Role::val], 2);
  EXPECT_THROW(pipeline::split_subjects({videos[0]}, 0.2, 0.1, 1), Error);
  testsupport::TempDir dir("split");
  pipeline::write_split(dir / "split.csv", videos, a);
  const auto roles = pipeline::read_split(dir / "split.csv");
  ASSERT_EQ(roles.size(), videos.size());
  for (const auto& v : videos) EXPECT_EQ(roles.at(v.id), a.at(v.subject));
  pipeline::write_videos(dir / "videos.csv", videos);
  const auto back = pipeline::read_videos(dir / "videos.csv");
  ASSERT_EQ(back.size(), videos.size());
  EXPECT_EQ(back[4].id, videos[4].id);
  EXPECT_EQ(back[4].frames, 100u);
}
