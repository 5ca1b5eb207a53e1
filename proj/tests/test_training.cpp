#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "spotkit/gradcheck.hpp"
#include "spotkit/synthcorpus.hpp"
#include "spotkit/training.hpp"
#include "support.hpp"

using namespace spotkit;
using namespace spotkit::training;
using spotformer::channel;
using tensor::Tensor;

namespace {

constexpr auto ME = ExpressionType::micro;
constexpr auto MaE = ExpressionType::macro;

Annotation ann(ExpressionType t, long on, long ap, long off) { return {"v", "s", t, on, ap, off}; }

Tensor random_tensor(tensor::Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_values()) v = n(rng);
  return t;
}

// Direct transcription of the contrastive loss, one anchor at a time.
double supcon_oracle(const Tensor& z, const std::vector<int>& labels, double tau) {
  const std::size_t b = z.dim(0), d = z.dim(1);
  std::vector<std::vector<double>> u(b, std::vector<double>(d));
  for (std::size_t i = 0; i < b; ++i) {
    double n = 0.0;
    for (std::size_t k = 0; k < d; ++k) n += z[i * d + k] * z[i * d + k];
    for (std::size_t k = 0; k < d; ++k) u[i][k] = z[i * d + k] / std::sqrt(n);
  }
  auto dot = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += u[i][k] * u[j][k];
    return s / tau;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < b; ++a)
      if (a != i) denom += std::exp(dot(i, a));
    double acc = 0.0;
    int np = 0;
    for (std::size_t p = 0; p < b; ++p)
      if (p != i && labels[p] == labels[i]) {
        acc += std::log(std::exp(dot(i, p)) / denom);
        ++np;
      }
    if (np > 0) total += -acc / np;
  }
  return total;
}

spotformer::ModelConfig tiny_model() {
  spotformer::ModelConfig c;
  c.embed_dim = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.window = 9;
  c.graph = facegraph::reduced_graph(2);
  return c;
}

// Two short synthetic videos with tiny-model features.
std::vector<VideoSample> small_corpus() {
  synth::CorpusConfig cc;
  cc.subjects = 2;
  cc.videos_per_subject = 1;
  cc.frames = 160;
  cc.event_rate = 1.0;
  cc.graph = facegraph::reduced_graph(2);
  const auto corpus = synth::generate(cc);
  const synth::SyntheticFlowProvider provider(corpus);
  std::vector<VideoSample> out;
  for (const auto& v : corpus.videos) {
    std::vector<Annotation> anns;
    for (const auto& a : corpus.annotations())
      if (a.video_id == v.id) anns.push_back(a);
    out.push_back(make_sample(v.id, v.subject, facegraph::build_swmro(provider, v.id, v.frames, cc.graph, 9), anns, 2));
  }
  return out;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.seed = 3;
  t.optimizer.lr = 2e-3;
  return t;
}

Batch first_batch(const std::vector<VideoSample>& data, std::size_t n) {
  auto w = expression_windows(data, 2);
  w.resize(n / 2);
  const auto neutral = neutral_windows(data, 2);
  w.insert(w.end(), neutral.begin(), neutral.begin() + static_cast<std::ptrdiff_t>(n - n / 2));
  return make_batch(data, w);
}

std::vector<double> flat_grads(const spotformer::SpotFormer& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) {
    const auto g = p.tensor.grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

std::vector<double> grads_of(spotformer::SpotFormer& m, const std::function<Tensor()>& loss) {
  for (auto& p : m.parameters()) p.tensor.zero_grad();
  tensor::Tape tape;
  Tensor l;
  {
    tensor::TapeScope scope(tape);
    l = loss();
  }
  tape.backward(l);
  return flat_grads(m);
}

}  // namespace

TEST(Labels, NoAnnotationsIsAllNeutral) {
  const auto l = derive_labels({}, 20);
  ASSERT_EQ(l.frames(), 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(l.classes[i], FrameClass::neutral);
    for (std::size_t c = 0; c < kChannels; ++c) {
      const bool norm = c == channel(Kind::norm, ME) || c == channel(Kind::norm, MaE);
      EXPECT_EQ(l.targets[i][c], norm ? 1.0 : 0.0);
    }
  }
}

TEST(Labels, SingleMicroExpression) {
  const auto l = derive_labels({ann(ME, 10, 12, 14)}, 30, 2);
  for (std::size_t i = 0; i < 30; ++i) {
    const auto& t = l.targets[i];
    EXPECT_EQ(t[channel(Kind::onset, ME)], (i >= 8 && i <= 12) ? 1.0 : 0.0) << i;
    EXPECT_EQ(t[channel(Kind::apex, ME)], (i >= 10 && i <= 14) ? 1.0 : 0.0) << i;
    EXPECT_EQ(t[channel(Kind::offset, ME)], (i >= 12 && i <= 16) ? 1.0 : 0.0) << i;
    const bool inside = i >= 10 && i <= 14;
    EXPECT_EQ(t[channel(Kind::exp, ME)], inside ? 1.0 : 0.0) << i;
    EXPECT_EQ(t[channel(Kind::norm, ME)], inside ? 0.0 : 1.0) << i;
    EXPECT_EQ(t[channel(Kind::exp, MaE)], 0.0);
    EXPECT_EQ(l.classes[i], inside ? FrameClass::micro : FrameClass::neutral);
  }
}

TEST(Labels, MicroWinsOnOverlap) {
  const auto l = derive_labels({ann(MaE, 5, 15, 30), ann(ME, 20, 22, 25)}, 40);
  EXPECT_EQ(l.classes[10], FrameClass::macro);
  for (std::size_t i = 20; i <= 25; ++i) EXPECT_EQ(l.classes[i], FrameClass::micro);
  EXPECT_EQ(l.classes[28], FrameClass::macro);
  const auto swapped = derive_labels({ann(ME, 20, 22, 25), ann(MaE, 5, 15, 30)}, 40);
  EXPECT_EQ(swapped.classes, l.classes);
}

TEST(Labels, ExpAndNormExclusive) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Annotation> anns;
    for (int k = 0; k < 4; ++k) {
      const long on = static_cast<long>(rng() % 80), len = 2 + static_cast<long>(rng() % 15);
      anns.push_back(ann(rng() % 2 ? ME : MaE, on, on + len / 2, on + len));
    }
    const auto l = derive_labels(anns, 100);
    for (std::size_t i = 0; i < 100; ++i) {
      const auto& t = l.targets[i];
      const bool any_exp = t[channel(Kind::exp, ME)] + t[channel(Kind::exp, MaE)] > 0;
      EXPECT_NE(any_exp, t[channel(Kind::norm, ME)] > 0);
      EXPECT_EQ(t[channel(Kind::norm, ME)], t[channel(Kind::norm, MaE)]);
    }
    // order independence and idempotence
    auto rev = anns;
    std::reverse(rev.begin(), rev.end());
    const auto r = derive_labels(rev, 100);
    EXPECT_EQ(r.targets, l.targets);
    EXPECT_EQ(r.classes, l.classes);
    auto twice = anns;
    twice.insert(twice.end(), anns.begin(), anns.end());
    EXPECT_EQ(derive_labels(twice, 100).targets, l.targets);
  }
}

TEST(Labels, MalformedRejected) {
  EXPECT_THROW(derive_labels({ann(ME, 10, 9, 12)}, 30), Error);
  EXPECT_THROW(derive_labels({ann(ME, 10, 11, 12)}, 12), Error);
}

TEST(Focal, HandComputedValues) {
  const auto one = [](double p, double y, double a = 0.25, double g = 2.0) {
    return focal_loss(Tensor({1}, std::vector<double>{p}), Tensor({1}, std::vector<double>{y}), a, g).item();
  };
  EXPECT_NEAR(one(0.9, 1.0), 0.25 * 0.01 * -std::log(0.9), 1e-15);
  EXPECT_NEAR(one(0.9, 1.0), 2.634e-4, 1e-7);
  EXPECT_NEAR(one(1.0 - 1e-7, 1.0), 0.0, 1e-12);
  for (double p : {0.1, 0.4, 0.77})
    for (double y : {0.0, 1.0}) {
      const double ce = -(y * std::log(p) + (1 - y) * std::log(1 - p));
      EXPECT_NEAR(one(p, y, 0.5, 0.0), 0.5 * ce, 1e-14);
    }
  // exact 0 and 1 are clamped rather than producing infinities
  EXPECT_TRUE(std::isfinite(one(0.0, 1.0)));
  EXPECT_TRUE(std::isfinite(one(1.0, 0.0)));
}

TEST(Focal, MeanOverElements) {
  const Tensor p({2, 2}, std::vector<double>{0.9, 0.2, 0.6, 0.3});
  const Tensor y({2, 2}, std::vector<double>{1, 0, 1, 0});
  double s = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double q = p[i];
    s += y[i] > 0 ? -0.25 * (1 - q) * (1 - q) * std::log(q) : -0.75 * q * q * std::log(1 - q);
  }
  EXPECT_NEAR(focal_loss(p, y).item(), s / 4, 1e-15);
  EXPECT_THROW(focal_loss(p, Tensor({4})), Error);
}

TEST(Focal, MonotoneAndNonNegative) {
  double prev_pos = 1e300, prev_neg = -1.0;
  for (int k = 1; k < 100; ++k) {
    const double p = k / 100.0;
    const double pos = focal_loss(Tensor({1}, std::vector<double>{p}), Tensor({1}, std::vector<double>{1.0})).item();
    const double neg = focal_loss(Tensor({1}, std::vector<double>{p}), Tensor({1}, std::vector<double>{0.0})).item();
    EXPECT_GE(pos, 0.0);
    EXPECT_GE(neg, 0.0);
    EXPECT_LT(pos, prev_pos);
    EXPECT_GT(neg, prev_neg);
    prev_pos = pos;
    prev_neg = neg;
  }
}

TEST(Focal, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Tensor p({3, 4});
  for (auto& v : p.mutable_values()) v = u(rng);
  Tensor y({3, 4});
  for (std::size_t i = 0; i < y.size(); ++i) y.mutable_values()[i] = static_cast<double>(i % 3 == 0);
  for (double gamma : {0.0, 2.0}) {
    const auto rep = tensor::finite_diff_check([&] { return focal_loss(p, y, 0.25, gamma); }, {{"p", p}}, 1e-6);
    EXPECT_LT(rep.max_rel_error, 1e-6) << gamma;
  }
}

TEST(SupCon, MatchesDoubleLoopOracle) {
  std::mt19937_64 rng(11);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor z = random_tensor({6, 5}, rng);
    for (double tau : {0.5, 0.1, 2.0}) EXPECT_NEAR(supcon_loss(z, labels, tau).item(), supcon_oracle(z, labels, tau), 1e-9);
  }
  // an anchor without positives is skipped
  const Tensor z = random_tensor({5, 3}, rng);
  const std::vector<int> lone{0, 0, 1, 1, 2};
  EXPECT_NEAR(supcon_loss(z, lone).item(), supcon_oracle(z, lone, 0.5), 1e-9);
}

TEST(SupCon, TwoSampleCases) {
  const Tensor same({2, 3}, std::vector<double>{1, 2, 3, 1, 2, 3});
  EXPECT_NEAR(supcon_loss(same, {1, 1}).item(), 0.0, 1e-12);
  const Tensor diff({2, 3}, std::vector<double>{1, 0, 0, 0, 1, 0});
  EXPECT_EQ(supcon_loss(diff, {0, 1}).item(), 0.0);
  EXPECT_THROW(supcon_loss(Tensor({1, 3}), {0}), Error);
  EXPECT_THROW(supcon_loss(Tensor({3, 3}), {0, 1}), Error);
}

TEST(SupCon, PermutationAndRotationInvariant) {
  std::mt19937_64 rng(12);
  const std::vector<int> labels{0, 2, 1, 0, 1, 2, 2, 0};
  const Tensor z = random_tensor({8, 4}, rng);
  const double base = supcon_loss(z, labels).item();
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor zp({8, 4});
  std::vector<int> lp(8);
  for (std::size_t i = 0; i < 8; ++i) {
    lp[i] = labels[perm[i]];
    for (std::size_t k = 0; k < 4; ++k) zp.mutable_values()[i * 4 + k] = z[perm[i] * 4 + k];
  }
  EXPECT_NEAR(supcon_loss(zp, lp).item(), base, 1e-9);
  // rotations in the (0,1) and (2,3) planes
  const double a = 0.7, b = -1.9;
  Tensor zr({8, 4});
  for (std::size_t i = 0; i < 8; ++i) {
    const double* r = &z.values()[i * 4];
    auto out = zr.mutable_values().subspan(i * 4, 4);
    out[0] = std::cos(a) * r[0] - std::sin(a) * r[1];
    out[1] = std::sin(a) * r[0] + std::cos(a) * r[1];
    out[2] = std::cos(b) * r[2] - std::sin(b) * r[3];
    out[3] = std::sin(b) * r[2] + std::cos(b) * r[3];
  }
  EXPECT_NEAR(supcon_loss(zr, labels).item(), base, 1e-9);
}

TEST(SupCon, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  const Tensor z = random_tensor({6, 4}, rng);
  const auto rep = tensor::finite_diff_check([&] { return supcon_loss(z, {0, 1, 0, 1, 2, 2}, 0.5); }, {{"z", z}}, 1e-6);
  EXPECT_LT(rep.max_rel_error, 1e-5);
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_NEAR(total_loss(Tensor::scalar(0.1), Tensor::scalar(2.0), 0.005).item(), 0.11, 1e-15);
  EXPECT_EQ(total_loss(Tensor::scalar(0.1), Tensor::scalar(2.0), 0.0).item(), 0.1);
  EXPECT_THROW(total_loss(Tensor::scalar(0.1), Tensor::scalar(2.0), -1.0), Error);
}

TEST(TotalLoss, GradientIsLinear) {
  const auto data = small_corpus();
  const Batch b = first_batch(data, 8);
  spotformer::SpotFormer m(tiny_model());
  LossConfig lc;
  lc.lambda = 0.3;
  const auto cls = grads_of(m, [&] { return batch_loss(m, b, lc, tensor::NormMode::train).cls; });
  const auto con = grads_of(m, [&] { return batch_loss(m, b, lc, tensor::NormMode::train).con; });
  const auto tot = grads_of(m, [&] { return batch_loss(m, b, lc, tensor::NormMode::train).total; });
  ASSERT_EQ(cls.size(), tot.size());
  double worst = 0.0, con_norm = 0.0;
  for (std::size_t i = 0; i < tot.size(); ++i) {
    worst = std::max(worst, std::abs(tot[i] - (cls[i] + lc.lambda * con[i])));
    con_norm += con[i] * con[i];
  }
  EXPECT_LT(worst, 1e-10);
  EXPECT_GT(con_norm, 0.0);
}

TEST(AdamW, OneStepOnSquare) {
  Tensor x({1}, std::vector<double>{1.0});
  x.set_requires_grad(true);
  AdamWConfig c;
  c.lr = 0.1;
  AdamW opt({{"x", x}}, c);
  // reference scalar AdamW
  double ref = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    opt.zero_grad();
    tensor::Tape tape;
    Tensor loss;
    {
      tensor::TapeScope scope(tape);
      loss = tensor::sum(tensor::mul(x, x));
    }
    tape.backward(loss);
    opt.step();
    const double g = 2.0 * ref;
    ref *= 1.0 - c.lr * c.weight_decay;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t)), vh = v / (1 - std::pow(c.beta2, t));
    ref -= c.lr * mh / (std::sqrt(vh) + c.eps);
    EXPECT_NEAR(x[0], ref, 1e-15) << t;
  }
  EXPECT_EQ(opt.steps(), 3u);
  EXPECT_EQ(opt.first_moment(0).size(), 1u);
  EXPECT_EQ(opt.second_moment(0).size(), 1u);
}

TEST(AdamW, FirstStepByHand) {
  Tensor x({1}, std::vector<double>{1.0});
  x.set_requires_grad(true);
  AdamWConfig c;
  c.lr = 0.1;
  AdamW opt({{"x", x}}, c);
  x.impl()->ensure_grad()[0] = 2.0;
  opt.step();
  EXPECT_NEAR(x[0], 0.999 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
}

TEST(AdamW, ZeroGradientAndDecayOnly) {
  std::mt19937_64 rng(5);
  Tensor w = random_tensor({3, 4}, rng);
  w.set_requires_grad(true);
  const std::vector<double> before(w.values().begin(), w.values().end());
  AdamWConfig c;
  c.weight_decay = 0.0;
  AdamW still({{"w", w}}, c);
  still.zero_grad();
  still.step();
  EXPECT_TRUE(std::equal(before.begin(), before.end(), w.values().begin()));
  c.weight_decay = 0.05;
  c.lr = 0.01;
  AdamW shrink({{"w", w}}, c);
  shrink.zero_grad();
  shrink.step();
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], before[i] * (1 - 0.01 * 0.05), 1e-15);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  Tensor a({2}), b({2});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  AdamW opt({{"alpha", a}, {"block3.fc1.weight", b}}, {});
  opt.zero_grad();
  b.impl()->ensure_grad()[1] = std::nan("");
  try {
    opt.step();
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("block3.fc1.weight"), std::string::npos);
  }
  EXPECT_EQ(opt.steps(), 0u);
  EXPECT_EQ(a[0], 0.0);
}

TEST(AdamW, RejectsBadConfig) {
  AdamWConfig c;
  c.beta1 = 1.0;
  EXPECT_THROW(AdamW({}, c), Error);
  c = {};
  c.lr = 0.0;
  EXPECT_THROW(AdamW({}, c), Error);
}

TEST(Windows, ExpressionAndNeutralPartitionFrames) {
  const auto data = small_corpus();
  const auto e = expression_windows(data, 2), n = neutral_windows(data, 2);
  std::size_t frames = 0;
  for (const auto& s : data) frames += s.labels.frames();
  EXPECT_EQ(e.size() + n.size(), frames);
  EXPECT_FALSE(e.empty());
  for (const auto& w : n) {
    const auto& cls = data[w.video].labels.classes;
    for (std::size_t j = w.frame >= 2 ? w.frame - 2 : 0; j <= std::min(cls.size() - 1, w.frame + 2); ++j)
      EXPECT_EQ(cls[j], FrameClass::neutral);
  }
  TrainConfig cfg;
  cfg.max_windows = 10;
  cfg.neutral_ratio = 2.0;
  std::mt19937_64 rng(1);
  EXPECT_EQ(epoch_windows(e, n, cfg, rng).size(), 30u);
}

TEST(Windows, BatchCarriesFeaturesAndTargets) {
  const auto data = small_corpus();
  const std::vector<WindowRef> refs{{1, 40}, {0, 3}};
  const Batch b = make_batch(data, refs);
  EXPECT_EQ(b.clips.shape(), (tensor::Shape{2, 9, 6, 2}));
  EXPECT_EQ(b.targets.shape(), (tensor::Shape{2, kChannels}));
  const auto src = data[1].features.frame(40);
  for (std::size_t k = 0; k < src.size(); ++k) EXPECT_EQ(b.clips[k], static_cast<double>(src[k]));
  for (std::size_t c = 0; c < kChannels; ++c) EXPECT_EQ(b.targets[kChannels + c], data[0].labels.targets[3][c]);
  EXPECT_EQ(b.classes[0], static_cast<int>(data[1].labels.classes[40]));
}

TEST(Train, LossDecreases) {
  const auto data = small_corpus();
  spotformer::SpotFormer m(tiny_model());
  const auto log = train(m, data, {}, quick_train(5));
  ASSERT_EQ(log.size(), 5u);
  EXPECT_LT(log[4].total, log[0].total);
  EXPECT_LT(log[4].cls, log[0].cls);
  for (const auto& e : log) EXPECT_TRUE(std::isnan(e.validation));
}

TEST(Train, SameSeedSameLog) {
  const auto data = small_corpus();
  spotformer::SpotFormer a(tiny_model()), b(tiny_model());
  const auto la = train(a, data, {data[1]}, quick_train(2));
  const auto lb = train(b, data, {data[1]}, quick_train(2));
  testsupport::TempDir dir("train_log");
  write_loss_log(dir / "a.csv", la);
  write_loss_log(dir / "b.csv", lb);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_EQ(slurp(dir / "a.csv").substr(0, 30), "epoch,cls_loss,con_loss,total\n");
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].total, lb[i].total);
    EXPECT_EQ(la[i].validation, lb[i].validation);
    EXPECT_TRUE(std::isfinite(la[i].validation));
  }
}

TEST(Train, ContrastiveTermChangesWeights) {
  const auto data = small_corpus();
  auto cfg = quick_train(1);
  spotformer::SpotFormer a(tiny_model()), b(tiny_model());
  cfg.loss.lambda = 0.0;
  train(a, data, {}, cfg);
  cfg.loss.lambda = 0.005;
  train(b, data, {}, cfg);
  double diff = 0.0;
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k].tensor.size(); ++i) diff = std::max(diff, std::abs(pa[k].tensor[i] - pb[k].tensor[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Train, RejectsBadInput) {
  spotformer::SpotFormer m(tiny_model());
  EXPECT_THROW(train(m, {}, {}, quick_train(1)), Error);
  auto data = small_corpus();
  data[0].labels.targets.pop_back();
  data[0].labels.classes.pop_back();
  EXPECT_THROW(train(m, data, {}, quick_train(1)), Error);
  auto cfg = quick_train(1);
  cfg.batch_size = 1;
  EXPECT_THROW(train(m, small_corpus(), {}, cfg), Error);
  spotformer::ModelConfig wide = tiny_model();
  wide.window = 17;
  spotformer::SpotFormer w(wide);
  EXPECT_THROW(train(w, small_corpus(), {}, quick_train(1)), Error);
}
