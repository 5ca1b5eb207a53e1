#pragma once

// Frame labels, losses, AdamW and the mini-batch training loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "spotkit/error.hpp"
#include "spotkit/facegraph.hpp"
#include "spotkit/ops.hpp"
#include "spotkit/spotformer.hpp"
#include "spotkit/tensor.hpp"
#include "spotkit/types.hpp"

namespace spotkit::training {

using spotformer::kChannels;
using spotformer::Kind;
using tensor::Shape;
using tensor::Tensor;

/// Contrastive class of a frame.
enum class FrameClass : int { neutral = 0, micro = 1, macro = 2 };

inline const char* to_string(FrameClass c) {
  switch (c) {
    case FrameClass::neutral: return "neutral";
    case FrameClass::micro: return "micro";
    case FrameClass::macro: return "macro";
  }
  return "?";
}

struct FrameLabels {
  std::vector<std::array<double, kChannels>> targets;
  std::vector<FrameClass> classes;

  std::size_t frames() const { return targets.size(); }
};

/// Per-frame targets of one video. Onset/apex/offset channels fire within
/// `radius` frames of the annotated frame; exp covers [onset, offset]; norm
/// marks frames outside every interval. ME wins over MaE for the class.
inline FrameLabels derive_labels(const std::vector<Annotation>& annotations, std::size_t frames, std::size_t radius = 2) {
  FrameLabels out;
  out.targets.assign(frames, {});
  out.classes.assign(frames, FrameClass::neutral);
  std::vector<bool> inside(frames, false);
  for (const auto& a : annotations) {
    validate(a);
    require(static_cast<std::size_t>(a.offset) < frames, ErrorKind::data,
            "annotation of " + a.video_id + " ends at frame " + std::to_string(a.offset) + " beyond the video length " +
                std::to_string(frames));
    auto mark = [&](Kind k, long center) {
      const long lo = std::max(0L, center - static_cast<long>(radius));
      const long hi = std::min(static_cast<long>(frames) - 1, center + static_cast<long>(radius));
      for (long i = lo; i <= hi; ++i) out.targets[i][spotformer::channel(k, a.type)] = 1.0;
    };
    mark(Kind::onset, a.onset);
    mark(Kind::apex, a.apex);
    mark(Kind::offset, a.offset);
    for (long i = a.onset; i <= a.offset; ++i) {
      out.targets[i][spotformer::channel(Kind::exp, a.type)] = 1.0;
      inside[i] = true;
      if (a.type == ExpressionType::micro)
        out.classes[i] = FrameClass::micro;
      else if (out.classes[i] == FrameClass::neutral)
        out.classes[i] = FrameClass::macro;
    }
  }
  for (std::size_t i = 0; i < frames; ++i)
    if (!inside[i]) {
      out.targets[i][spotformer::channel(Kind::norm, ExpressionType::micro)] = 1.0;
      out.targets[i][spotformer::channel(Kind::norm, ExpressionType::macro)] = 1.0;
    }
  return out;
}

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double tau = 0.5;
  double lambda = 0.005;
  /// Divide the summed contrastive loss by the batch size.
  bool contrastive_mean = true;

  void validate() const {
    require(alpha > 0.0 && alpha < 1.0, ErrorKind::config, "loss: alpha must be in (0,1)");
    require(gamma >= 0.0, ErrorKind::config, "loss: gamma must be >= 0");
    require(tau > 0.0, ErrorKind::config, "loss: tau must be > 0");
    require(lambda >= 0.0, ErrorKind::config, "loss: lambda must be >= 0");
  }
};

inline constexpr double kProbClamp = 1e-7;

/// Binary focal loss averaged over every element:
/// −[y·α(1−p)^γ·log p + (1−y)(1−α)·p^γ·log(1−p)], p clamped to [1e-7, 1−1e-7].
inline Tensor focal_loss(const Tensor& p, const Tensor& y, double alpha = 0.25, double gamma = 2.0) {
  require(p.shape() == y.shape(), ErrorKind::shape,
          "focal_loss: probabilities " + tensor::shape_str(p.shape()) + " vs targets " + tensor::shape_str(y.shape()));
  const std::size_t n = p.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    const double t = y[i];
    total -= t * alpha * std::pow(1.0 - q, gamma) * std::log(q) +
             (1.0 - t) * (1.0 - alpha) * std::pow(q, gamma) * std::log(1.0 - q);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  tensor::detail::attach(out, {&p}, [p, y, alpha, gamma, n](tensor::TensorImpl& o) {
    auto* gp = tensor::detail::grad_sink(p);
    if (!gp) return;
    const double g = o.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = p[i];
      if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;
      const double q = raw, t = y[i];
      const double pos = gamma == 0.0 ? 1.0 / q
                                      : -gamma * std::pow(1.0 - q, gamma - 1.0) * std::log(q) +
                                            std::pow(1.0 - q, gamma) / q;
      const double neg = gamma == 0.0 ? -1.0 / (1.0 - q)
                                      : gamma * std::pow(q, gamma - 1.0) * std::log(1.0 - q) -
                                            std::pow(q, gamma) / (1.0 - q);
      (*gp)[i] -= g * (t * alpha * pos + (1.0 - t) * (1.0 - alpha) * neg);
    }
  });
  return out;
}

/// Supervised contrastive loss summed over anchors. Rows of z are
/// L2-normalized first; for anchor i the positives are the other samples with
/// its label and the denominator runs over every j ≠ i. Anchors without
/// positives contribute 0.
inline Tensor supcon_loss(const Tensor& z, const std::vector<int>& labels, double tau = 0.5) {
  require(z.rank() == 2, ErrorKind::shape, "supcon_loss: embeddings must be [B × D]");
  const std::size_t b = z.dim(0);
  require(b >= 2, ErrorKind::invalid_argument, "supcon_loss: batch must hold at least 2 samples");
  require(labels.size() == b, ErrorKind::shape, "supcon_loss: label count does not match the batch");
  require(tau > 0.0, ErrorKind::invalid_argument, "supcon_loss: tau must be > 0");
  const Tensor zn = tensor::l2_normalize_rows(z);
  const Tensor sim = tensor::scale(tensor::matmul(zn, tensor::permute(zn, {1, 0})), 1.0 / tau);
  // softmax over j ≠ i for every row; kept for the adjoint
  std::vector<double> prob(b * b, 0.0);
  std::vector<std::size_t> positives(b, 0);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b; ++j)
      if (j != i) mx = std::max(mx, sim[i * b + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < b; ++j)
      if (j != i) denom += std::exp(sim[i * b + j] - mx);
    const double log_denom = mx + std::log(denom);
    double acc = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      prob[i * b + j] = std::exp(sim[i * b + j] - log_denom);
      if (labels[j] == labels[i]) {
        ++positives[i];
        acc += sim[i * b + j] - log_denom;
      }
    }
    if (positives[i] > 0) total -= acc / static_cast<double>(positives[i]);
  }
  Tensor out = Tensor::scalar(total);
  tensor::detail::attach(out, {&sim}, [sim, labels, prob = std::move(prob), positives = std::move(positives),
                                       b](tensor::TensorImpl& o) {
    auto* gs = tensor::detail::grad_sink(sim);
    if (!gs) return;
    const double g = o.grad[0];
    for (std::size_t i = 0; i < b; ++i) {
      if (positives[i] == 0) continue;
      const double inv = 1.0 / static_cast<double>(positives[i]);
      for (std::size_t j = 0; j < b; ++j) {
        if (j == i) continue;
        const double pos = labels[j] == labels[i] ? inv : 0.0;
        (*gs)[i * b + j] += g * (prob[i * b + j] - pos);
      }
    }
  });
  return out;
}

/// L = L_cls + λ·L_con
inline Tensor total_loss(const Tensor& cls, const Tensor& con, double lambda) {
  require(lambda >= 0.0, ErrorKind::invalid_argument, "total_loss: lambda must be >= 0");
  return tensor::add(cls, tensor::scale(con, lambda));
}

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.7;
  double beta2 = 0.9;
  double weight_decay = 0.01;
  double eps = 1e-8;

  void validate() const {
    require(lr > 0.0, ErrorKind::config, "optimizer: lr must be > 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::config,
            "optimizer: betas must be in [0,1)");
    require(weight_decay >= 0.0 && eps > 0.0, ErrorKind::config, "optimizer: bad weight_decay or eps");
  }
};

/// AdamW with decoupled weight decay: p ← p − lr·wd·p, then the bias-corrected
/// Adam update.
class AdamW {
 public:
  AdamW(std::vector<tensor::NamedTensor> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    // validate every gradient before touching any parameter
    for (const auto& p : params_)
      for (double g : p.tensor.impl()->grad)
        require(std::isfinite(g), ErrorKind::numeric, "non-finite gradient in parameter " + p.name);
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& impl = *params_[k].tensor.impl();
      auto& w = impl.value;
      const auto& g = impl.ensure_grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= config_.lr * config_.weight_decay * w[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        w[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }
  const std::vector<double>& first_moment(std::size_t k) const { return m_.at(k); }
  const std::vector<double>& second_moment(std::size_t k) const { return v_.at(k); }

 private:
  std::vector<tensor::NamedTensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// One video's features with aligned labels.
struct VideoSample {
  std::string video_id;
  std::string subject_id;
  facegraph::SwmroFeatures features;
  FrameLabels labels;
};

inline VideoSample make_sample(std::string video_id, std::string subject_id, facegraph::SwmroFeatures features,
                               const std::vector<Annotation>& annotations, std::size_t radius) {
  VideoSample s{std::move(video_id), std::move(subject_id), std::move(features), {}};
  s.labels = derive_labels(annotations, s.features.frames, radius);
  return s;
}

struct WindowRef {
  std::size_t video = 0;
  std::size_t frame = 0;
};

/// Clips, targets and classes of `refs` as batch tensors.
struct Batch {
  Tensor clips;
  Tensor targets;
  std::vector<int> classes;
};

inline Batch make_batch(const std::vector<VideoSample>& data, std::span<const WindowRef> refs) {
  require(!refs.empty(), ErrorKind::invalid_argument, "make_batch: empty batch");
  const auto& f0 = data[refs[0].video].features;
  const std::size_t w = f0.window, r = f0.rois, per = f0.per_frame();
  std::vector<double> clips(refs.size() * per);
  std::vector<double> targets(refs.size() * kChannels);
  Batch out;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto& s = data[refs[k].video];
    require(s.features.window == w && s.features.rois == r, ErrorKind::data,
            "make_batch: videos disagree on window length or ROI count");
    const auto src = s.features.frame(refs[k].frame);
    std::copy(src.begin(), src.end(), clips.begin() + static_cast<std::ptrdiff_t>(k * per));
    const auto& t = s.labels.targets[refs[k].frame];
    std::copy(t.begin(), t.end(), targets.begin() + static_cast<std::ptrdiff_t>(k * kChannels));
    out.classes.push_back(static_cast<int>(s.labels.classes[refs[k].frame]));
  }
  out.clips = Tensor(Shape{refs.size(), w, r, 2}, std::move(clips));
  out.targets = Tensor(Shape{refs.size(), kChannels}, std::move(targets));
  return out;
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 512;
  std::size_t label_radius = 2;
  /// Neutral windows drawn per expression window.
  double neutral_ratio = 1.0;
  /// Cap on expression windows per epoch (random subset), 0 = all.
  std::size_t max_windows = 0;
  std::uint64_t seed = 1;
  LossConfig loss;
  AdamWConfig optimizer;

  void validate() const {
    require(epochs > 0, ErrorKind::config, "train: epochs must be > 0");
    require(batch_size >= 2, ErrorKind::config, "train: batch_size must be >= 2");
    require(neutral_ratio >= 0.0, ErrorKind::config, "train: neutral_ratio must be >= 0");
    loss.validate();
    optimizer.validate();
  }
};

/// Windows whose centre lies within `radius` frames of an expression interval.
inline std::vector<WindowRef> expression_windows(const std::vector<VideoSample>& data, std::size_t radius) {
  std::vector<WindowRef> out;
  for (std::size_t v = 0; v < data.size(); ++v) {
    const auto& cls = data[v].labels.classes;
    const std::size_t n = cls.size();
    std::vector<bool> near(n, false);
    for (std::size_t i = 0; i < n; ++i)
      if (cls[i] != FrameClass::neutral)
        for (std::size_t j = i >= radius ? i - radius : 0; j <= std::min(n - 1, i + radius); ++j) near[j] = true;
    for (std::size_t i = 0; i < n; ++i)
      if (near[i]) out.push_back({v, i});
  }
  return out;
}

inline std::vector<WindowRef> neutral_windows(const std::vector<VideoSample>& data, std::size_t radius) {
  const auto expr = expression_windows(data, radius);
  std::set<std::pair<std::size_t, std::size_t>> taken;
  for (const auto& w : expr) taken.insert({w.video, w.frame});
  std::vector<WindowRef> out;
  for (std::size_t v = 0; v < data.size(); ++v)
    for (std::size_t i = 0; i < data[v].labels.frames(); ++i)
      if (!taken.count({v, i})) out.push_back({v, i});
  return out;
}

/// Expression windows (optionally capped) plus neutral_ratio as many neutral
/// windows, shuffled.
inline std::vector<WindowRef> epoch_windows(const std::vector<WindowRef>& expr, const std::vector<WindowRef>& neutral,
                                            const TrainConfig& cfg, std::mt19937_64& rng) {
  std::vector<WindowRef> pos = expr;
  std::shuffle(pos.begin(), pos.end(), rng);
  if (cfg.max_windows > 0 && pos.size() > cfg.max_windows) pos.resize(cfg.max_windows);
  std::vector<WindowRef> neg = neutral;
  std::shuffle(neg.begin(), neg.end(), rng);
  const auto want = static_cast<std::size_t>(std::llround(cfg.neutral_ratio * static_cast<double>(pos.size())));
  if (neg.size() > want) neg.resize(want);
  pos.insert(pos.end(), neg.begin(), neg.end());
  std::shuffle(pos.begin(), pos.end(), rng);
  return pos;
}

struct LossParts {
  Tensor cls;
  Tensor con;
  Tensor total;
};

inline LossParts batch_loss(spotformer::SpotFormer& model, const Batch& batch, const LossConfig& cfg,
                            tensor::NormMode mode) {
  const auto r = model.forward(batch.clips, mode);
  LossParts out;
  out.cls = focal_loss(r.probs, batch.targets, cfg.alpha, cfg.gamma);
  out.con = supcon_loss(r.features, batch.classes, cfg.tau);
  if (cfg.contrastive_mean) out.con = tensor::scale(out.con, 1.0 / static_cast<double>(batch.classes.size()));
  out.total = total_loss(out.cls, out.con, cfg.lambda);
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;
  double cls = 0.0;
  double con = 0.0;
  double total = 0.0;
  double validation = std::numeric_limits<double>::quiet_NaN();
};

inline void write_loss_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::missing_file, "cannot write loss log " + path);
  out.precision(17);
  out << "epoch,cls_loss,con_loss,total\n";
  for (const auto& e : log) out << e.epoch << ',' << e.cls << ',' << e.con << ',' << e.total << '\n';
  require(static_cast<bool>(out), ErrorKind::missing_file, "write failed: " + path);
}

/// Mean total loss over fixed windows in eval mode.
inline double evaluate_loss(spotformer::SpotFormer& model, const std::vector<VideoSample>& data,
                            const std::vector<WindowRef>& windows, const TrainConfig& cfg) {
  tensor::NoGradScope no_grad;
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start + 2 <= windows.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(windows.size(), start + cfg.batch_size);
    if (end - start < 2) break;
    const Batch b = make_batch(data, std::span(windows).subspan(start, end - start));
    total += batch_loss(model, b, cfg.loss, tensor::NormMode::eval).total.item();
    ++batches;
  }
  return batches ? total / static_cast<double>(batches) : std::numeric_limits<double>::quiet_NaN();
}

struct TrainCallbacks {
  /// Called after each epoch; `improved` is true when the validation loss
  /// (training loss without a validation set) reached a new minimum.
  std::function<void(const EpochLog&, bool improved)> on_epoch;
};

/// Trains `model` in place and returns the per-epoch log.
inline std::vector<EpochLog> train(spotformer::SpotFormer& model, const std::vector<VideoSample>& train_set,
                                   const std::vector<VideoSample>& val_set, const TrainConfig& cfg,
                                   const TrainCallbacks& callbacks = {}) {
  cfg.validate();
  require(!train_set.empty(), ErrorKind::data, "train: empty training corpus");
  for (const auto& s : train_set) {
    require(s.features.frames == s.labels.frames(), ErrorKind::data,
            "train: features and labels of " + s.video_id + " disagree on frame count");
    require(s.features.window == model.config().window && s.features.rois == model.config().rois(), ErrorKind::data,
            "train: features of " + s.video_id + " do not match the model window/ROI count");
  }
  const auto expr = expression_windows(train_set, cfg.label_radius);
  const auto neutral = neutral_windows(train_set, cfg.label_radius);
  require(!expr.empty() || !neutral.empty(), ErrorKind::data, "train: no training windows");
  std::mt19937_64 rng(cfg.seed);
  std::vector<WindowRef> val_windows;
  if (!val_set.empty()) {
    std::mt19937_64 val_rng(cfg.seed ^ 0x5bd1e995ULL);
    TrainConfig vcfg = cfg;
    vcfg.max_windows = 0;
    val_windows = epoch_windows(expression_windows(val_set, cfg.label_radius),
                                neutral_windows(val_set, cfg.label_radius), vcfg, val_rng);
  }
  AdamW opt(model.parameters(), cfg.optimizer);
  std::vector<EpochLog> log;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto windows = epoch_windows(expr, neutral, cfg, rng);
    EpochLog e;
    e.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < windows.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(windows.size(), start + cfg.batch_size);
      if (end - start < 2) break;  // batch norm needs two samples
      const Batch b = make_batch(train_set, std::span(windows).subspan(start, end - start));
      tensor::Tape tape;
      tensor::TapeScope scope(tape);
      opt.zero_grad();
      const LossParts l = batch_loss(model, b, cfg.loss, tensor::NormMode::train);
      tape.backward(l.total);
      opt.step();
      e.cls += l.cls.item();
      e.con += l.con.item();
      e.total += l.total.item();
      ++batches;
    }
    require(batches > 0, ErrorKind::data, "train: epoch produced no batch of at least 2 windows");
    e.cls /= static_cast<double>(batches);
    e.con /= static_cast<double>(batches);
    e.total /= static_cast<double>(batches);
    if (!val_windows.empty()) e.validation = evaluate_loss(model, val_set, val_windows, cfg);
    const double criterion = std::isnan(e.validation) ? e.total : e.validation;
    const bool improved = criterion < best;
    if (improved) best = criterion;
    log.push_back(e);
    if (callbacks.on_epoch) callbacks.on_epoch(e, improved);
  }
  return log;
}

}  // namespace spotkit::training
