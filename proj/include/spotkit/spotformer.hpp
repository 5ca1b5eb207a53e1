#pragma once

// Multi-scale spatio-temporal attention model over facial ROI graphs.
//
// Input is a batch of feature windows [B × w × R × 2]; output is ten
// per-window logits (onset/apex/offset/exp/norm × micro/macro) and the
// D-dimensional feature that feeds the final FC layer.
//
// Stage schedules (T = frames, S = graph nodes), default w=17, R=12:
//   simul_st  per block: spatial attn, temporal attn, FLGP, downsample while
//             S > 1, then temporal attn + downsample until T = 1:
//             (17,12) (9,3) (5,1) (3,1) (2,1) (1,1)
//   simul_ts  same as simul_st with temporal attn before spatial attn.
//   seq_st    spatial attn + FLGP twice, then temporal attn + downsample:
//             (17,12) (17,3) (17,1) (9,1) (5,1) (3,1) (2,1) (1,1)
//   paral_st  spatial attn builds graphs at S = 12, 3, 1; each scale runs
//             its own temporal attn + downsample chain and the attention
//             output of scale g−1 is max-pooled, linearly mapped and added
//             into scale g at the same temporal level. The model reads the
//             S = 1 chain: (17,1) (9,1) (5,1) (3,1) (2,1) (1,1).
//   paral_st_shared  paral_st with one attention layer and one downsample
//             per temporal level shared by all scales and no fusion map.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "spotkit/binio.hpp"
#include "spotkit/error.hpp"
#include "spotkit/facegraph.hpp"
#include "spotkit/ops.hpp"
#include "spotkit/tensor.hpp"
#include "spotkit/types.hpp"

namespace spotkit::spotformer {

using facegraph::FacialGraphSpec;
using tensor::BatchNormStats;
using tensor::NamedTensor;
using tensor::NormMode;
using tensor::Shape;
using tensor::Tensor;

/// Output channels: index = 2·kind + type, type 0 = micro, 1 = macro.
enum class Kind : int { onset = 0, apex = 1, offset = 2, exp = 3, norm = 4 };
inline constexpr std::size_t kChannels = 10;
inline constexpr std::size_t channel(Kind k, ExpressionType t) {
  return 2 * static_cast<std::size_t>(k) + static_cast<std::size_t>(t);
}
inline const char* channel_name(std::size_t c) {
  static const char* names[kChannels] = {"onset_mi", "onset_ma", "apex_mi", "apex_ma", "offset_mi",
                                         "offset_ma", "exp_mi",   "exp_ma",  "norm_mi", "norm_ma"};
  return names[c];
}

enum class Variant { simul_st, seq_st, paral_st, paral_st_shared, simul_ts };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::simul_st: return "simul_st";
    case Variant::seq_st: return "seq_st";
    case Variant::paral_st: return "paral_st";
    case Variant::paral_st_shared: return "paral_st_shared";
    case Variant::simul_ts: return "simul_ts";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::simul_st, Variant::seq_st, Variant::paral_st, Variant::paral_st_shared, Variant::simul_ts})
    if (s == to_string(v)) return v;
  fail(ErrorKind::config, "unknown model variant '" + s + "'");
}

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t window = 17;
  FacialGraphSpec graph = facegraph::default_graph();
  Variant variant = Variant::simul_st;
  std::uint64_t seed = 1;

  std::size_t rois() const { return graph.roi_count(); }

  void validate() const {
    require(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, ErrorKind::config,
            "model: embed_dim must be a positive multiple of heads");
    require(mlp_ratio > 0, ErrorKind::config, "model: mlp_ratio must be positive");
    require(window >= 3 && window % 2 == 1, ErrorKind::config, "model: window must be odd and >= 3");
    graph.validate();
  }
};

/// Serialized as key=value lines followed by "[graph]" and the graph text.
inline std::string format_model_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "embed_dim=" << c.embed_dim << "\nheads=" << c.heads << "\nmlp_ratio=" << c.mlp_ratio
     << "\nwindow=" << c.window << "\nvariant=" << to_string(c.variant) << "\nseed=" << c.seed << "\n[graph]\n"
     << facegraph::format_graph(c.graph);
  return os.str();
}

inline ModelConfig parse_model_config(const std::string& text) {
  const auto split = text.find("[graph]\n");
  require(split != std::string::npos, ErrorKind::format, "model config: missing [graph] block");
  ModelConfig c;
  std::istringstream in(text.substr(0, split));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::format, "model config: bad line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "embed_dim") c.embed_dim = std::stoul(value);
    else if (key == "heads") c.heads = std::stoul(value);
    else if (key == "mlp_ratio") c.mlp_ratio = std::stoul(value);
    else if (key == "window") c.window = std::stoul(value);
    else if (key == "variant") c.variant = parse_variant(value);
    else if (key == "seed") c.seed = std::stoull(value);
    else fail(ErrorKind::format, "model config: unknown key '" + key + "'");
  }
  c.graph = facegraph::parse_graph(text.substr(split + 8));
  c.validate();
  return c;
}

/// uniform(−a, a), a = √(6 / (fan_in + fan_out))
inline Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_values()) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

inline Tensor zeros_param(Shape shape) { return Tensor(std::move(shape), 0.0).set_requires_grad(true); }
inline Tensor ones_param(Shape shape) { return Tensor(std::move(shape), 1.0).set_requires_grad(true); }

struct Linear {
  Tensor weight;  ///< [in × out]
  Tensor bias;    ///< [out], may be undefined

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias = true)
      : weight(xavier({in, out}, in, out, rng)), bias(with_bias ? zeros_param({out}) : Tensor()) {}

  Tensor operator()(const Tensor& x) const { return tensor::linear(x, weight, bias); }
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t c) : gamma(ones_param({c})), beta(zeros_param({c})), stats(c) {}

  Tensor operator()(const Tensor& x, NormMode mode) { return tensor::batch_norm(x, gamma, beta, stats, mode); }
};

/// Pre-norm transformer layer: x + MHSA(BN(x)), then + MLP(BN(·)).
/// The key projection has no bias: a key bias shifts every score of a query
/// by the same amount and cancels in the softmax.
struct AttentionLayer {
  BatchNorm norm1;
  Linear query, key, value, out;
  BatchNorm norm2;
  Linear fc1, fc2;
  std::size_t heads = 1;

  AttentionLayer() = default;
  AttentionLayer(std::size_t d, std::size_t heads_, std::size_t mlp_ratio, std::mt19937_64& rng)
      : norm1(d),
        query(d, d, rng),
        key(d, d, rng, false),
        value(d, d, rng),
        out(d, d, rng),
        norm2(d),
        fc1(d, mlp_ratio * d, rng),
        fc2(mlp_ratio * d, d, rng),
        heads(heads_) {}

  /// x is [G × L × D]: attention runs over L independently for each group.
  Tensor operator()(const Tensor& x, NormMode mode) {
    using namespace tensor;
    const std::size_t g = x.dim(0), l = x.dim(1), d = x.dim(2), dh = d / heads;
    auto split_heads = [&](const Tensor& t) {
      return reshape(permute(reshape(t, {g, l, heads, dh}), {0, 2, 1, 3}), {g * heads, l, dh});
    };
    const Tensor h = norm1(x, mode);
    const Tensor q = split_heads(query(h));
    const Tensor k = split_heads(key(h));
    const Tensor v = split_heads(value(h));
    const Tensor weights = softmax(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
    const Tensor ctx = reshape(permute(reshape(bmm(weights, v), {g, heads, l, dh}), {0, 2, 1, 3}), {g, l, d});
    const Tensor x1 = add(x, out(ctx));
    return add(x1, fc2(gelu(fc1(norm2(x1, mode)))));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params) const {
    params.push_back({prefix + "norm1.gamma", norm1.gamma});
    params.push_back({prefix + "norm1.beta", norm1.beta});
    for (auto [name, lin] : {std::pair{"query", &query}, {"key", &key}, {"value", &value}, {"out", &out}, {"fc1", &fc1},
                             {"fc2", &fc2}}) {
      params.push_back({prefix + name + ".weight", lin->weight});
      if (lin->bias.defined()) params.push_back({prefix + name + ".bias", lin->bias});
    }
    params.push_back({prefix + "norm2.gamma", norm2.gamma});
    params.push_back({prefix + "norm2.beta", norm2.beta});
  }

  void collect_buffers(const std::string& prefix, std::vector<std::pair<std::string, BatchNormStats*>>& out_) {
    out_.push_back({prefix + "norm1", &norm1.stats});
    out_.push_back({prefix + "norm2", &norm2.stats});
  }
};

/// MHSA over the node axis of x[B × T × S × D], per (batch, frame).
inline Tensor spatial_graph_attention(AttentionLayer& layer, const Tensor& x, NormMode mode) {
  require(x.rank() == 4, ErrorKind::shape, "spatial attention expects [B,T,S,D]");
  const Shape s = x.shape();
  // BN statistics over all leading axes; check batch extent on the 4-D view
  require(mode == NormMode::eval || s[0] >= 2, ErrorKind::shape, "batch_norm: train mode needs a batch of at least 2");
  return tensor::reshape(layer(tensor::reshape(x, {s[0] * s[1], s[2], s[3]}), mode), s);
}

/// MHSA over the frame axis of x[B × T × S × D], per (batch, node).
inline Tensor temporal_node_attention(AttentionLayer& layer, const Tensor& x, NormMode mode) {
  require(x.rank() == 4, ErrorKind::shape, "temporal attention expects [B,T,S,D]");
  const Shape s = x.shape();
  require(mode == NormMode::eval || s[0] >= 2, ErrorKind::shape, "batch_norm: train mode needs a batch of at least 2");
  const Tensor xt = tensor::permute(x, {0, 2, 1, 3});
  const Tensor y = layer(tensor::reshape(xt, {s[0] * s[2], s[1], s[3]}), mode);
  return tensor::permute(tensor::reshape(y, {s[0], s[2], s[1], s[3]}), {0, 2, 1, 3});
}

/// Facial local graph pooling: channel-wise max over each node group.
inline Tensor flgp(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  require(x.rank() == 4, ErrorKind::shape, "flgp expects [B,T,S,D]");
  return tensor::group_max(x, 2, groups);
}

struct Downsample {
  Tensor kernel;  ///< [3·D × D], taps t−1, t, t+1
  Tensor bias;

  Downsample() = default;
  Downsample(std::size_t d, std::mt19937_64& rng) : kernel(xavier({3 * d, d}, 3 * d, d, rng)), bias(zeros_param({d})) {}

  /// Stride-2 kernel-3 convolution along T: [B,T,S,D] → [B,⌈T/2⌉,S,D].
  Tensor operator()(const Tensor& x) const { return tensor::temporal_conv(x, kernel, bias); }
};

struct StageShape {
  std::string stream;
  std::size_t frames = 0;
  std::size_t nodes = 0;

  bool operator==(const StageShape&) const = default;
};

using ShapeTrace = std::vector<StageShape>;

/// Shapes of `trace` belonging to `stream`, as (T, S) pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> stream_shapes(const ShapeTrace& trace,
                                                                      const std::string& stream) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& s : trace)
    if (s.stream == stream) out.emplace_back(s.frames, s.nodes);
  return out;
}

struct ForwardResult {
  Tensor logits;    ///< [B × 10]
  Tensor probs;     ///< sigmoid(logits)
  Tensor features;  ///< [B × D], input of the final FC layer
};

class SpotFormer {
 public:
  explicit SpotFormer(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    const std::size_t d = config_.embed_dim, w = config_.window;
    node_embed_ = Linear(2, d, rng);
    temporal_tokens_ = xavier({w, d}, w, d, rng);
    part_tokens_ = xavier({facegraph::kPartCount, d}, facegraph::kPartCount, d, rng);
    pool_groups_ = {config_.graph.part_groups(), FacialGraphSpec::face_group()};
    temporal_levels_.clear();
    for (std::size_t t = w; t > 1; t = (t + 1) / 2) temporal_levels_.push_back(t);
    auto layer = [&] { return AttentionLayer(d, config_.heads, config_.mlp_ratio, rng); };
    switch (config_.variant) {
      case Variant::simul_st:
      case Variant::simul_ts: {
        std::size_t t = w;
        for (std::size_t level = 0; level < pool_groups_.size(); ++level) {
          spatial_.push_back(layer());
          temporal_.push_back(layer());
          downsample_.emplace_back(d, rng);
          t = (t + 1) / 2;
        }
        for (; t > 1; t = (t + 1) / 2) {
          temporal_.push_back(layer());
          downsample_.emplace_back(d, rng);
        }
        break;
      }
      case Variant::seq_st:
        for (std::size_t level = 0; level < pool_groups_.size(); ++level) spatial_.push_back(layer());
        for (std::size_t t = w; t > 1; t = (t + 1) / 2) {
          temporal_.push_back(layer());
          downsample_.emplace_back(d, rng);
        }
        break;
      case Variant::paral_st:
      case Variant::paral_st_shared: {
        const bool shared = config_.variant == Variant::paral_st_shared;
        for (std::size_t level = 0; level < pool_groups_.size(); ++level) spatial_.push_back(layer());
        const std::size_t streams = pool_groups_.size() + 1;
        const std::size_t levels = temporal_levels_.size();
        // layout: temporal_[level·streams + g] (shared: temporal_[level])
        for (std::size_t l = 0; l < levels; ++l)
          for (std::size_t g = 0; g < (shared ? 1 : streams); ++g) {
            temporal_.push_back(layer());
            downsample_.emplace_back(d, rng);
          }
        if (!shared)
          for (std::size_t g = 1; g < streams; ++g) fuse_.emplace_back(d, d, rng);
        break;
      }
    }
    head_ = Linear(d, kChannels, rng);
  }

  const ModelConfig& config() const { return config_; }

  /// out[b,t,r] = W·clip[b,t,r] + bias + δ_t[t] + δ_s[part(r)]
  Tensor embed(const Tensor& clips) const {
    const std::size_t w = config_.window, r = config_.rois(), d = config_.embed_dim;
    require(clips.rank() == 4 && clips.dim(1) == w && clips.dim(2) == r && clips.dim(3) == 2, ErrorKind::shape,
            "embed: expected clips [B," + std::to_string(w) + "," + std::to_string(r) + ",2], got " +
                tensor::shape_str(clips.shape()));
    const std::size_t b = clips.dim(0);
    std::vector<std::size_t> t_index, p_index;
    t_index.reserve(b * w * r);
    p_index.reserve(b * w * r);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t < w; ++t)
        for (std::size_t ri = 0; ri < r; ++ri) {
          t_index.push_back(t);
          p_index.push_back(config_.graph.part_index(ri));
        }
    Tensor x = node_embed_(clips);
    x = tensor::add(x, tensor::reshape(tensor::gather_rows(temporal_tokens_, std::move(t_index)), {b, w, r, d}));
    x = tensor::add(x, tensor::reshape(tensor::gather_rows(part_tokens_, std::move(p_index)), {b, w, r, d}));
    return x;
  }

  /// clips: [B × w × R × 2]. `trace` receives the (T, S) schedule.
  ForwardResult forward(const Tensor& clips, NormMode mode, ShapeTrace* trace = nullptr) {
    Tensor x = embed(clips);
    auto note = [&](const std::string& stream, const Tensor& t) {
      if (trace) trace->push_back({stream, t.dim(1), t.dim(2)});
    };
    note("main", x);
    switch (config_.variant) {
      case Variant::simul_st:
      case Variant::simul_ts: {
        const bool spatial_first = config_.variant == Variant::simul_st;
        std::size_t ti = 0;
        for (std::size_t level = 0; level < pool_groups_.size(); ++level, ++ti) {
          if (spatial_first) {
            x = spatial_graph_attention(spatial_[level], x, mode);
            x = temporal_node_attention(temporal_[ti], x, mode);
          } else {
            x = temporal_node_attention(temporal_[ti], x, mode);
            x = spatial_graph_attention(spatial_[level], x, mode);
          }
          x = downsample_[ti](flgp(x, pool_groups_[level]));
          note("main", x);
        }
        for (; x.dim(1) > 1; ++ti) {
          x = downsample_[ti](temporal_node_attention(temporal_[ti], x, mode));
          note("main", x);
        }
        break;
      }
      case Variant::seq_st: {
        for (std::size_t level = 0; level < pool_groups_.size(); ++level) {
          x = flgp(spatial_graph_attention(spatial_[level], x, mode), pool_groups_[level]);
          note("main", x);
        }
        for (std::size_t ti = 0; x.dim(1) > 1; ++ti) {
          x = downsample_[ti](temporal_node_attention(temporal_[ti], x, mode));
          note("main", x);
        }
        break;
      }
      case Variant::paral_st:
      case Variant::paral_st_shared:
        x = forward_parallel(x, mode, trace);
        break;
    }
    const std::size_t b = clips.dim(0), d = config_.embed_dim;
    require(x.dim(1) == 1 && x.dim(2) == 1, ErrorKind::shape, "forward: schedule did not reach a single node/frame");
    ForwardResult r;
    r.features = tensor::reshape(x, {b, d});
    r.logits = head_(r.features);
    r.probs = tensor::sigmoid(r.logits);
    return r;
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> p;
    p.push_back({"embed.node.weight", node_embed_.weight});
    p.push_back({"embed.node.bias", node_embed_.bias});
    p.push_back({"embed.temporal_tokens", temporal_tokens_});
    p.push_back({"embed.part_tokens", part_tokens_});
    for (std::size_t i = 0; i < spatial_.size(); ++i) spatial_[i].collect("spatial" + std::to_string(i) + ".", p);
    for (std::size_t i = 0; i < temporal_.size(); ++i) temporal_[i].collect("temporal" + std::to_string(i) + ".", p);
    for (std::size_t i = 0; i < downsample_.size(); ++i) {
      p.push_back({"downsample" + std::to_string(i) + ".kernel", downsample_[i].kernel});
      p.push_back({"downsample" + std::to_string(i) + ".bias", downsample_[i].bias});
    }
    for (std::size_t i = 0; i < fuse_.size(); ++i) {
      p.push_back({"fuse" + std::to_string(i) + ".weight", fuse_[i].weight});
      p.push_back({"fuse" + std::to_string(i) + ".bias", fuse_[i].bias});
    }
    p.push_back({"head.weight", head_.weight});
    p.push_back({"head.bias", head_.bias});
    return p;
  }

  std::vector<std::pair<std::string, BatchNormStats*>> buffers() {
    std::vector<std::pair<std::string, BatchNormStats*>> b;
    for (std::size_t i = 0; i < spatial_.size(); ++i) spatial_[i].collect_buffers("spatial" + std::to_string(i) + ".", b);
    for (std::size_t i = 0; i < temporal_.size(); ++i)
      temporal_[i].collect_buffers("temporal" + std::to_string(i) + ".", b);
    return b;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// Final FC layer, exposed for tests that fix its weights.
  Linear& head() { return head_; }

 private:
  Tensor forward_parallel(Tensor x, NormMode mode, ShapeTrace* trace) {
    const bool shared = config_.variant == Variant::paral_st_shared;
    const std::size_t streams = pool_groups_.size() + 1;
    // graph scales at full temporal resolution
    std::vector<Tensor> scale_in(streams);
    scale_in[0] = spatial_graph_attention(spatial_[0], x, mode);
    for (std::size_t g = 1; g < streams; ++g) {
      Tensor pooled = flgp(scale_in[g - 1], pool_groups_[g - 1]);
      scale_in[g] = g < spatial_.size() ? spatial_graph_attention(spatial_[g], pooled, mode) : pooled;
    }
    auto note = [&](std::size_t g, const Tensor& t) {
      if (trace) trace->push_back({"scale" + std::to_string(g), t.dim(1), t.dim(2)});
    };
    std::vector<Tensor> cur = scale_in;
    const std::size_t levels = temporal_levels_.size();
    for (std::size_t l = 0; l < levels; ++l) {
      std::vector<Tensor> attended(streams);
      for (std::size_t g = 0; g < streams; ++g) {
        note(g, cur[g]);
        Tensor in = cur[g];
        if (g > 0) {
          Tensor lower = flgp(attended[g - 1], pool_groups_[g - 1]);
          in = tensor::add(in, shared ? lower : fuse_[g - 1](lower));
        }
        attended[g] = temporal_node_attention(temporal_[shared ? l : l * streams + g], in, mode);
      }
      for (std::size_t g = 0; g < streams; ++g) {
        // lower scales are only consumed through fusion at the next level
        if (l + 1 == levels && g + 1 < streams) continue;
        cur[g] = downsample_[shared ? l : l * streams + g](attended[g]);
      }
    }
    note(streams - 1, cur[streams - 1]);
    return cur[streams - 1];
  }

  ModelConfig config_;
  Linear node_embed_;
  Tensor temporal_tokens_;
  Tensor part_tokens_;
  std::vector<std::vector<std::vector<std::size_t>>> pool_groups_;
  std::vector<std::size_t> temporal_levels_;
  std::vector<AttentionLayer> spatial_;
  std::vector<AttentionLayer> temporal_;
  std::vector<Downsample> downsample_;
  std::vector<Linear> fuse_;
  Linear head_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "SPTF" v1: u32 version, u32 config length, config text, u32 blob count,
/// then per blob: u32 name length, name, u32 rank, u32 extents, f64 values.
/// Batch-norm running statistics are stored as "<layer>.running_mean" and
/// "<layer>.running_var" blobs.
inline void save_checkpoint(const std::string& path, SpotFormer& model) {
  struct Blob {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  std::vector<Blob> blobs;
  for (const auto& p : model.parameters())
    blobs.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.values().begin(), p.tensor.values().end())});
  for (auto& [name, stats] : model.buffers()) {
    blobs.push_back({name + ".running_mean", {stats->running_mean.size()}, stats->running_mean});
    blobs.push_back({name + ".running_var", {stats->running_var.size()}, stats->running_var});
  }
  binio::Writer w(path);
  w.magic("SPTF");
  w.u32(kCheckpointVersion);
  const std::string cfg = format_model_config(model.config());
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.u32(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& b : blobs) {
    w.u32(static_cast<std::uint32_t>(b.name.size()));
    w.bytes(b.name);
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (auto e : b.shape) w.u32(static_cast<std::uint32_t>(e));
    for (double v : b.values) w.f64(v);
  }
  w.close();
}

inline SpotFormer load_checkpoint(const std::string& path) {
  binio::Reader r(path);
  r.expect_magic("SPTF");
  r.expect_version(kCheckpointVersion);
  const std::uint32_t cfg_len = r.u32();
  SpotFormer model(parse_model_config(r.bytes(cfg_len)));
  std::map<std::string, std::vector<double>> blobs;
  std::map<std::string, Shape> shapes;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u32());
    Shape shape(r.u32());
    for (auto& e : shape) e = r.u32();
    std::vector<double> values(tensor::numel(shape));
    for (auto& v : values) v = r.f64();
    shapes[name] = shape;
    blobs[name] = std::move(values);
  }
  auto take = [&](const std::string& name, std::size_t size) -> std::vector<double>& {
    auto it = blobs.find(name);
    require(it != blobs.end(), ErrorKind::format, path + ": checkpoint lacks blob '" + name + "'");
    require(it->second.size() == size, ErrorKind::format, path + ": blob '" + name + "' has the wrong size");
    return it->second;
  };
  for (auto& p : model.parameters()) {
    const auto& v = take(p.name, p.tensor.size());
    require(shapes[p.name] == p.tensor.shape(), ErrorKind::format, path + ": blob '" + p.name + "' has the wrong shape");
    std::copy(v.begin(), v.end(), p.tensor.mutable_values().begin());
  }
  for (auto& [name, stats] : model.buffers()) {
    stats->running_mean = take(name + ".running_mean", stats->running_mean.size());
    stats->running_var = take(name + ".running_var", stats->running_var.size());
  }
  return model;
}

}  // namespace spotkit::spotformer
