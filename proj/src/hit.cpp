#include "conslide/hit.hpp"

#include <cmath>

#include "binary_io.hpp"
#include "conslide/errors.hpp"

namespace conslide {
namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

constexpr double kInitStd = 0.02;

}  // namespace

void HitConfig::validate() const {
  if (layers < 1) throw ConfigError("hit: layers must be >= 1");
  if (channels < 1) throw ConfigError("hit: channels must be >= 1");
  if (heads < 1 || channels % heads != 0)
    throw ConfigError("hit: channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  if (conv_kernel < 1 || conv_kernel % 2 == 0) throw ConfigError("hit: conv_kernel must be odd");
  if (num_classes_total < 2) throw ConfigError("hit: num_classes_total must be >= 2");
  if (!(eps > 0.0)) throw ConfigError("hit: eps must be > 0");
}

TransformerWeights HitModel::add_transformer(const std::string& prefix, ParamGroup group, Rng& rng) {
  const std::size_t c = config_.channels, h = config_.hidden();
  auto w = [&](const char* name, Shape s) { return &params_.add(prefix + name, group, normal_tensor(std::move(s), kInitStd, rng)); };
  auto z = [&](const char* name, std::size_t n) { return &params_.add(prefix + name, group, Tensor({n})); };
  auto one = [&](const char* name, std::size_t n) { return &params_.add(prefix + name, group, filled({n}, 1.0)); };
  TransformerWeights t{};
  t.ln1_gamma = one("ln1.gamma", c);
  t.ln1_beta = z("ln1.beta", c);
  t.wq = w("attn.wq", {c, c});
  t.bq = z("attn.bq", c);
  t.wk = w("attn.wk", {c, c});
  t.bk = z("attn.bk", c);
  t.wv = w("attn.wv", {c, c});
  t.bv = z("attn.bv", c);
  t.wo = w("attn.wo", {c, c});
  t.bo = z("attn.bo", c);
  t.ln2_gamma = one("ln2.gamma", c);
  t.ln2_beta = z("ln2.beta", c);
  t.w1 = w("mlp.w1", {c, h});
  t.b1 = z("mlp.b1", h);
  t.w2 = w("mlp.w2", {h, c});
  t.b2 = z("mlp.b2", c);
  return t;
}

HitModel::HitModel(const HitConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t c = config_.channels;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    pt_.push_back(add_transformer(p + "pt.", ParamGroup::kPatch, rng));
    InteractionWeights hi{};
    hi.conv_weight = &params_.add(p + "hi.conv.weight", ParamGroup::kInteraction,
                                  normal_tensor({config_.conv_kernel, c, c}, kInitStd, rng));
    hi.conv_bias = &params_.add(p + "hi.conv.bias", ParamGroup::kInteraction, Tensor({c}));
    hi_.push_back(hi);
    rt_.push_back(add_transformer(p + "rt.", ParamGroup::kRegion, rng));
  }
  cls_ = &params_.add("cls_token", ParamGroup::kHead, normal_tensor({1, c}, kInitStd, rng));
  head_w_ = &params_.add("head.weight", ParamGroup::kHead, normal_tensor({c, config_.num_classes_total}, kInitStd, rng));
  head_b_ = &params_.add("head.bias", ParamGroup::kHead, Tensor({config_.num_classes_total}));
}

std::size_t HitModel::parameter_count(const HitConfig& cfg) {
  const std::size_t c = cfg.channels, h = cfg.hidden();
  const std::size_t transformer = 4 * c + 4 * (c * c + c) + (c * h + h) + (h * c + c);
  const std::size_t interaction = cfg.conv_kernel * c * c + c;
  return cfg.layers * (2 * transformer + interaction) + c + c * cfg.num_classes_total + cfg.num_classes_total;
}

TransformerResult transformer_layer(Tape& tape, const TransformerWeights& w, Var x, std::size_t heads, double eps) {
  using namespace ops;
  const Shape shape = x.shape();
  const std::size_t c = shape.back();
  const std::size_t rows = x.numel() / c;
  Var h = layer_norm(x, tape.param(*w.ln1_gamma), tape.param(*w.ln1_beta), eps);
  const AttentionWeights aw{tape.param(*w.wq), tape.param(*w.bq), tape.param(*w.wk), tape.param(*w.bk),
                            tape.param(*w.wv), tape.param(*w.bv), tape.param(*w.wo), tape.param(*w.bo)};
  auto attn = msa(h, aw, heads);
  Var x1 = add(x, attn.output);
  Var h2 = reshape(layer_norm(x1, tape.param(*w.ln2_gamma), tape.param(*w.ln2_beta), eps), {rows, c});
  Var hidden = relu(add_bias(matmul(h2, tape.param(*w.w1)), tape.param(*w.b1)));
  Var mlp = add_bias(matmul(hidden, tape.param(*w.w2)), tape.param(*w.b2));
  return {add(x1, reshape(mlp, shape)), attn.attention};
}

Var pt_forward(Tape& tape, const HitModel& model, std::size_t layer, Var patches_prev) {
  const auto& cfg = model.config();
  if (layer >= cfg.layers) throw ConfigError("pt_forward: layer " + std::to_string(layer) + " out of range");
  if (patches_prev.shape().size() != 3 || patches_prev.dim(2) != cfg.channels)
    throw DimensionError("pt_forward: expected [M,N," + std::to_string(cfg.channels) + "], got " +
                         shape_string(patches_prev.shape()));
  return transformer_layer(tape, model.patch_block(layer), patches_prev, cfg.heads, cfg.eps).output;
}

InteractionResult hi_forward(Tape& tape, const HitModel& model, std::size_t layer, Var patch_hat, Var regions_prev) {
  using namespace ops;
  const auto& cfg = model.config();
  if (layer >= cfg.layers) throw ConfigError("hi_forward: layer " + std::to_string(layer) + " out of range");
  const Shape& sp = patch_hat.shape();
  const Shape& sr = regions_prev.shape();
  if (sp.size() != 3 || sr.size() != 2 || sp[0] != sr[0] || sp[2] != sr[1] || sp[2] != cfg.channels)
    throw DimensionError("hi_forward: patch " + shape_string(sp) + " inconsistent with region " + shape_string(sr));
  const std::size_t m = sp[0], n = sp[1], c = sp[2];
  const auto& w = model.interaction_block(layer);
  Var kernel = tape.param(*w.conv_weight);
  const std::size_t taps = cfg.conv_kernel;
  const auto half = static_cast<std::ptrdiff_t>(taps / 2);
  Var conv;
  for (std::size_t k = 0; k < taps; ++k) {
    const std::ptrdiff_t offset = static_cast<std::ptrdiff_t>(k) - half;
    Var shifted = offset == 0 ? patch_hat : shift_axis1(patch_hat, offset);
    Var tap = reshape(slice_rows(kernel, k, k + 1), {c, c});
    Var term = matmul(reshape(shifted, {m * n, c}), tap);
    conv = conv.valid() ? add(conv, term) : term;
  }
  conv = reshape(add_bias(conv, tape.param(*w.conv_bias)), {m, n, c});
  Var pooled = max_axis(conv, 1);
  return {add(patch_hat, expand_rows(regions_prev, n)), add(regions_prev, pooled)};
}

TransformerResult rt_forward(Tape& tape, const HitModel& model, std::size_t layer, Var regions_with_cls) {
  const auto& cfg = model.config();
  if (layer >= cfg.layers) throw ConfigError("rt_forward: layer " + std::to_string(layer) + " out of range");
  if (regions_with_cls.shape().size() != 2 || regions_with_cls.dim(1) != cfg.channels || regions_with_cls.dim(0) < 2)
    throw DimensionError("rt_forward: expected [M+1," + std::to_string(cfg.channels) + "], got " +
                         shape_string(regions_with_cls.shape()));
  return transformer_layer(tape, model.region_block(layer), regions_with_cls, cfg.heads, cfg.eps);
}

HitOutput hit_forward(Tape& tape, const HitModel& model, const FeatureBag& bag, ForwardOptions options) {
  using namespace ops;
  const auto& cfg = model.config();
  bag.validate();
  if (bag.channels() != cfg.channels)
    throw DimensionError("hit_forward: bag has C=" + std::to_string(bag.channels()) + ", model expects " +
                         std::to_string(cfg.channels));
  const std::size_t m = bag.regions();
  HitOutput out;
  Var patches = tape.constant(bag.patch_features);
  Var regions = tape.constant(bag.region_features);
  Var cls = tape.param(model.class_token());
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Var patch_hat = pt_forward(tape, model, l, patches);
    out.patch_outputs.push_back(patch_hat);
    auto hi = hi_forward(tape, model, l, patch_hat, regions);
    auto rt = rt_forward(tape, model, l, concat_rows(cls, hi.regions));
    cls = slice_rows(rt.output, 0, 1);
    regions = slice_rows(rt.output, 1, m + 1);
    patches = hi.patches;
    if (options.retain_attention) {
      const std::size_t s = m + 1;
      Tensor avg({s, s});
      const auto a = rt.attention.value();
      for (std::size_t h = 0; h < cfg.heads; ++h)
        for (std::size_t i = 0; i < s * s; ++i) avg[i] += a[h * s * s + i];
      for (auto& v : avg.data) v /= static_cast<double>(cfg.heads);
      out.region_attention.push_back(std::move(avg));
    }
  }
  out.final_regions = regions;
  Var logits = add_bias(matmul(cls, tape.param(model.head_weight())), tape.param(model.head_bias()));
  out.logits = reshape(logits, {cfg.num_classes_total});
  return out;
}

std::vector<double> attention_rollout(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw StateError("attention_rollout: no retained attention maps");
  const std::size_t s = maps.front().dim(0);
  if (s < 2) throw DimensionError("attention_rollout: need at least one region token");
  std::vector<double> rollout(s * s, 0.0);
  for (std::size_t i = 0; i < s; ++i) rollout[i * s + i] = 1.0;
  std::vector<double> mixed(s * s), next(s * s);
  for (const auto& a : maps) {
    if (a.shape != Shape{s, s}) throw DimensionError("attention_rollout: map shape " + shape_string(a.shape));
    for (std::size_t i = 0; i < s; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        mixed[i * s + j] = 0.5 * (a[i * s + j] + (i == j ? 1.0 : 0.0));
        row += mixed[i * s + j];
      }
      for (std::size_t j = 0; j < s; ++j) mixed[i * s + j] /= row;
    }
    // Later layers multiply on the left.
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < s; ++k) acc += mixed[i * s + k] * rollout[k * s + j];
        next[i * s + j] = acc;
      }
    rollout.swap(next);
  }
  std::vector<double> scores(rollout.begin() + 1, rollout.begin() + static_cast<std::ptrdiff_t>(s));
  double total = 0.0;
  for (double v : scores) total += v;
  for (auto& v : scores) v /= total;
  return scores;
}

std::vector<double> attention_rollout(const HitOutput& output) { return attention_rollout(output.region_attention); }

// --- checkpoints -----------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  detail::ByteWriter w;
  w.bytes("CSCK");
  w.u16(kCheckpointVersion);
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape) w.u64(d);
    w.f64s(e.value.data);
  }
  return std::move(w.buffer());
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "CSCK");
  r.expect_magic("CSCK");
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError(FormatErrorCode::kUnsupportedVersion, "CSCK version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  std::vector<CheckpointEntry> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u64());
    e.value = Tensor(shape, r.f64s(numel(shape)));
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError(FormatErrorCode::kInvalidContent, "CSCK trailing bytes");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  detail::write_file(path, encode_checkpoint(entries));
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

const CheckpointEntry* find_entry(const std::vector<CheckpointEntry>& entries, std::string_view name) {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::vector<CheckpointEntry> model_checkpoint(const HitModel& model, std::vector<CheckpointEntry> extra) {
  const auto& c = model.config();
  std::vector<CheckpointEntry> out;
  out.push_back({"meta.hit_config",
                 Tensor({7},
                        {static_cast<double>(c.layers), static_cast<double>(c.channels), static_cast<double>(c.heads),
                         static_cast<double>(c.mlp_hidden), static_cast<double>(c.conv_kernel),
                         static_cast<double>(c.num_classes_total), c.eps})});
  for (const auto& p : model.parameters()) out.push_back({p.name, p.value});
  for (auto& e : extra) out.push_back(std::move(e));
  return out;
}

HitModel model_from_checkpoint(const std::vector<CheckpointEntry>& entries) {
  const auto* meta = find_entry(entries, "meta.hit_config");
  if (!meta || meta->value.numel() != 7)
    throw FormatError(FormatErrorCode::kInvalidContent, "checkpoint lacks meta.hit_config");
  const auto& v = meta->value.data;
  HitConfig cfg;
  cfg.layers = static_cast<std::size_t>(v[0]);
  cfg.channels = static_cast<std::size_t>(v[1]);
  cfg.heads = static_cast<std::size_t>(v[2]);
  cfg.mlp_hidden = static_cast<std::size_t>(v[3]);
  cfg.conv_kernel = static_cast<std::size_t>(v[4]);
  cfg.num_classes_total = static_cast<std::size_t>(v[5]);
  cfg.eps = v[6];
  HitModel model(cfg, 0);
  for (auto& p : model.parameters()) {
    const auto* e = find_entry(entries, p.name);
    if (!e) throw FormatError(FormatErrorCode::kInvalidContent, "checkpoint lacks parameter " + p.name);
    if (e->value.shape != p.value.shape)
      throw FormatError(FormatErrorCode::kInvalidContent, "checkpoint parameter " + p.name + " has shape " +
                                                              shape_string(e->value.shape));
    p.value = e->value;
  }
  return model;
}

}  // namespace conslide
