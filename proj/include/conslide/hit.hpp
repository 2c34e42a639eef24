#pragma once

// Hierarchical Interaction Transformer over feature bags.
//
// Each of the L layers runs three blocks:
//   P_hat = PT(P_prev)                       per-region transformer over patches
//   P     = P_hat + R_prev (per patch)       \ hierarchical interaction
//   R_hat = R_prev + max_j Conv(P_hat)[j]    /
//   R     = RT([cls; R_hat])                 transformer over regions
// A single learnable class token is prepended before the first RT block and
// carried through all layers; the head reads its final state.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "conslide/data.hpp"
#include "conslide/ops.hpp"
#include "conslide/tensor.hpp"

namespace conslide {

struct HitConfig {
  std::size_t layers = 2;
  std::size_t channels = 64;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 0;  // 0 selects 4 * channels
  std::size_t conv_kernel = 1;
  std::size_t num_classes_total = 8;
  double eps = 1e-5;

  void validate() const;
  std::size_t hidden() const { return mlp_hidden ? mlp_hidden : 4 * channels; }
  bool operator==(const HitConfig&) const = default;
};

/// Weights of one pre-LN transformer layer: x + MSA(LN(x)), then x + MLP(LN(x)).
struct TransformerWeights {
  const Parameter *ln1_gamma, *ln1_beta;
  const Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  const Parameter *ln2_gamma, *ln2_beta;
  const Parameter *w1, *b1, *w2, *b2;
};

struct InteractionWeights {
  const Parameter* conv_weight;  // [K, C, C], tap k applied to offset k - K/2
  const Parameter* conv_bias;    // [C]
};

class HitModel {
 public:
  /// Weights N(0, 0.02^2), biases 0, LN gamma 1 / beta 0, class token N(0, 0.02^2).
  HitModel(const HitConfig& config, std::uint64_t seed);

  const HitConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  const TransformerWeights& patch_block(std::size_t layer) const { return pt_.at(layer); }
  const TransformerWeights& region_block(std::size_t layer) const { return rt_.at(layer); }
  const InteractionWeights& interaction_block(std::size_t layer) const { return hi_.at(layer); }
  const Parameter& class_token() const { return *cls_; }
  const Parameter& head_weight() const { return *head_w_; }
  const Parameter& head_bias() const { return *head_b_; }

  static std::size_t parameter_count(const HitConfig& config);

 private:
  TransformerWeights add_transformer(const std::string& prefix, ParamGroup group, Rng& rng);

  HitConfig config_;
  ParameterSet params_;
  std::vector<TransformerWeights> pt_, rt_;
  std::vector<InteractionWeights> hi_;
  const Parameter* cls_ = nullptr;
  const Parameter* head_w_ = nullptr;
  const Parameter* head_b_ = nullptr;
};

/// One pre-LN transformer layer over x[B, S, C] or x[S, C].
struct TransformerResult {
  Var output;
  Var attention;  // [B*heads, S, S]
};
TransformerResult transformer_layer(Tape& tape, const TransformerWeights& w, Var x, std::size_t heads, double eps);

/// Layer indices are 0-based.
Var pt_forward(Tape& tape, const HitModel& model, std::size_t layer, Var patches_prev);

struct InteractionResult {
  Var patches;  // [M, N, C]
  Var regions;  // [M, C]
};
InteractionResult hi_forward(Tape& tape, const HitModel& model, std::size_t layer, Var patch_hat, Var regions_prev);

/// Input and output are [M+1, C] with the class token at row 0.
TransformerResult rt_forward(Tape& tape, const HitModel& model, std::size_t layer, Var regions_with_cls);

struct HitOutput {
  Var logits;                        // [num_classes_total]
  std::vector<Var> patch_outputs;    // P_hat per layer, [M, N, C]
  Var final_regions;                 // R^L without the class token, [M, C]
  /// Head-averaged RT attention per layer, [(M+1), (M+1)]; empty unless retained.
  std::vector<Tensor> region_attention;
};

struct ForwardOptions {
  bool retain_attention = false;
};

HitOutput hit_forward(Tape& tape, const HitModel& model, const FeatureBag& bag, ForwardOptions options = {});

/// Rollout of identity-mixed attention maps: A_bar = row_normalize((A + I) / 2),
/// product A_bar_L ... A_bar_1, class-token row restricted to regions and
/// renormalized. Throws StateError when `maps` is empty.
std::vector<double> attention_rollout(const std::vector<Tensor>& maps);
std::vector<double> attention_rollout(const HitOutput& output);

// Checkpoints ("CSCK"): magic, u16 version, u64 entry count, then per entry
// u32 name length, name bytes, u32 rank, u64 dims, f64 payload.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Tensor value;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Model parameters plus a "meta.hit_config" entry and any `extra` entries.
std::vector<CheckpointEntry> model_checkpoint(const HitModel& model, std::vector<CheckpointEntry> extra = {});
/// Rebuilds a model from model_checkpoint output. Throws FormatError on
/// missing or mis-shaped entries.
HitModel model_from_checkpoint(const std::vector<CheckpointEntry>& entries);
const CheckpointEntry* find_entry(const std::vector<CheckpointEntry>& entries, std::string_view name);

}  // namespace conslide
