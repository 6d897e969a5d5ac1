#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mixsearch/autodiff.hpp"
#include "mixsearch/rng.hpp"

namespace mixsearch::ops {

enum class OpKind : int {
  // Down-ops, stride 2
  AvgPool2,
  MaxPool2,
  Conv2,
  AtrousConv2,
  SepConv2,
  AttConv2,
  // Up-ops, stride 2 (transposed)
  ConvT2,
  AtrousConvT2,
  SepConvT2,
  AttConvT2,
  // Normal-ops, stride 1
  Identity,
  AttIdentity,
  Conv1,
  AtrousConv1,
  SepConv1,
  ShuffleConv1,
};

inline constexpr int kNumOpKinds = 16;

inline constexpr std::array<OpKind, kNumOpKinds> kAllOps{
    OpKind::AvgPool2,   OpKind::MaxPool2,     OpKind::Conv2,       OpKind::AtrousConv2,
    OpKind::SepConv2,   OpKind::AttConv2,     OpKind::ConvT2,      OpKind::AtrousConvT2,
    OpKind::SepConvT2,  OpKind::AttConvT2,    OpKind::Identity,    OpKind::AttIdentity,
    OpKind::Conv1,      OpKind::AtrousConv1,  OpKind::SepConv1,    OpKind::ShuffleConv1};

enum class StrideClass { Down, Normal, Up };
enum class CellType { Normal = 0, Down = 1, Up = 2 };
enum class EdgeClass { Special, Normal };

/// Canonical serialization name, e.g. "sep_conv_2".
std::string_view op_name(OpKind kind);
/// Inverse of op_name; throws InvalidConfig on unknown names.
OpKind op_from_name(std::string_view name);
StrideClass stride_class(OpKind kind);
std::string_view cell_type_name(CellType type);

struct OpConfig {
  int kernel = 3;
  int dilation = 1;
  /// Conv groups for shuffle-conv (the depthwise stage of sep-conv always
  /// uses groups = channels).
  int groups = 1;
  int se_ratio = 4;
  int norm_groups = 8;
};

/// Configuration each kind uses by default for the given widths.
OpConfig default_config(OpKind kind, int c_in, int c_out);

/// One candidate operation with its own parameters.
///
/// Conv-like kinds are conv -> group norm -> ReLU; att-kinds append a
/// squeeze-and-excitation gate; pooling between unequal widths is followed
/// by a 1x1 projection. Identity returns its input unchanged.
class OpInstance {
 public:
  OpKind kind() const { return kind_; }
  int in_channels() const { return c_in_; }
  int out_channels() const { return c_out_; }
  const OpConfig& config() const { return config_; }

  /// Learnable parameters in a fixed order.
  const std::vector<ParamPtr>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  /// Parameter by role suffix ("conv", "pointwise", "gn_gamma", "gn_beta",
  /// "se_w1", "se_b1", "se_w2", "se_b2", "proj"); null when absent.
  ParamPtr find(std::string_view role) const;

  Var apply(Tape& tape, Var x) const;

 private:
  friend OpInstance instantiate(OpKind, int, int, Rng&, std::string_view, std::optional<OpConfig>);

  Var conv_norm_relu(Tape& tape, Var x) const;
  Var squeeze_excite(Tape& tape, Var x) const;
  Var norm_relu(Tape& tape, Var x) const;

  OpKind kind_ = OpKind::Identity;
  int c_in_ = 0;
  int c_out_ = 0;
  OpConfig config_;
  std::vector<ParamPtr> params_;
  std::vector<std::string> roles_;
};

/// Builds a kind at the given widths. Kernels are drawn from
/// U(-sqrt(6/fan_in), sqrt(6/fan_in)); norm affine starts at (1, 0); SE
/// biases start at 0. Throws UnsupportedConfig when the widths cannot
/// satisfy the kind's grouping constraints.
OpInstance instantiate(OpKind kind, int c_in, int c_out, Rng& rng, std::string_view prefix = "op",
                       std::optional<OpConfig> config = std::nullopt);

/// Candidate kinds for an edge, in catalog order.
///   (Down, Special) -> the 6 Down-ops
///   (Up, Special)   -> the 4 Up-ops
///   (any, Normal)   -> the 6 Normal-ops
/// (Normal, Special) throws InvalidQuery.
std::vector<OpKind> candidate_set(CellType type, EdgeClass edge_class);

/// Which catalog set a candidate list is drawn from: 0 = Down-ops,
/// 1 = Normal-ops, 2 = Up-ops.
int op_set_index(CellType type, EdgeClass edge_class);

}  // namespace mixsearch::ops
