#include "mixsearch/ops.hpp"

#include <algorithm>
#include <cmath>

#include "mixsearch/error.hpp"

namespace mixsearch::ops {

namespace {

struct KindInfo {
  OpKind kind;
  std::string_view name;
  StrideClass stride;
};

constexpr std::array<KindInfo, kNumOpKinds> kInfo{{
    {OpKind::AvgPool2, "avg_pool_2", StrideClass::Down},
    {OpKind::MaxPool2, "max_pool_2", StrideClass::Down},
    {OpKind::Conv2, "conv_2", StrideClass::Down},
    {OpKind::AtrousConv2, "atrous_conv_2", StrideClass::Down},
    {OpKind::SepConv2, "sep_conv_2", StrideClass::Down},
    {OpKind::AttConv2, "att_conv_2", StrideClass::Down},
    {OpKind::ConvT2, "convt_2", StrideClass::Up},
    {OpKind::AtrousConvT2, "atrous_convt_2", StrideClass::Up},
    {OpKind::SepConvT2, "sep_convt_2", StrideClass::Up},
    {OpKind::AttConvT2, "att_convt_2", StrideClass::Up},
    {OpKind::Identity, "identity", StrideClass::Normal},
    {OpKind::AttIdentity, "att_identity", StrideClass::Normal},
    {OpKind::Conv1, "conv_1", StrideClass::Normal},
    {OpKind::AtrousConv1, "atrous_conv_1", StrideClass::Normal},
    {OpKind::SepConv1, "sep_conv_1", StrideClass::Normal},
    {OpKind::ShuffleConv1, "shuffle_conv_1", StrideClass::Normal},
}};

const KindInfo& info(OpKind kind) {
  const auto i = static_cast<std::size_t>(kind);
  if (i >= kInfo.size()) throw Error(Errc::InvalidQuery, "unknown op kind");
  return kInfo[i];
}

bool is_atrous(OpKind k) {
  return k == OpKind::AtrousConv2 || k == OpKind::AtrousConvT2 || k == OpKind::AtrousConv1;
}
bool is_att(OpKind k) {
  return k == OpKind::AttConv2 || k == OpKind::AttConvT2 || k == OpKind::AttIdentity;
}
bool is_sep(OpKind k) {
  return k == OpKind::SepConv2 || k == OpKind::SepConvT2 || k == OpKind::SepConv1;
}
bool is_pool(OpKind k) { return k == OpKind::AvgPool2 || k == OpKind::MaxPool2; }
bool is_identity(OpKind k) { return k == OpKind::Identity || k == OpKind::AttIdentity; }

int largest_divisor_up_to(int c, int cap) {
  for (int g = std::min(c, cap); g > 1; --g) {
    if (c % g == 0) return g;
  }
  return 1;
}

Tensor uniform_kernel(Shape s, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  Tensor t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

std::string_view op_name(OpKind kind) { return info(kind).name; }

OpKind op_from_name(std::string_view name) {
  for (const auto& e : kInfo) {
    if (e.name == name) return e.kind;
  }
  throw Error(Errc::InvalidConfig, "unknown op name '" + std::string(name) + "'");
}

StrideClass stride_class(OpKind kind) { return info(kind).stride; }

std::string_view cell_type_name(CellType type) {
  switch (type) {
    case CellType::Normal: return "normal";
    case CellType::Down: return "down";
    case CellType::Up: return "up";
  }
  throw Error(Errc::InvalidQuery, "unknown cell type");
}

OpConfig default_config(OpKind kind, int /*c_in*/, int c_out) {
  OpConfig cfg;
  cfg.dilation = is_atrous(kind) ? 2 : 1;
  cfg.groups = kind == OpKind::ShuffleConv1 ? 4 : 1;
  cfg.norm_groups = largest_divisor_up_to(c_out, 8);
  return cfg;
}

std::size_t OpInstance::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->numel();
  return n;
}

ParamPtr OpInstance::find(std::string_view role) const {
  for (std::size_t i = 0; i < roles_.size(); ++i) {
    if (roles_[i] == role) return params_[i];
  }
  return nullptr;
}

OpInstance instantiate(OpKind kind, int c_in, int c_out, Rng& rng, std::string_view prefix,
                       std::optional<OpConfig> config) {
  if (c_in < 1 || c_out < 1) {
    throw Error(Errc::UnsupportedConfig, "channel counts must be positive");
  }
  OpInstance op;
  op.kind_ = kind;
  op.c_in_ = c_in;
  op.c_out_ = c_out;
  op.config_ = config ? *config : default_config(kind, c_in, c_out);
  const OpConfig& cfg = op.config_;
  const std::string tag = std::string(prefix) + "." + std::string(op_name(kind));

  if (cfg.kernel != 3) throw Error(Errc::UnsupportedConfig, tag + ": kernel must be 3");
  if (cfg.dilation < 1 || cfg.groups < 1 || cfg.se_ratio < 1 || cfg.norm_groups < 1) {
    throw Error(Errc::UnsupportedConfig, tag + ": non-positive configuration value");
  }
  if (is_identity(kind) && c_in != c_out) {
    throw Error(Errc::UnsupportedConfig, tag + ": identity needs equal channel counts");
  }
  if (kind == OpKind::ShuffleConv1 && (c_in % cfg.groups != 0 || c_out % cfg.groups != 0)) {
    throw Error(Errc::UnsupportedConfig, tag + ": shuffle groups " + std::to_string(cfg.groups) +
                                             " must divide " + std::to_string(c_in) + " and " +
                                             std::to_string(c_out));
  }
  const bool has_norm = !is_pool(kind) && !is_identity(kind);
  if (has_norm && c_out % cfg.norm_groups != 0) {
    throw Error(Errc::UnsupportedConfig, tag + ": norm groups must divide output channels");
  }

  auto add = [&](std::string role, Tensor value) {
    op.params_.push_back(make_param(tag + "." + role, std::move(value)));
    op.roles_.push_back(std::move(role));
  };
  const int k = cfg.kernel;

  if (is_pool(kind)) {
    if (c_in != c_out) add("proj", uniform_kernel({c_out, c_in, 1, 1}, c_in, rng));
  } else if (is_sep(kind)) {
    // Transposed weights are laid out (c_in, c_out/groups, k, k); with
    // groups = c_in both layouts are (c_in, 1, k, k).
    add("conv", uniform_kernel({c_in, 1, k, k}, k * k, rng));
    add("pointwise", uniform_kernel({c_out, c_in, 1, 1}, c_in, rng));
  } else if (stride_class(kind) == StrideClass::Up) {
    add("conv", uniform_kernel({c_in, c_out, k, k}, c_in * k * k, rng));
  } else if (!is_identity(kind)) {
    const int g = kind == OpKind::ShuffleConv1 ? cfg.groups : 1;
    add("conv", uniform_kernel({c_out, c_in / g, k, k}, (c_in / g) * k * k, rng));
  }
  if (has_norm) {
    add("gn_gamma", Tensor({1, c_out, 1, 1}, 1.0));
    add("gn_beta", Tensor({1, c_out, 1, 1}, 0.0));
  }
  if (is_att(kind)) {
    const int hidden = std::max(1, c_out / cfg.se_ratio);
    add("se_w1", uniform_kernel({hidden, c_out, 1, 1}, c_out, rng));
    add("se_b1", Tensor({1, hidden, 1, 1}, 0.0));
    add("se_w2", uniform_kernel({c_out, hidden, 1, 1}, hidden, rng));
    add("se_b2", Tensor({1, c_out, 1, 1}, 0.0));
  }
  return op;
}

Var OpInstance::norm_relu(Tape& tape, Var x) const {
  Var y = ad::group_norm(x, tape.leaf(find("gn_gamma")), tape.leaf(find("gn_beta")),
                         config_.norm_groups);
  return ad::relu(y);
}

Var OpInstance::squeeze_excite(Tape& tape, Var x) const {
  Var s = ad::global_avg_pool(x);
  Var b1 = tape.leaf(find("se_b1"));
  Var b2 = tape.leaf(find("se_b2"));
  Var h = ad::relu(ad::conv2d(s, tape.leaf(find("se_w1")), &b1, {}));
  Var gate = ad::sigmoid(ad::conv2d(h, tape.leaf(find("se_w2")), &b2, {}));
  return ad::mul(x, gate);
}

Var OpInstance::conv_norm_relu(Tape& tape, Var x) const {
  const int d = config_.dilation;
  const StrideClass sc = stride_class(kind_);
  Var w = tape.leaf(find("conv"));
  Var y;
  if (sc == StrideClass::Up) {
    // Output padding 1 makes the output exactly twice the input for k=3
    // with padding = dilation.
    ad::ConvTransposeOptions opt{2, d, d, 1, is_sep(kind_) ? c_in_ : 1};
    y = ad::conv_transpose2d(x, w, nullptr, opt);
  } else {
    ad::ConvOptions opt{sc == StrideClass::Down ? 2 : 1, d, d, 1};
    if (is_sep(kind_)) opt.groups = c_in_;
    if (kind_ == OpKind::ShuffleConv1) opt.groups = config_.groups;
    y = ad::conv2d(x, w, nullptr, opt);
  }
  if (is_sep(kind_)) y = ad::conv2d(y, tape.leaf(find("pointwise")), nullptr, {});
  if (kind_ == OpKind::ShuffleConv1 && config_.groups > 1) {
    y = ad::channel_shuffle(y, config_.groups);
  }
  return norm_relu(tape, y);
}

Var OpInstance::apply(Tape& tape, Var x) const {
  const Shape s = x.shape();
  if (s.c != c_in_) {
    throw Error(Errc::ShapeMismatch, std::string(op_name(kind_)) + ": expected " +
                                         std::to_string(c_in_) + " channels, got " + s.str());
  }
  if (stride_class(kind_) == StrideClass::Down && (s.h % 2 != 0 || s.w % 2 != 0)) {
    throw Error(Errc::OddSpatialSize, std::string(op_name(kind_)) + " on " + s.str());
  }
  switch (kind_) {
    case OpKind::Identity:
      return x;
    case OpKind::AttIdentity:
      return squeeze_excite(tape, x);
    case OpKind::AvgPool2:
    case OpKind::MaxPool2: {
      Var y = kind_ == OpKind::AvgPool2 ? ad::avg_pool2(x) : ad::max_pool2(x);
      if (auto proj = find("proj")) y = ad::conv2d(y, tape.leaf(proj), nullptr, {});
      return y;
    }
    default:
      break;
  }
  Var y = conv_norm_relu(tape, x);
  return is_att(kind_) ? squeeze_excite(tape, y) : y;
}

std::vector<OpKind> candidate_set(CellType type, EdgeClass edge_class) {
  std::vector<OpKind> out;
  StrideClass want = StrideClass::Normal;
  if (edge_class == EdgeClass::Special) {
    if (type == CellType::Normal) {
      throw Error(Errc::InvalidQuery, "normal cells have no special edges");
    }
    want = type == CellType::Down ? StrideClass::Down : StrideClass::Up;
  }
  for (const auto& e : kInfo) {
    if (e.stride == want) out.push_back(e.kind);
  }
  return out;
}

int op_set_index(CellType type, EdgeClass edge_class) {
  if (edge_class == EdgeClass::Normal) return 1;
  if (type == CellType::Normal) throw Error(Errc::InvalidQuery, "normal cells have no special edges");
  return type == CellType::Down ? 0 : 2;
}

}  // namespace mixsearch::ops
