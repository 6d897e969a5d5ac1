#include "mixsearch/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "mixsearch/error.hpp"
#include "mixsearch/optim.hpp"
#include "mixsearch/parallel.hpp"

namespace mixsearch::tasks {

namespace {

constexpr double kPi = std::numbers::pi;

int norm_groups_for(int c) {
  for (int g = std::min(c, 8); g > 1; --g)
    if (c % g == 0) return g;
  return 1;
}

Tensor uniform_kernel(Shape s, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

// Inside test for one object, at pixel centers in image coordinates.
struct Shape2d {
  ShapeFamily family;
  double cx = 0, cy = 0;
  double a = 0, b = 0, theta = 0;  // ellipse semi-axes and rotation
  double inner = 0;                // annulus inner radius (outer radius in a)
  std::vector<std::pair<double, double>> poly;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    switch (family) {
      case ShapeFamily::Ellipse: {
        const double c = std::cos(theta), s = std::sin(theta);
        const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
        return u * u + v * v <= 1.0;
      }
      case ShapeFamily::Annulus: {
        const double r2 = dx * dx + dy * dy;
        return r2 <= a * a && r2 >= inner * inner;
      }
      case ShapeFamily::Polygon: {
        bool in = false;
        for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
          const auto [xi, yi] = poly[i];
          const auto [xj, yj] = poly[j];
          if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) in = !in;
        }
        return in;
      }
    }
    return false;
  }
};

// Draws an object of the requested area; returns its bounding radius.
Shape2d draw_shape(ShapeFamily family, double area, Rng& rng, double& radius) {
  Shape2d s;
  s.family = family;
  switch (family) {
    case ShapeFamily::Ellipse: {
      const double ratio = rng.uniform(0.6, 1.0);
      s.a = std::sqrt(area / (kPi * ratio));
      s.b = ratio * s.a;
      s.theta = rng.uniform(0.0, kPi);
      radius = s.a;
      break;
    }
    case ShapeFamily::Annulus: {
      const double q = rng.uniform(0.4, 0.6);
      s.a = std::sqrt(area / (kPi * (1.0 - q * q)));
      s.inner = q * s.a;
      radius = s.a;
      break;
    }
    case ShapeFamily::Polygon: {
      const int n = 5 + static_cast<int>(rng.index(4));
      std::vector<double> angle(n), rad(n);
      for (int i = 0; i < n; ++i) {
        angle[i] = 2.0 * kPi * (i + rng.uniform(0.1, 0.9)) / n;
        rad[i] = rng.uniform(0.7, 1.0);
      }
      double unit = 0.0;  // shoelace area of the unit-scale polygon
      for (int i = 0; i < n; ++i) {
        const int j = (i + 1) % n;
        unit += 0.5 * rad[i] * rad[j] * std::sin(angle[j] - angle[i] + (j == 0 ? 2.0 * kPi : 0.0));
      }
      const double scale = std::sqrt(area / unit);
      const double rot = rng.uniform(0.0, 2.0 * kPi);
      radius = 0.0;
      for (int i = 0; i < n; ++i) {
        const double r = scale * rad[i];
        s.poly.emplace_back(r * std::cos(angle[i] + rot), r * std::sin(angle[i] + rot));
        radius = std::max(radius, r);
      }
      break;
    }
  }
  return s;
}

Sample make_sample(const DomainSpec& spec, Rng& rng, const std::string& id) {
  const int h = spec.height, w = spec.width;
  Tensor mask({1, 1, h, w});
  double count = 0.0;
  for (int attempt = 0; attempt < 64 && count == 0.0; ++attempt) {
    const double area = rng.uniform(spec.size_min, spec.size_max) * h * w;
    double radius = 0.0;
    Shape2d s = draw_shape(spec.family, area, rng, radius);
    s.cx = w > 2 * radius ? rng.uniform(radius, w - radius) : 0.5 * w;
    s.cy = h > 2 * radius ? rng.uniform(radius, h - radius) : 0.5 * h;
    for (auto& [px, py] : s.poly) {
      px += s.cx;
      py += s.cy;
    }
    mask.fill(0.0);
    count = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (s.contains(x + 0.5, y + 0.5)) {
          mask.at(0, 0, y, x) = 1.0;
          count += 1.0;
        }
  }
  if (count == 0.0) throw Error(Errc::DegenerateSpec, spec.name + ": could not draw a nonempty mask");

  const bool bright = spec.polarity == Polarity::BrightOnDark;
  const double bg = bright ? rng.uniform(0.1, 0.3) : rng.uniform(0.6, 0.85);
  const double fg = bright ? rng.uniform(0.6, 0.9) : rng.uniform(0.15, 0.35);
  std::array<double, 9> wave{};  // (fx, fy, phase) for three texture waves
  for (double& v : wave) v = rng.uniform();
  Tensor image({1, 1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double tex = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double fx = 0.5 + 2.5 * wave[3 * k], fy = 0.5 + 2.5 * wave[3 * k + 1];
        tex += std::sin(2.0 * kPi * (fx * x / w + fy * y / h + wave[3 * k + 2]));
      }
      const double m = mask.at(0, 0, y, x);
      const double v = bg + (fg - bg) * m + spec.noise * tex / 3.0 + 0.5 * spec.noise * rng.normal();
      image.at(0, 0, y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  Tensor label({1, 2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      label.at(0, 1, y, x) = mask.at(0, 0, y, x);
      label.at(0, 0, y, x) = 1.0 - mask.at(0, 0, y, x);
    }
  Sample out;
  out.image = std::move(image);
  out.label = std::move(label);
  out.domain_id = spec.domain_id;
  out.sample_id = id;
  out.sources = {id};
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Names

std::string_view family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Ellipse: return "ellipse";
    case ShapeFamily::Polygon: return "polygon";
    case ShapeFamily::Annulus: return "annulus";
  }
  throw Error(Errc::InvalidConfig, "unknown shape family");
}

ShapeFamily family_from_name(std::string_view name) {
  for (auto f : {ShapeFamily::Ellipse, ShapeFamily::Polygon, ShapeFamily::Annulus})
    if (family_name(f) == name) return f;
  throw Error(Errc::InvalidConfig, "unknown shape family '" + std::string(name) + "'");
}

std::string_view polarity_name(Polarity p) {
  return p == Polarity::BrightOnDark ? "bright_on_dark" : "dark_on_bright";
}

Polarity polarity_from_name(std::string_view name) {
  if (name == "bright_on_dark") return Polarity::BrightOnDark;
  if (name == "dark_on_bright") return Polarity::DarkOnBright;
  throw Error(Errc::InvalidConfig, "unknown polarity '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Domains

void DomainSpec::validate() const {
  if (name.empty()) throw Error(Errc::DegenerateSpec, "domain needs a name");
  if (height < 4 || width < 4) throw Error(Errc::DegenerateSpec, name + ": image smaller than 4x4");
  if (!(size_min > 0.0) || !(size_min <= size_max) || size_max > 0.4) {
    throw Error(Errc::DegenerateSpec, name + ": size range must satisfy 0 < min <= max <= 0.4");
  }
  if (size_min * height * width < 4.0) {
    throw Error(Errc::DegenerateSpec, name + ": objects smaller than 4 pixels");
  }
  if (!(noise >= 0.0) || noise > 1.0) throw Error(Errc::DegenerateSpec, name + ": noise must lie in [0, 1]");
  if (train_count < 0 || test_count < 0) throw Error(Errc::DegenerateSpec, name + ": negative count");
  if (domain_id < 0) throw Error(Errc::DegenerateSpec, name + ": negative domain id");
}

std::vector<DomainSpec> default_domains(int height, int width) {
  DomainSpec e{"ellipse", 0, ShapeFamily::Ellipse, Polarity::BrightOnDark, 0.05, 0.08, 0.25,
               height, width};
  DomainSpec p{"polygon", 1, ShapeFamily::Polygon, Polarity::DarkOnBright, 0.15, 0.10, 0.30,
               height, width};
  DomainSpec a{"annulus", 2, ShapeFamily::Annulus, Polarity::DarkOnBright, 0.08, 0.10, 0.30,
               height, width};
  return {e, p, a};
}

Dataset gen_domain(const DomainSpec& spec, int n, std::uint64_t seed, Split split) {
  spec.validate();
  if (n < 1) throw Error(Errc::InvalidConfig, spec.name + ": sample count must be at least 1");
  const std::uint64_t stream =
      derive_seed(seed, static_cast<std::uint64_t>(spec.domain_id), split == Split::Train ? 0 : 1);
  const char* tag = split == Split::Train ? "train" : "test";
  Dataset ds;
  ds.name = spec.name;
  ds.samples.resize(static_cast<std::size_t>(n));
  parallel_for(ds.samples.size(), [&](std::size_t i) {
    Rng rng(derive_seed(stream, i));
    char id[96];
    std::snprintf(id, sizeof id, "%s_%s_%05zu", spec.name.c_str(), tag, i);
    ds.samples[i] = make_sample(spec, rng, id);
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Loss and metrics

void LossConfig::validate() const {
  if (!(ce_weight >= 0.0) || !(dice_weight >= 0.0) || !(ce_weight + dice_weight > 0.0)) {
    throw Error(Errc::InvalidConfig, "loss weights must be non-negative with a positive sum");
  }
  if (!(dice_smooth >= 0.0)) throw Error(Errc::InvalidConfig, "dice_smooth must be >= 0");
}

Var cross_entropy(Tape& tape, Var logits, const Tensor& target) {
  const Shape s = logits.shape();
  if (!(s == target.shape())) {
    throw Error(Errc::ShapeMismatch, "cross entropy: logits " + s.str() + " vs target " +
                                         target.shape().str());
  }
  Var ll = ad::sum(ad::mul(ad::log_softmax_channels(logits), tape.constant(target)));
  return ad::scale(ll, -1.0 / static_cast<double>(s.n * s.plane()));
}

Var soft_dice(Tape& tape, Var probs, const Tensor& target, double smooth) {
  const Shape s = probs.shape();
  if (!(s == target.shape())) {
    throw Error(Errc::ShapeMismatch, "soft dice: probs " + s.str() + " vs target " +
                                         target.shape().str());
  }
  if (s.c < 2) throw Error(Errc::ShapeMismatch, "soft dice needs a background and a foreground class");
  Tensor target_sum({s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (double v : target.plane(n, c)) target_sum.at(n, c, 0, 0) += v;
  Var t = tape.constant(target);
  Var inter = ad::sum_spatial(ad::mul(probs, t));
  Var num = ad::add_scalar(ad::scale(inter, 2.0), smooth);
  Var den = ad::add_scalar(ad::add(ad::sum_spatial(probs), tape.constant(target_sum)), smooth);
  Tensor fg({1, s.c, 1, 1}, 1.0);
  fg[0] = 0.0;
  Var per_class = ad::mul(ad::div(num, den), tape.constant(fg));
  return ad::scale(ad::sum(per_class), 1.0 / static_cast<double>(s.n * (s.c - 1)));
}

Var seg_loss(Tape& tape, Var logits, const Tensor& target, const LossConfig& cfg) {
  cfg.validate();
  Var ce = ad::scale(cross_entropy(tape, logits, target), cfg.ce_weight);
  Var dice = soft_dice(tape, ad::softmax_channels(logits), target, cfg.dice_smooth);
  Var dice_loss = ad::scale(ad::add_scalar(ad::scale(dice, -1.0), 1.0), cfg.dice_weight);
  return ad::add(ce, dice_loss);
}

Var seg_loss(Tape& tape, const std::vector<Var>& heads, const Tensor& target,
             const LossConfig& cfg) {
  if (heads.empty()) throw Error(Errc::ShapeMismatch, "seg_loss needs at least one head");
  if (!cfg.deep_supervision) return seg_loss(tape, heads.back(), target, cfg);
  Var total = seg_loss(tape, heads[0], target, cfg);
  for (std::size_t i = 1; i < heads.size(); ++i) total = ad::add(total, seg_loss(tape, heads[i], target, cfg));
  return ad::scale(total, 1.0 / static_cast<double>(heads.size()));
}

Overlap dice_jaccard(const Tensor& pred, const Tensor& gt) {
  if (!(pred.shape() == gt.shape())) {
    throw Error(Errc::ShapeMismatch, "dice_jaccard: " + pred.shape().str() + " vs " + gt.shape().str());
  }
  double p = 0.0, g = 0.0, both = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] > 0.5, b = gt[i] > 0.5;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0.0) return {};
  return {2.0 * both / (p + g), both / (p + g - both)};
}

Tensor foreground_mask(const Tensor& scores) {
  const Shape& s = scores.shape();
  Tensor out({s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double best = scores.at(n, 1 % s.c, y, x);
        for (int c = 2; c < s.c; ++c) best = std::max(best, scores.at(n, c, y, x));
        out.at(n, 0, y, x) = s.c > 1 && best > scores.at(n, 0, y, x) ? 1.0 : 0.0;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Models

std::size_t SegModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p->numel();
  return n;
}

std::vector<std::string> WeaveModel::head_names() const {
  std::vector<std::string> out;
  for (weave::Node h : net_.heads()) out.push_back("X0_" + std::to_string(h.l));
  return out;
}

MicroUNet::MicroUNet(int in_channels, int base_channels, int num_classes, Rng& rng) {
  if (in_channels < 1 || base_channels < 1 || num_classes < 2) {
    throw Error(Errc::InvalidConfig, "micro U-Net needs positive widths and at least 2 classes");
  }
  const int c0 = base_channels, c1 = 2 * c0, c2 = 4 * c0;
  enc0_ = make_block("unet.enc0", in_channels, c0, rng);
  enc1_ = make_block("unet.enc1", c0, c1, rng);
  mid_ = make_block("unet.mid", c1, c2, rng);
  dec1_ = make_block("unet.dec1", c2 + c1, c1, rng);
  dec0_ = make_block("unet.dec0", c1 + c0, c0, rng);
  head_w_ = make_param("unet.head.w", uniform_kernel({num_classes, c0, 1, 1}, c0, rng));
  head_b_ = make_param("unet.head.b", Tensor({1, num_classes, 1, 1}));
  params_.push_back(head_w_);
  params_.push_back(head_b_);
}

MicroUNet::Block MicroUNet::make_block(const std::string& name, int c_in, int c_out, Rng& rng) {
  Block b;
  b.w1 = make_param(name + ".conv1", uniform_kernel({c_out, c_in, 3, 3}, c_in * 9, rng));
  b.g1 = make_param(name + ".gn1_gamma", Tensor({1, c_out, 1, 1}, 1.0));
  b.b1 = make_param(name + ".gn1_beta", Tensor({1, c_out, 1, 1}));
  b.w2 = make_param(name + ".conv2", uniform_kernel({c_out, c_out, 3, 3}, c_out * 9, rng));
  b.g2 = make_param(name + ".gn2_gamma", Tensor({1, c_out, 1, 1}, 1.0));
  b.b2 = make_param(name + ".gn2_beta", Tensor({1, c_out, 1, 1}));
  for (const auto& p : {b.w1, b.g1, b.b1, b.w2, b.g2, b.b2}) params_.push_back(p);
  return b;
}

Var MicroUNet::run_block(Tape& tape, const Block& b, Var x) const {
  const int c = b.g1->value.shape().c;
  const ad::ConvOptions same{.stride = 1, .padding = 1};
  x = ad::conv2d(x, tape.leaf(b.w1), nullptr, same);
  x = ad::relu(ad::group_norm(x, tape.leaf(b.g1), tape.leaf(b.b1), norm_groups_for(c)));
  x = ad::conv2d(x, tape.leaf(b.w2), nullptr, same);
  return ad::relu(ad::group_norm(x, tape.leaf(b.g2), tape.leaf(b.b2), norm_groups_for(c)));
}

std::vector<Var> MicroUNet::forward(Tape& tape, Var x) const {
  const Shape s = x.shape();
  if (s.h % 4 != 0 || s.w % 4 != 0) {
    throw Error(Errc::ShapeMismatch, "micro U-Net input " + s.str() + " not divisible by 4");
  }
  Var e0 = run_block(tape, enc0_, x);
  Var e1 = run_block(tape, enc1_, ad::avg_pool2(e0));
  Var m = run_block(tape, mid_, ad::avg_pool2(e1));
  const std::vector<Var> cat1{ad::upsample_bilinear2x(m), e1};
  Var d1 = run_block(tape, dec1_, ad::concat_channels(cat1));
  const std::vector<Var> cat0{ad::upsample_bilinear2x(d1), e0};
  Var d0 = run_block(tape, dec0_, ad::concat_channels(cat0));
  Var bias = tape.leaf(head_b_);
  return {ad::conv2d(d0, tape.leaf(head_w_), &bias, {})};
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw Error(Errc::InvalidConfig, "epochs and batch_size must be >= 1");
  if (!(lr > 0.0)) throw Error(Errc::InvalidConfig, "learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(Errc::InvalidConfig, "momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw Error(Errc::InvalidConfig, "weight decay must be >= 0");
  loss.validate();
}

TrainLog train_model(SegModel& model, const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw Error(Errc::EmptyDataset, "training set '" + train.name + "' is empty");
  const std::size_t n = train.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs);
  // The schedule reaches zero on the final step.
  const std::size_t horizon = std::max<std::size_t>(1, total - 1);
  optim::Sgd sgd(model.parameters(), cfg.momentum, cfg.weight_decay);

  TrainLog log;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, 0x7261696eULL, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::vector<std::size_t> idx(order.begin() + b * bs, order.begin() + std::min(n, (b + 1) * bs));
      const Batch batch = make_batch(train, idx);
      sgd.zero_grad();
      double value = 0.0;
      {
        Tape tape;
        Var loss = seg_loss(tape, model.forward(tape, tape.constant(batch.images)), batch.labels, cfg.loss);
        value = loss.value()[0];
        if (!std::isfinite(value)) {
          throw Error(Errc::NonFiniteLoss, "training loss is not finite at step " + std::to_string(step));
        }
        tape.backward(loss);
      }
      const double lr = optim::cosine_lr(cfg.lr, step, horizon);
      if (step == 0) log.first_lr = lr;
      log.last_lr = lr;
      sgd.step(lr);
      sum += value;
    }
    log.epoch_loss.push_back(sum / static_cast<double>(per_epoch));
  }
  log.steps = step;
  return log;
}

std::unique_ptr<WeaveModel> retrain(const weave::Genotype& genotype, const weave::GridSpec& grid,
                                    const Dataset& train, const TrainConfig& cfg, TrainLog* log) {
  Rng rng(derive_seed(cfg.seed, 0x696e6974ULL));
  auto model = std::make_unique<WeaveModel>(weave::realize(genotype, grid, rng));
  TrainLog l = train_model(*model, train, cfg);
  if (log) *log = std::move(l);
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(const SegModel& model, const Dataset& test, HeadMode heads) {
  if (test.empty()) throw Error(Errc::EmptyDataset, "test set '" + test.name + "' is empty");
  const auto start = std::chrono::steady_clock::now();
  const std::vector<std::string> names = model.head_names();
  const std::size_t n = test.size();
  constexpr std::size_t kBatch = 8;
  const std::size_t batches = (n + kBatch - 1) / kBatch;
  // scores[h][i]: per-sample overlap of head h.
  std::vector<std::vector<Overlap>> scores(names.size(), std::vector<Overlap>(n));
  parallel_for(batches, [&](std::size_t b) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b * kBatch; i < std::min(n, (b + 1) * kBatch); ++i) idx.push_back(i);
    const Batch batch = make_batch(test, idx);
    Tape tape;
    tape.set_grad_enabled(false);
    const auto out = model.forward(tape, tape.constant(batch.images));
    if (out.size() != names.size()) throw Error(Errc::ShapeMismatch, "model returned an unexpected head count");
    const Tensor gt = foreground_mask(batch.labels);
    for (std::size_t h = 0; h < out.size(); ++h) {
      const Tensor pred = foreground_mask(out[h].value());
      for (std::size_t j = 0; j < idx.size(); ++j) {
        scores[h][idx[j]] = dice_jaccard(slice_batch(pred, static_cast<int>(j)),
                                         slice_batch(gt, static_cast<int>(j)));
      }
    }
  });

  EvalReport report;
  report.dataset = test.name;
  report.samples = n;
  report.parameter_count = model.parameter_count();
  for (std::size_t h = 0; h < names.size(); ++h) {
    if (heads == HeadMode::Final && h + 1 != names.size()) continue;
    double d = 0.0, j = 0.0;
    for (const Overlap& o : scores[h]) {
      d += o.dice;
      j += o.jaccard;
    }
    report.heads.push_back({names[h], 100.0 * d / n, 100.0 * j / n});
  }
  report.dice = report.heads.back().dice;
  report.jaccard = report.heads.back().jaccard;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace mixsearch::tasks
