#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mixsearch/autodiff.hpp"
#include "mixsearch/dataset.hpp"
#include "mixsearch/rng.hpp"
#include "mixsearch/weave.hpp"

namespace mixsearch::tasks {

// ---------------------------------------------------------------------------
// Synthetic domains

enum class ShapeFamily { Ellipse, Polygon, Annulus };
enum class Polarity { BrightOnDark, DarkOnBright };

std::string_view family_name(ShapeFamily f);
ShapeFamily family_from_name(std::string_view name);
std::string_view polarity_name(Polarity p);
Polarity polarity_from_name(std::string_view name);

/// One synthetic segmentation domain. Each image holds a single foreground
/// object whose area is a uniform fraction of the image in
/// [size_min, size_max], drawn over a low-frequency texture.
struct DomainSpec {
  std::string name = "ellipse";
  int domain_id = 0;
  ShapeFamily family = ShapeFamily::Ellipse;
  Polarity polarity = Polarity::BrightOnDark;
  /// Amplitude of the background texture; pixel noise is half of it.
  double noise = 0.05;
  double size_min = 0.08;
  double size_max = 0.25;
  int height = 32;
  int width = 32;
  int train_count = 200;
  int test_count = 100;

  /// Throws DegenerateSpec when masks could come out empty or the object
  /// cannot fit the image.
  void validate() const;
};

/// Bright ellipses, dark textured polygons and dark annuli on a bright field.
std::vector<DomainSpec> default_domains(int height = 32, int width = 32);

enum class Split { Train, Test };

/// n samples with two classes (background, foreground). Deterministic in
/// (spec, n, seed, split); the two splits use disjoint random streams.
Dataset gen_domain(const DomainSpec& spec, int n, std::uint64_t seed, Split split = Split::Train);

// ---------------------------------------------------------------------------
// Loss and metrics

struct LossConfig {
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  /// Average the loss over every head instead of using the final one.
  bool deep_supervision = true;
  double dice_smooth = 1.0;

  void validate() const;  // InvalidConfig
};

/// Mean over batch and pixels of -sum_c t_c log softmax(logits)_c.
Var cross_entropy(Tape& tape, Var logits, const Tensor& target);

/// (2 sum p t + s) / (sum p + sum t + s) per sample and foreground class,
/// averaged. With s = 0 and binary inputs this is the hard Dice score.
Var soft_dice(Tape& tape, Var probs, const Tensor& target, double smooth);

/// ce_weight * CE + dice_weight * (1 - soft Dice), batch averaged.
/// Throws ShapeMismatch.
Var seg_loss(Tape& tape, Var logits, const Tensor& target, const LossConfig& cfg);
/// Over heads: their mean under deep supervision, otherwise the last head.
Var seg_loss(Tape& tape, const std::vector<Var>& heads, const Tensor& target,
             const LossConfig& cfg);

struct Overlap {
  double dice = 1.0;
  double jaccard = 1.0;
};

/// Binary masks of equal shape (entries 0 or 1). Both empty scores 1.
Overlap dice_jaccard(const Tensor& pred, const Tensor& gt);

/// Foreground where the foreground class strictly beats background, as
/// (n, 1, h, w) 0/1. Works on logits, probabilities or soft labels alike.
Tensor foreground_mask(const Tensor& scores);

// ---------------------------------------------------------------------------
// Models

/// A segmentation network with one or more logit heads; the last head is
/// the prediction.
class SegModel {
 public:
  virtual ~SegModel() = default;
  virtual std::vector<Var> forward(Tape& tape, Var x) const = 0;
  virtual std::vector<ParamPtr> parameters() const = 0;
  virtual std::vector<std::string> head_names() const = 0;
  std::size_t parameter_count() const;
};

/// A realized weave network.
class WeaveModel : public SegModel {
 public:
  explicit WeaveModel(weave::WeaveNet net) : net_(std::move(net)) {}
  std::vector<Var> forward(Tape& tape, Var x) const override { return net_.forward(tape, x); }
  std::vector<ParamPtr> parameters() const override {
    return net_.parameters(ParamGroup::Weight);
  }
  std::vector<std::string> head_names() const override;
  const weave::WeaveNet& net() const { return net_; }

 private:
  weave::WeaveNet net_;
};

/// Fixed three-level U-Net baseline: two 3x3 conv-norm-ReLU blocks per
/// level, channels C0, 2C0, 4C0, average-pool down, bilinear up with skip
/// concatenation, 1x1 classifier.
class MicroUNet : public SegModel {
 public:
  MicroUNet(int in_channels, int base_channels, int num_classes, Rng& rng);
  std::vector<Var> forward(Tape& tape, Var x) const override;
  std::vector<ParamPtr> parameters() const override { return params_; }
  std::vector<std::string> head_names() const override { return {"unet"}; }

 private:
  struct Block {
    ParamPtr w1, g1, b1, w2, g2, b2;
  };
  Block make_block(const std::string& name, int c_in, int c_out, Rng& rng);
  Var run_block(Tape& tape, const Block& b, Var x) const;

  Block enc0_, enc1_, mid_, dec1_, dec0_;
  ParamPtr head_w_, head_b_;
  std::vector<ParamPtr> params_;
};

// ---------------------------------------------------------------------------
// Training and evaluation

struct TrainConfig {
  int epochs = 200;
  int batch_size = 8;
  double lr = 5e-3;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
  LossConfig loss;

  void validate() const;  // InvalidConfig
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  double first_lr = 0.0;
  double last_lr = 0.0;  // learning rate of the final step
  std::size_t steps = 0;
};

/// Cosine-annealed momentum SGD over shuffled minibatches.
/// Throws NonFiniteLoss, EmptyDataset.
TrainLog train_model(SegModel& model, const Dataset& train, const TrainConfig& cfg);

/// Realizes the genotype on `grid` with fresh weights and trains it.
std::unique_ptr<WeaveModel> retrain(const weave::Genotype& genotype, const weave::GridSpec& grid,
                                    const Dataset& train, const TrainConfig& cfg,
                                    TrainLog* log = nullptr);

struct HeadScore {
  std::string head;
  double dice = 0.0;     // percent
  double jaccard = 0.0;  // percent
};

struct EvalReport {
  std::string dataset;
  std::size_t samples = 0;
  double dice = 0.0;     // percent, final head
  double jaccard = 0.0;  // percent, final head
  std::vector<HeadScore> heads;  // in head order, last = final
  std::size_t parameter_count = 0;
  double seconds = 0.0;
};

enum class HeadMode { Final, All };

/// Per-sample scores against the argmax of each label, averaged.
/// Throws EmptyDataset.
EvalReport evaluate(const SegModel& model, const Dataset& test, HeadMode heads = HeadMode::All);

}  // namespace mixsearch::tasks
