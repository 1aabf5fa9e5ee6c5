#pragma once

// Toy convolutional classifier with hand-written backprop, the plateau
// schedule, LR range test and softmax-mean ensembling.
//
// Architecture, input [Cin, S, S] with S divisible by 8:
//   3 x [conv3x3 -> norm -> ReLU -> maxpool2]
//   target norm                     <- CAM activations/gradients
//   conv3x3 -> ReLU -> global average pool -> dense -> K logits

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "schoolmap/augment.hpp"
#include "schoolmap/bundle.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/geojson.hpp"
#include "schoolmap/layers.hpp"
#include "schoolmap/rng.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::model {

struct ToyArch {
  int in_channels = 3;
  int image_size = 64;
  std::array<int, 3> block_channels{8, 16, 16};
  int final_channels = 16;
  int classes = 2;

  int target_size() const { return image_size / 8; }

  void validate() const {
    if (in_channels < 1 || final_channels < 1 || classes < 2) {
      throw ConfigError("toy model needs >= 1 input/final channel and >= 2 classes");
    }
    if (image_size < 8 || image_size % 8 != 0) {
      throw ConfigError("toy model image size must be a positive multiple of 8, got " +
                        std::to_string(image_size));
    }
    for (int c : block_channels)
      if (c < 1) throw ConfigError("toy model block channels must be positive");
  }

  friend bool operator==(const ToyArch&, const ToyArch&) = default;
};

inline nlohmann::json to_json(const ToyArch& a) {
  return {{"in_channels", a.in_channels},       {"image_size", a.image_size},
          {"block_channels", a.block_channels}, {"final_channels", a.final_channels},
          {"classes", a.classes}};
}

inline ToyArch arch_from_json(const nlohmann::json& j) {
  ToyArch a;
  a.in_channels = j.at("in_channels").get<int>();
  a.image_size = j.at("image_size").get<int>();
  a.block_channels = j.at("block_channels").get<std::array<int, 3>>();
  a.final_channels = j.at("final_channels").get<int>();
  a.classes = j.at("classes").get<int>();
  a.validate();
  return a;
}

template <typename Real>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<Real> value;
};

template <typename Real>
using Grads = std::vector<std::vector<Real>>;

// Parameter slots, in storage order.
enum Slot : std::size_t {
  kConvW0 = 0, kConvB0, kGamma0, kBeta0,
  kTargetGamma = 12, kTargetBeta, kFinalW, kFinalB, kDenseW, kDenseB, kSlotCount
};

inline constexpr std::size_t block_slot(int block, int offset) {
  return static_cast<std::size_t>(4 * block + offset);
}

template <typename Real>
class ToyClassifier {
 public:
  using Shape3 = layers::Shape3;

  struct Cache {
    std::array<std::vector<Real>, 3> block_in;
    std::array<std::vector<Real>, 3> relu_out;
    std::array<layers::NormCache<Real>, 3> norm;
    std::array<std::vector<std::size_t>, 3> argmax;
    std::vector<Real> conv_tmp;
    std::vector<Real> pooled;
    layers::NormCache<Real> target_norm;
    std::vector<Real> target;
    std::vector<Real> final_out;
    std::vector<Real> gap;
    std::vector<Real> logits;
  };

  // He-normal conv/dense weights; zero biases; unit norm scale.
  explicit ToyClassifier(ToyArch arch = {}, std::uint64_t seed = 0) : arch_(std::move(arch)) {
    arch_.validate();
    layout();
    std::mt19937_64 rng(seed);
    for (auto& p : params_) {
      const bool is_weight = p.shape.size() >= 2;
      const bool is_gamma = p.name.ends_with(".gamma");
      if (is_weight) {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < p.shape.size(); ++i) fan_in *= p.shape[i];
        std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : p.value) v = static_cast<Real>(n(rng));
      } else {
        std::fill(p.value.begin(), p.value.end(), is_gamma ? Real(1) : Real(0));
      }
    }
  }

  const ToyArch& arch() const { return arch_; }
  std::vector<Param<Real>>& params() { return params_; }
  const std::vector<Param<Real>>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Grads<Real> zero_grads() const {
    Grads<Real> g(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) g[i].assign(params_[i].value.size(), Real(0));
    return g;
  }

  template <typename To>
  ToyClassifier<To> cast() const {
    ToyClassifier<To> out(arch_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.params()[i].value.assign(params_[i].value.begin(), params_[i].value.end());
    }
    return out;
  }

  Shape3 input_shape() const { return {arch_.in_channels, arch_.image_size, arch_.image_size}; }
  Shape3 target_shape() const {
    return {arch_.block_channels[2], arch_.target_size(), arch_.target_size()};
  }

  void check_input(std::span<const Real> image) const {
    if (image.size() != input_shape().size()) {
      throw DataError("toy model expects " + std::to_string(input_shape().size()) +
                      " input values, got " + std::to_string(image.size()));
    }
  }

  // Image -> logits; the cache keeps everything backward needs.
  void forward(std::span<const Real> image, Cache& c) const {
    check_input(image);
    Shape3 s = input_shape();
    c.block_in[0].assign(image.begin(), image.end());
    for (int b = 0; b < 3; ++b) {
      const int cout = arch_.block_channels[b];
      const Shape3 so{cout, s.h, s.w};
      c.conv_tmp.resize(so.size());
      layers::conv3x3_forward<Real>(c.block_in[b], s, p(block_slot(b, 0)), p(block_slot(b, 1)),
                                    cout, c.conv_tmp);
      c.relu_out[b].resize(so.size());
      layers::norm_forward<Real>(c.conv_tmp, so, p(block_slot(b, 2)), p(block_slot(b, 3)),
                                 c.relu_out[b], c.norm[b]);
      layers::relu_forward<Real>(c.relu_out[b]);
      const Shape3 sp{cout, s.h / 2, s.w / 2};
      auto& dst = b < 2 ? c.block_in[b + 1] : c.pooled;
      dst.resize(sp.size());
      layers::maxpool2_forward<Real>(c.relu_out[b], so, dst, c.argmax[b]);
      s = sp;
    }
    c.target.resize(s.size());
    layers::norm_forward<Real>(c.pooled, s, p(kTargetGamma), p(kTargetBeta), c.target,
                               c.target_norm);
    head_forward(c);
  }

  // Target activations -> logits (the part of the network CAMs explain).
  std::vector<Real> head(std::span<const Real> activations) const {
    if (activations.size() != target_shape().size()) {
      throw DataError("target activations must have " + std::to_string(target_shape().size()) +
                      " values");
    }
    Cache c;
    c.target.assign(activations.begin(), activations.end());
    head_forward(c);
    return c.logits;
  }

  std::vector<Real> logits(std::span<const Real> image) const {
    Cache c;
    forward(image, c);
    return c.logits;
  }

  // Backpropagates d_logits. Accumulates parameter gradients into grads when
  // given; writes d(logits . d_logits)/d(target activations) into d_target
  // when given. Without grads the pass stops at the target layer.
  void backward(const Cache& c, std::span<const Real> d_logits, Grads<Real>* grads,
                std::vector<Real>* d_target = nullptr) const {
    const int K = arch_.classes, F = arch_.final_channels;
    const Shape3 st = target_shape();
    const std::size_t P = st.plane();
    Grads<Real> scratch;
    if (!grads) {
      scratch = zero_grads();
      grads = &scratch;
    }
    auto g = [&](std::size_t slot) { return std::span<Real>((*grads)[slot]); };

    const auto W = p(kDenseW);
    std::vector<Real> d_gap(F, Real(0));
    for (int k = 0; k < K; ++k) {
      g(kDenseB)[k] += d_logits[k];
      for (int f = 0; f < F; ++f) {
        g(kDenseW)[k * F + f] += d_logits[k] * c.gap[f];
        d_gap[f] += W[k * F + f] * d_logits[k];
      }
    }
    std::vector<Real> d_final(static_cast<std::size_t>(F) * P);
    for (int f = 0; f < F; ++f)
      for (std::size_t i = 0; i < P; ++i) d_final[f * P + i] = d_gap[f] / static_cast<Real>(P);
    layers::relu_backward<Real>(c.final_out, d_final);
    std::vector<Real> d_act(st.size(), Real(0));
    layers::conv3x3_backward<Real>(c.target, st, p(kFinalW), F, d_final, d_act, g(kFinalW),
                                   g(kFinalB));
    if (d_target) *d_target = d_act;
    if (grads == &scratch) return;

    std::vector<Real> d_pooled(st.size(), Real(0));
    layers::norm_backward<Real>(st, p(kTargetGamma), c.target_norm, d_act, d_pooled,
                                g(kTargetGamma), g(kTargetBeta));
    int h = arch_.image_size;
    std::array<int, 3> sizes{h, h / 2, h / 4};
    std::vector<Real> d_out = std::move(d_pooled);
    for (int b = 2; b >= 0; --b) {
      const int cout = arch_.block_channels[b];
      const int cin = b == 0 ? arch_.in_channels : arch_.block_channels[b - 1];
      const Shape3 so{cout, sizes[b], sizes[b]};
      std::vector<Real> d_relu(so.size(), Real(0));
      layers::maxpool2_backward<Real>(c.argmax[b], d_out, d_relu);
      layers::relu_backward<Real>(c.relu_out[b], d_relu);
      std::vector<Real> d_conv(so.size(), Real(0));
      layers::norm_backward<Real>(so, p(block_slot(b, 2)), c.norm[b], d_relu, d_conv,
                                  g(block_slot(b, 2)), g(block_slot(b, 3)));
      const Shape3 si{cin, sizes[b], sizes[b]};
      std::vector<Real> d_in(b == 0 ? 0 : si.size(), Real(0));
      layers::conv3x3_backward<Real>(c.block_in[b], si, p(block_slot(b, 0)), cout, d_conv, d_in,
                                     g(block_slot(b, 0)), g(block_slot(b, 1)));
      d_out = std::move(d_in);
    }
  }

  // Logits, softmax, target activations and the school-logit gradient.
  FeatureBundle bundle(const Tensor& image) const {
    const auto sh = input_shape();
    if (image.shape() != std::vector<std::size_t>{std::size_t(sh.c), std::size_t(sh.h),
                                                  std::size_t(sh.w)}) {
      throw DataError("toy model expects image " +
                      shape_string({std::size_t(sh.c), std::size_t(sh.h), std::size_t(sh.w)}) +
                      ", got " + shape_string(image.shape()));
    }
    std::vector<Real> x(image.data().begin(), image.data().end());
    Cache c;
    forward(x, c);
    std::vector<Real> d_logits(arch_.classes, Real(0));
    d_logits[kSchoolClass] = Real(1);
    std::vector<Real> d_act;
    backward(c, d_logits, nullptr, &d_act);
    const auto probs = softmax<Real>(c.logits);
    const auto st = target_shape();
    const std::vector<std::size_t> ts{std::size_t(st.c), std::size_t(st.h), std::size_t(st.w)};
    FeatureBundle b;
    b.logits = Tensor({c.logits.size()}, std::vector<float>(c.logits.begin(), c.logits.end()));
    b.softmax = Tensor({probs.size()}, std::vector<float>(probs.begin(), probs.end()));
    b.activations = Tensor(ts, std::vector<float>(c.target.begin(), c.target.end()));
    b.gradients = Tensor(ts, std::vector<float>(d_act.begin(), d_act.end()));
    return b;
  }

 private:
  std::span<const Real> p(std::size_t slot) const { return params_[slot].value; }

  void add(std::string name, std::vector<std::size_t> shape) {
    const std::size_t n = Tensor::count(shape);
    params_.push_back({std::move(name), std::move(shape), std::vector<Real>(n, Real(0))});
  }

  void layout() {
    params_.clear();
    std::size_t cin = arch_.in_channels;
    for (int b = 0; b < 3; ++b) {
      const std::size_t co = arch_.block_channels[b];
      const std::string pre = "block" + std::to_string(b);
      add(pre + ".conv.weight", {co, cin, 3, 3});
      add(pre + ".conv.bias", {co});
      add(pre + ".norm.gamma", {co});
      add(pre + ".norm.beta", {co});
      cin = co;
    }
    add("target.norm.gamma", {cin});
    add("target.norm.beta", {cin});
    const std::size_t F = arch_.final_channels, K = arch_.classes;
    add("final.conv.weight", {F, cin, 3, 3});
    add("final.conv.bias", {F});
    add("dense.weight", {K, F});
    add("dense.bias", {K});
  }

  void head_forward(Cache& c) const {
    const Shape3 st = target_shape();
    const int F = arch_.final_channels, K = arch_.classes;
    const std::size_t P = st.plane();
    c.final_out.resize(static_cast<std::size_t>(F) * P);
    layers::conv3x3_forward<Real>(c.target, st, p(kFinalW), p(kFinalB), F, c.final_out);
    layers::relu_forward<Real>(c.final_out);
    c.gap.assign(F, Real(0));
    for (int f = 0; f < F; ++f) {
      Real s = 0;
      for (std::size_t i = 0; i < P; ++i) s += c.final_out[f * P + i];
      c.gap[f] = s / static_cast<Real>(P);
    }
    const auto W = p(kDenseW), bias = p(kDenseB);
    c.logits.assign(K, Real(0));
    for (int k = 0; k < K; ++k) {
      Real s = bias[k];
      for (int f = 0; f < F; ++f) s += W[k * F + f] * c.gap[f];
      c.logits[k] = s;
    }
  }

  ToyArch arch_;
  std::vector<Param<Real>> params_;
};

// -- loss ---------------------------------------------------------------

// -sum_k q_k log p_k, q = (1-eps) onehot + eps/K. d_logits (if given) is
// overwritten with p - q.
template <typename Real>
Real cross_entropy_smoothed(std::span<const Real> logits, std::size_t target, double eps,
                            std::vector<Real>* d_logits = nullptr) {
  const std::size_t K = logits.size();
  if (K < 2) throw DataError("cross-entropy needs at least 2 classes");
  if (target >= K) throw DataError("target class " + std::to_string(target) + " out of range");
  if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("label smoothing must be in [0, 1)");
  const Real m = *std::max_element(logits.begin(), logits.end());
  Real z = 0;
  for (auto l : logits) z += std::exp(l - m);
  const Real lse = m + std::log(z);
  Real loss = 0;
  if (d_logits) d_logits->resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    const Real q = static_cast<Real>((k == target ? 1.0 - eps : 0.0) + eps / static_cast<double>(K));
    loss -= q * (logits[k] - lse);
    if (d_logits) (*d_logits)[k] = std::exp(logits[k] - lse) - q;
  }
  return loss;
}

// -- optimisation ---------------------------------------------------------

template <typename Real>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::vector<Param<Real>>& params, const Grads<Real>& grads, double lr) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].value.size(), 0.0);
        v_[i].assign(params[i].value.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].value;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = grads[i][j];
        m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * g;
        v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * g * g;
        w[j] -= static_cast<Real>(lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
      }
    }
  }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Multiplies the LR by factor once `patience` consecutive epochs fail to
// improve on the best metric by a relative threshold.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.1, int patience = 7, double threshold = 1e-4)
      : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold) {
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must be in (0, 1)");
    if (patience < 1) throw ConfigError("plateau patience must be >= 1");
  }

  // Returns true when this step reduced the learning rate.
  bool step(double metric) {
    if (metric < best_ * (1.0 - threshold_) || !std::isfinite(best_)) {
      best_ = metric;
      bad_ = 0;
      return false;
    }
    if (++bad_ >= patience_) {
      lr_ *= factor_;
      bad_ = 0;
      return true;
    }
    return false;
  }

  double lr() const { return lr_; }
  int bad_epochs() const { return bad_; }

 private:
  double lr_, factor_;
  int patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

// LR below the floor, with slack for the factor's rounding error.
inline bool below_floor(double lr, double floor) { return lr < floor * (1.0 - 1e-9); }

// -- training ---------------------------------------------------------------

struct Sample {
  Tensor image;  // [Cin, S, S], values in [0, 1]
  int label = 0;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  int max_epochs = 60;
  double label_smoothing = 0.1;
  double initial_lr = 1e-3;
  double plateau_factor = 0.1;
  int plateau_patience = 7;
  double early_stop_lr = 1e-7;
  bool augment = true;
  augment::AugmentConfig augmentation{};
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw ConfigError("label_smoothing must be in [0, 1)");
    }
    if (!(initial_lr > 0.0)) throw ConfigError("initial_lr must be positive");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
      throw ConfigError("plateau_factor must be in (0, 1)");
    }
  }
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;  // LR used during this epoch
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainResult {
  ToyClassifier<float> model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  std::string stop_reason;  // "max_epochs" | "lr_floor"
};

inline nlohmann::json to_json(const std::vector<EpochRecord>& h) {
  auto a = nlohmann::json::array();
  for (const auto& e : h) {
    a.push_back({{"epoch", e.epoch},
                 {"train_loss", e.train_loss},
                 {"val_loss", e.val_loss},
                 {"val_accuracy", e.val_accuracy},
                 {"lr", e.lr}});
  }
  return a;
}

namespace detail {

using rng::mix;
using rng::splitmix64;

inline void check_samples(std::span<const Sample> s, const ToyArch& arch, const char* what) {
  const std::vector<std::size_t> want{std::size_t(arch.in_channels), std::size_t(arch.image_size),
                                      std::size_t(arch.image_size)};
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].image.shape() != want) {
      throw DataError(std::string(what) + " sample " + std::to_string(i) + " has shape " +
                      shape_string(s[i].image.shape()) + ", expected " + shape_string(want));
    }
    if (s[i].label < 0 || s[i].label >= arch.classes) {
      throw DataError(std::string(what) + " sample " + std::to_string(i) + " has label " +
                      std::to_string(s[i].label));
    }
  }
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(mix(seed, 0x5eed, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

// One minibatch step; returns mean batch loss.
inline double train_batch(ToyClassifier<float>& m, Adam<float>& opt,
                          std::span<const Sample> data, std::span<const std::size_t> batch,
                          const TrainConfig& cfg, double lr, std::uint64_t epoch,
                          ToyClassifier<float>::Cache& cache) {
  auto grads = m.zero_grads();
  std::vector<float> d_logits;
  double loss = 0.0;
  for (std::size_t idx : batch) {
    const Sample& s = data[idx];
    Tensor img = s.image;
    if (cfg.augment) {
      std::mt19937_64 rng(mix(cfg.seed, epoch + 1, idx));
      img = augment::random_augment(s.image, cfg.augmentation, rng);
    }
    m.forward(img.data(), cache);
    loss += cross_entropy_smoothed<float>(cache.logits, s.label, cfg.label_smoothing, &d_logits);
    m.backward(cache, d_logits, &grads);
  }
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (auto& g : grads)
    for (auto& v : g) v *= inv;
  opt.step(m.params(), grads, lr);
  return loss / static_cast<double>(batch.size());
}

}  // namespace detail

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline EvalResult evaluate(const ToyClassifier<float>& m, std::span<const Sample> data,
                           double label_smoothing) {
  if (data.empty()) throw DataError("cannot evaluate on an empty set");
  ToyClassifier<float>::Cache cache;
  double loss = 0.0;
  std::size_t correct = 0;
  for (const auto& s : data) {
    m.forward(s.image.data(), cache);
    loss += cross_entropy_smoothed<float>(cache.logits, s.label, label_smoothing);
    const auto best = std::max_element(cache.logits.begin(), cache.logits.end()) - cache.logits.begin();
    correct += best == s.label;
  }
  return {loss / static_cast<double>(data.size()),
          static_cast<double>(correct) / static_cast<double>(data.size())};
}

// Returns the parameters of the epoch with the lowest validation loss.
inline TrainResult train_toy(std::span<const Sample> train, std::span<const Sample> val,
                             const ToyArch& arch, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("training set is empty");
  if (val.empty()) throw DataError("validation set is empty");
  detail::check_samples(train, arch, "train");
  detail::check_samples(val, arch, "val");

  ToyClassifier<float> m(arch, detail::mix(cfg.seed, 0x1417));
  Adam<float> opt;
  PlateauScheduler sched(cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience);
  TrainResult r{m, {}, 0, "max_epochs"};
  double best_val = std::numeric_limits<double>::infinity();
  ToyClassifier<float>::Cache cache;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = sched.lr();
    const auto order = detail::epoch_order(train.size(), cfg.seed, epoch);
    double train_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      train_loss += detail::train_batch(m, opt, train, batch, cfg, lr, epoch, cache) *
                    static_cast<double>(batch.size());
    }
    const auto ev = evaluate(m, val, cfg.label_smoothing);
    r.history.push_back({epoch, train_loss / static_cast<double>(train.size()), ev.loss,
                         ev.accuracy, lr});
    if (ev.loss < best_val) {
      best_val = ev.loss;
      r.model = m;
      r.best_epoch = epoch;
    }
    sched.step(ev.loss);
    if (below_floor(sched.lr(), cfg.early_stop_lr)) {
      r.stop_reason = "lr_floor";
      break;
    }
  }
  return r;
}

// -- LR range test --------------------------------------------------------------

// lr_i = lr_min * (lr_max / lr_min)^(i / (n - 1)).
inline double lr_at(std::size_t i, std::size_t n, double lr_min, double lr_max) {
  if (n < 2) return lr_min;
  return lr_min * std::pow(lr_max / lr_min, static_cast<double>(i) / static_cast<double>(n - 1));
}

struct LrRangeConfig {
  double lr_min = 1e-6;
  double lr_max = 1e-3;
  std::size_t iterations = 1000;
  double smoothing = 0.98;  // EMA factor on the loss
  std::size_t skip_start = 10;
  std::size_t skip_end = 5;
};

struct LrRangeResult {
  std::vector<double> lrs;
  std::vector<double> losses;    // raw batch losses
  std::vector<double> smoothed;  // bias-corrected EMA
  double suggested_lr = 0.0;
  std::size_t suggested_index = 0;
};

// Index of the steepest descent of loss against log(lr); the LRs are
// log-uniform so a central difference in index is proportional to it.
inline std::size_t steepest_descent_index(std::span<const double> loss, std::size_t skip_start,
                                          std::size_t skip_end) {
  const std::size_t n = loss.size();
  if (n < 3) return 0;
  std::size_t lo = 1, hi = n - 2;
  if (n > skip_start + skip_end + 2) {
    lo = std::max(lo, skip_start);
    hi = std::min(hi, n - 1 - skip_end);
  }
  std::size_t best = lo;
  double best_slope = std::numeric_limits<double>::infinity();
  for (std::size_t i = lo; i <= hi; ++i) {
    const double slope = loss[i + 1] - loss[i - 1];
    if (slope < best_slope) {
      best_slope = slope;
      best = i;
    }
  }
  return best;
}

inline LrRangeResult lr_range_test(std::span<const Sample> train, const ToyArch& arch,
                                   const TrainConfig& cfg, const LrRangeConfig& rc = {}) {
  cfg.validate();
  if (train.empty()) throw DataError("LR range test needs at least one batch");
  if (!(rc.lr_min > 0.0 && rc.lr_max > rc.lr_min)) {
    throw ConfigError("LR range test needs 0 < lr_min < lr_max");
  }
  if (rc.iterations == 0) throw ConfigError("LR range test needs iterations >= 1");
  detail::check_samples(train, arch, "train");
  ToyClassifier<float> m(arch, detail::mix(cfg.seed, 0x1417));
  Adam<float> opt;
  ToyClassifier<float>::Cache cache;
  LrRangeResult r;
  std::vector<std::size_t> order;
  std::size_t pos = 0, pass = 0;
  double avg = 0.0;
  for (std::size_t it = 0; it < rc.iterations; ++it) {
    if (pos >= order.size()) {
      order = detail::epoch_order(train.size(), cfg.seed ^ 0x1f, ++pass);
      pos = 0;
    }
    const std::size_t end = std::min(order.size(), pos + cfg.batch_size);
    const std::span<const std::size_t> batch(order.data() + pos, end - pos);
    pos = end;
    const double lr = lr_at(it, rc.iterations, rc.lr_min, rc.lr_max);
    const double loss = detail::train_batch(m, opt, train, batch, cfg, lr, pass, cache);
    avg = rc.smoothing * avg + (1.0 - rc.smoothing) * loss;
    r.lrs.push_back(lr);
    r.losses.push_back(loss);
    r.smoothed.push_back(avg / (1.0 - std::pow(rc.smoothing, static_cast<double>(it + 1))));
  }
  r.suggested_index = steepest_descent_index(r.smoothed, rc.skip_start, rc.skip_end);
  r.suggested_lr = r.lrs[r.suggested_index];
  return r;
}

// -- ensembling -----------------------------------------------------------------

inline Tensor ensemble_softmax(std::span<const Tensor> members) {
  if (members.empty()) throw DataError("ensemble needs at least one member");
  const auto& shape = members.front().shape();
  if (shape.size() != 1) throw DataError("ensemble members must be [K] vectors");
  std::vector<double> acc(shape[0], 0.0);
  for (std::size_t m = 0; m < members.size(); ++m) {
    if (members[m].shape() != shape) {
      throw DataError("ensemble member " + std::to_string(m) + " has shape " +
                      shape_string(members[m].shape()) + ", expected " + shape_string(shape));
    }
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += members[m][k];
  }
  std::vector<float> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) {
    out[k] = static_cast<float>(acc[k] / static_cast<double>(members.size()));
  }
  return Tensor(shape, std::move(out));
}

// -- persistence ---------------------------------------------------------------

// model.json plus one GTEN file per parameter.
inline void save_model(const std::filesystem::path& dir, const ToyClassifier<float>& m,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"format", "schoolmap-toy-v1"}, {"arch", to_json(m.arch())}, {"extra", extra}};
  auto names = nlohmann::json::array();
  for (const auto& p : m.params()) {
    write_tensor(Tensor(p.shape, p.value), (dir / (p.name + ".gten")).string());
    names.push_back(p.name);
  }
  j["params"] = names;
  geojson::write_file((dir / "model.json").string(), j);
}

inline ToyClassifier<float> load_model(const std::filesystem::path& dir,
                                       nlohmann::json* extra = nullptr) {
  const auto j = geojson::read_file((dir / "model.json").string());
  if (j.value("format", "") != "schoolmap-toy-v1") {
    throw DataError("'" + (dir / "model.json").string() + "' is not a toy model manifest");
  }
  ToyClassifier<float> m(arch_from_json(j.at("arch")), 0);
  for (auto& p : m.params()) {
    const auto t = read_tensor((dir / (p.name + ".gten")).string());
    if (t.shape() != p.shape) {
      throw DataError("parameter " + p.name + " has shape " + shape_string(t.shape()) +
                      ", expected " + shape_string(p.shape));
    }
    p.value.assign(t.data().begin(), t.data().end());
  }
  if (extra) *extra = j.value("extra", nlohmann::json::object());
  return m;
}

// Backend over the built-in classifier.
class ToyBackend : public Backend {
 public:
  explicit ToyBackend(ToyClassifier<float> m, std::string id = "toy")
      : model_(std::move(m)), id_(std::move(id)) {}

  FeatureBundle infer(const Tensor& image) const override { return model_.bundle(image); }
  std::string model_id() const override { return id_; }
  const ToyClassifier<float>& classifier() const { return model_; }

 private:
  ToyClassifier<float> model_;
  std::string id_;
};

}  // namespace schoolmap::model
