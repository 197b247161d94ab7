#ifndef SPINELAB_TRAIN_LOSSES_HPP_
#define SPINELAB_TRAIN_LOSSES_HPP_

#include <cstdint>

#include "spinelab/nets/builders.hpp"
#include "spinelab/tensor.hpp"

namespace spinelab::train {

/// Numeric floor applied inside log() of the cross-entropy term.
constexpr double kLogFloor = 1e-12;

/// Per-pixel softmax over the channel axis of a (C, H, W) stack;
/// channel values sum to 1 at every pixel.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& stack);

struct ViewLossTerms {
  double l2 = 0.0;
  double cross_entropy = 0.0;
  double total = 0.0;
};

/// Heatmap regression loss for one view:
///   L = sum (gt - pred)^2  +  sum_px w(px) * H(softmax(gt), softmax(pred))
/// with H the cross-entropy over channels. When `grad` is given,
/// grad += grad_scale * dL/dpred is accumulated into it.
template <typename T>
ViewLossTerms btrfly_view_loss(const Tensor<T>& gt, const Tensor<T>& pred,
                               const Tensor<T>& weight_map,
                               Tensor<T>* grad = nullptr,
                               double grad_scale = 1.0);

/// Raw-pointer kernel behind btrfly_view_loss; lets the training loop score
/// batch slices in place.
template <typename T>
ViewLossTerms view_loss_core(const T* gt, const T* pred, const T* weight_map,
                             int64_t channels, int64_t height, int64_t width,
                             T* grad, double grad_scale);

inline double btrfly_total_loss(const ViewLossTerms& sag,
                                const ViewLossTerms& cor) {
  return sag.total + cor.total;
}

/// L_D = E_real + max(0, m - E_gen); subgradient at the kink is 0.
double discriminator_loss(double e_real, double e_gen, double margin);

/// L_G = adv_weight * E_gen + task_loss.
double generator_loss(double e_gen, double task_loss, double adv_weight = 1.0);

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double decay_factor = 0.75;
  int64_t decay_interval = 10000;
  double lr_floor = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int64_t batch_size = 2;
  int64_t max_iterations = 1000;
  uint64_t seed = 0;

  void validate() const;
};

/// lr(i) = learning_rate * decay_factor^floor(i / decay_interval), clamped
/// below at lr_floor.
double lr_schedule(int64_t iteration, const OptimizerConfig& cfg);

struct AdversarialConfig {
  double margin = 1.0;
  int discriminator_steps = 1;      // D updates per G update and view
  double adversarial_weight = 1.0;  // alpha on the generator's energy term
  nets::EnergyNorm energy_norm = nets::EnergyNorm::kMean;

  void validate() const;
};

}  // namespace spinelab::train

#endif  // SPINELAB_TRAIN_LOSSES_HPP_
