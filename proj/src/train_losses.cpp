#include "spinelab/train/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "spinelab/error.hpp"

namespace spinelab::train {

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& stack) {
  if (stack.rank() != 3) throw ShapeError("softmax_channels expects (C, H, W)");
  const int64_t C = stack.dim(0), H = stack.dim(1), W = stack.dim(2);
  const int64_t hw = H * W;
  Tensor<T> out(stack.shape());
  for (int64_t p = 0; p < hw; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < C; ++c)
      mx = std::max(mx, static_cast<double>(stack[c * hw + p]));
    double sum = 0.0;
    for (int64_t c = 0; c < C; ++c)
      sum += std::exp(static_cast<double>(stack[c * hw + p]) - mx);
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < C; ++c)
      out[c * hw + p] = static_cast<T>(
          std::exp(static_cast<double>(stack[c * hw + p]) - mx) * inv);
  }
  return out;
}

template <typename T>
ViewLossTerms btrfly_view_loss(const Tensor<T>& gt, const Tensor<T>& pred,
                               const Tensor<T>& weight_map, Tensor<T>* grad,
                               double grad_scale) {
  if (!gt.same_shape(pred))
    throw ShapeError("view loss: gt and prediction shapes differ");
  if (gt.rank() != 3) throw ShapeError("view loss expects (C, H, W) stacks");
  const int64_t C = gt.dim(0), H = gt.dim(1), W = gt.dim(2);
  if (weight_map.rank() != 2 || weight_map.dim(0) != H ||
      weight_map.dim(1) != W)
    throw ShapeError("weight map must be (H, W)");
  if (grad && !grad->same_shape(pred))
    throw ShapeError("gradient buffer shape mismatch");
  return view_loss_core(gt.data(), pred.data(), weight_map.data(), C, H, W,
                        grad ? grad->data() : nullptr, grad_scale);
}

template <typename T>
ViewLossTerms view_loss_core(const T* gt, const T* pred, const T* weight_map,
                             int64_t C, int64_t H, int64_t W, T* grad,
                             double grad_scale) {
  const int64_t hw = H * W;
  ViewLossTerms terms;

  double l2 = 0.0;
  for (int64_t i = 0; i < C * hw; ++i) {
    const double d = static_cast<double>(gt[i]) - static_cast<double>(pred[i]);
    l2 += d * d;
  }

  // Per-pixel softmaxes and cross-entropy, fused with the gradient.
  double ce = 0.0;
  std::vector<double> p(static_cast<size_t>(C)), q(static_cast<size_t>(C));
  for (int64_t px = 0; px < hw; ++px) {
    double mx_gt = -std::numeric_limits<double>::infinity();
    double mx_pr = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < C; ++c) {
      mx_gt = std::max(mx_gt, static_cast<double>(gt[c * hw + px]));
      mx_pr = std::max(mx_pr, static_cast<double>(pred[c * hw + px]));
    }
    double sum_gt = 0.0, sum_pr = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      p[static_cast<size_t>(c)] =
          std::exp(static_cast<double>(gt[c * hw + px]) - mx_gt);
      sum_gt += p[static_cast<size_t>(c)];
      q[static_cast<size_t>(c)] =
          std::exp(static_cast<double>(pred[c * hw + px]) - mx_pr);
      sum_pr += q[static_cast<size_t>(c)];
    }
    const double w = static_cast<double>(weight_map[px]);  // argmax-class weight
    double h = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double pc = p[static_cast<size_t>(c)] / sum_gt;
      const double qc = q[static_cast<size_t>(c)] / sum_pr;
      h -= pc * std::log(std::max(qc, kLogFloor));
      if (grad) {
        // d/dpred of [l2 + w * CE] at this pixel/channel.
        const double g =
            2.0 * (static_cast<double>(pred[c * hw + px]) -
                   static_cast<double>(gt[c * hw + px])) +
            w * (qc - pc);
        grad[c * hw + px] += static_cast<T>(grad_scale * g);
      }
    }
    ce += w * h;
  }

  terms.l2 = l2;
  terms.cross_entropy = ce;
  terms.total = l2 + ce;
  return terms;
}

double discriminator_loss(double e_real, double e_gen, double margin) {
  if (e_real < 0.0 || e_gen < 0.0)
    throw ConfigError("energies must be non-negative");
  if (!(margin > 0.0)) throw ConfigError("margin must be positive");
  return e_real + std::max(0.0, margin - e_gen);
}

double generator_loss(double e_gen, double task_loss, double adv_weight) {
  if (e_gen < 0.0) throw ConfigError("energy must be non-negative");
  return adv_weight * e_gen + task_loss;
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(lr_floor > 0.0) || lr_floor > learning_rate)
    throw ConfigError("need 0 < lr_floor <= learning_rate");
  if (!(decay_factor > 0.0) || !(decay_factor < 1.0))
    throw ConfigError("decay factor must lie in (0, 1)");
  if (decay_interval <= 0) throw ConfigError("decay interval must be positive");
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  if (max_iterations < 0) throw ConfigError("max iterations negative");
}

double lr_schedule(int64_t iteration, const OptimizerConfig& cfg) {
  if (iteration < 0) throw ConfigError("iteration must be non-negative");
  const int64_t steps = iteration / cfg.decay_interval;
  double lr = cfg.learning_rate;
  for (int64_t i = 0; i < steps; ++i) lr *= cfg.decay_factor;
  return std::max(lr, cfg.lr_floor);
}

void AdversarialConfig::validate() const {
  if (!(margin > 0.0)) throw ConfigError("margin must be positive");
  if (discriminator_steps < 0) throw ConfigError("negative D step count");
  if (adversarial_weight < 0.0)
    throw ConfigError("adversarial weight must be non-negative");
}

template Tensor<float> softmax_channels<float>(const Tensor<float>&);
template Tensor<double> softmax_channels<double>(const Tensor<double>&);
template ViewLossTerms btrfly_view_loss<float>(const Tensor<float>&,
                                               const Tensor<float>&,
                                               const Tensor<float>&,
                                               Tensor<float>*, double);
template ViewLossTerms btrfly_view_loss<double>(const Tensor<double>&,
                                                const Tensor<double>&,
                                                const Tensor<double>&,
                                                Tensor<double>*, double);
template ViewLossTerms view_loss_core<float>(const float*, const float*,
                                             const float*, int64_t, int64_t,
                                             int64_t, float*, double);
template ViewLossTerms view_loss_core<double>(const double*, const double*,
                                              const double*, int64_t, int64_t,
                                              int64_t, double*, double);

}  // namespace spinelab::train
