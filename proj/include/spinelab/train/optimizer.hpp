#ifndef SPINELAB_TRAIN_OPTIMIZER_HPP_
#define SPINELAB_TRAIN_OPTIMIZER_HPP_

#include <cstdint>
#include <string>

#include "spinelab/nets/params.hpp"

namespace spinelab::train {

/// Adam with bias correction. Moments live per parameter array and are
/// created lazily on the first step; checkpoints reproduce trajectories
/// bit-exactly.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(double beta1, double beta2, double epsilon)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void step(nets::NetworkParams<T>& params,
            const nets::NetworkParams<T>& grads, double lr);

  int64_t steps_taken() const { return t_; }

  void save(const std::string& dir) const;
  static Adam load(const std::string& dir);

 private:
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double epsilon_ = 1e-8;
  int64_t t_ = 0;
  nets::NetworkParams<T> m_;
  nets::NetworkParams<T> v_;
};

}  // namespace spinelab::train

#endif  // SPINELAB_TRAIN_OPTIMIZER_HPP_
