#ifndef SPINELAB_NETS_ENGINE_HPP_
#define SPINELAB_NETS_ENGINE_HPP_

#include <cstdint>
#include <map>
#include <string>

#include "spinelab/nets/params.hpp"
#include "spinelab/nets/spec.hpp"
#include "spinelab/tensor.hpp"

namespace spinelab::nets {

/// Evaluates a NetworkSpec forward and backward. One executor caches the
/// activations of its last forward pass, so forward/backward pairs must
/// stay on the same instance. Executors hold no shared state: concurrent
/// evaluation wants one executor (and one parameter copy in train mode)
/// per thread.
template <typename T>
class Executor {
 public:
  explicit Executor(const NetworkSpec& spec);

  /// Tensors are (N, C, spatial...). In train mode batch-norm uses batch
  /// statistics (and updates the running ones in `params`) and dropout
  /// draws masks deterministically from `dropout_seed`; eval mode is a
  /// pure function of the inputs and parameters.
  std::map<std::string, Tensor<T>> forward(
      const std::map<std::string, Tensor<T>>& inputs, NetworkParams<T>& params,
      bool train, uint64_t dropout_seed = 0);

  /// Reverse pass over the cached forward. `output_grads` maps output port
  /// ids to dLoss/dOutput; parameter gradients are accumulated (+=) into
  /// `grads`; returns gradients at the input ports.
  std::map<std::string, Tensor<T>> backward(
      const std::map<std::string, Tensor<T>>& output_grads,
      const NetworkParams<T>& params, NetworkParams<T>& grads);

  /// Activation of a layer from the last forward pass.
  const Tensor<T>& activation(const std::string& layer_id) const;

 private:
  struct BnCache {
    std::vector<double> mean, invstd;
  };

  void run_conv_forward(const LayerSpec& l, const Tensor<T>& in,
                        const NetworkParams<T>& params, Tensor<T>& out);
  void run_conv_backward(const LayerSpec& l, const Tensor<T>& in,
                         const Tensor<T>& dout, const NetworkParams<T>& params,
                         NetworkParams<T>& grads, Tensor<T>& din);

  const NetworkSpec* spec_;
  std::map<std::string, Tensor<T>> acts_;
  std::map<std::string, Tensor<T>> dropout_masks_;
  std::map<std::string, BnCache> bn_cache_;
  bool train_ = false;
  std::vector<T> col_scratch_;
  std::vector<T> dcol_scratch_;
};

}  // namespace spinelab::nets

#endif  // SPINELAB_NETS_ENGINE_HPP_
