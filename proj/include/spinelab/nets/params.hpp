#ifndef SPINELAB_NETS_PARAMS_HPP_
#define SPINELAB_NETS_PARAMS_HPP_

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "spinelab/nets/spec.hpp"
#include "spinelab/tensor.hpp"

namespace spinelab::nets {

/// Named parameter arrays keyed by layer id. Convolutions own "weight"
/// (out_ch, in_ch, kernel...) and "bias" (out_ch); batch-norm owns "gamma",
/// "beta", "running_mean", "running_var". The running statistics are state,
/// not learnable parameters.
template <typename T>
class NetworkParams {
 public:
  using LayerStore = std::map<std::string, Tensor<T>>;

  bool has(const std::string& layer, const std::string& name) const {
    auto it = store_.find(layer);
    return it != store_.end() && it->second.count(name) > 0;
  }
  Tensor<T>& at(const std::string& layer, const std::string& name);
  const Tensor<T>& at(const std::string& layer, const std::string& name) const;
  Tensor<T>& emplace(const std::string& layer, const std::string& name,
                     Tensor<T> value) {
    return store_[layer][name] = std::move(value);
  }

  const std::map<std::string, LayerStore>& store() const { return store_; }
  std::map<std::string, LayerStore>& store() { return store_; }

  int64_t total_count() const;

  /// Visits learnable arrays (weights, biases, gamma, beta) in a fixed
  /// deterministic order; skips batch-norm running statistics.
  void for_each_learnable(
      const std::function<void(const std::string&, const std::string&,
                               Tensor<T>&)>& fn);

  void save(const std::string& dir) const;
  static NetworkParams load(const std::string& dir);

 private:
  std::map<std::string, LayerStore> store_;
};

/// He-normal initialization for convolutions, identity for batch-norm.
/// Deterministic given the seed.
template <typename T>
NetworkParams<T> init_params(const NetworkSpec& spec, uint64_t seed);

/// Same keys/shapes as the learnable arrays of `like`, zero filled.
template <typename T>
NetworkParams<T> zeros_like_learnable(const NetworkSpec& spec,
                                      const NetworkParams<T>& like);

}  // namespace spinelab::nets

#endif  // SPINELAB_NETS_PARAMS_HPP_
