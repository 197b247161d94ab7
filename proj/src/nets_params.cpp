#include "spinelab/nets/params.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spinelab/error.hpp"
#include "spinelab/rng.hpp"
#include "spinelab/tensor_file.hpp"

namespace spinelab::nets {

namespace fs = std::filesystem;

template <typename T>
Tensor<T>& NetworkParams<T>::at(const std::string& layer,
                                const std::string& name) {
  auto it = store_.find(layer);
  if (it == store_.end() || !it->second.count(name))
    throw ConfigError("missing parameter " + layer + "." + name);
  return it->second.at(name);
}

template <typename T>
const Tensor<T>& NetworkParams<T>::at(const std::string& layer,
                                      const std::string& name) const {
  auto it = store_.find(layer);
  if (it == store_.end() || !it->second.count(name))
    throw ConfigError("missing parameter " + layer + "." + name);
  return it->second.at(name);
}

template <typename T>
int64_t NetworkParams<T>::total_count() const {
  int64_t n = 0;
  for (const auto& [layer, arrays] : store_) {
    for (const auto& [name, t] : arrays) n += t.numel();
  }
  return n;
}

template <typename T>
void NetworkParams<T>::for_each_learnable(
    const std::function<void(const std::string&, const std::string&,
                             Tensor<T>&)>& fn) {
  for (auto& [layer, arrays] : store_) {
    for (auto& [name, t] : arrays) {
      if (name == "running_mean" || name == "running_var") continue;
      fn(layer, name, t);
    }
  }
}

template <typename T>
void NetworkParams<T>::save(const std::string& dir) const {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "params.txt");
  if (!manifest) throw Error("cannot write params manifest in " + dir);
  for (const auto& [layer, arrays] : store_) {
    for (const auto& [name, t] : arrays) {
      const std::string file = layer + "__" + name + ".tns";
      tensor_write((fs::path(dir) / file).string(), t);
      manifest << layer << " " << name << " " << file << "\n";
    }
  }
}

template <typename T>
NetworkParams<T> NetworkParams<T>::load(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "params.txt");
  if (!manifest) throw Error("missing params manifest in " + dir);
  NetworkParams<T> p;
  std::string layer, name, file;
  while (manifest >> layer >> name >> file) {
    p.emplace(layer, name,
              tensor_read_as<T>((fs::path(dir) / file).string()));
  }
  return p;
}

template <typename T>
NetworkParams<T> init_params(const NetworkSpec& spec, uint64_t seed) {
  Rng rng(seed);
  NetworkParams<T> params;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::kConv2d || l.kind == LayerKind::kConv3d) {
      std::vector<int64_t> wshape{l.out_channels, l.in_channels};
      int64_t fan_in = l.in_channels;
      for (int64_t k : l.kernel) {
        wshape.push_back(k);
        fan_in *= k;
      }
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      Tensor<T> w(wshape);
      for (int64_t i = 0; i < w.numel(); ++i)
        w[i] = static_cast<T>(rng.normal(0.0, stddev));
      params.emplace(l.id, "weight", std::move(w));
      params.emplace(l.id, "bias",
                     Tensor<T>(std::vector<int64_t>{l.out_channels}));
    } else if (l.kind == LayerKind::kBatchNorm) {
      params.emplace(l.id, "gamma",
                     Tensor<T>::full({l.channels}, static_cast<T>(1)));
      params.emplace(l.id, "beta", Tensor<T>(std::vector<int64_t>{l.channels}));
      params.emplace(l.id, "running_mean",
                     Tensor<T>(std::vector<int64_t>{l.channels}));
      params.emplace(l.id, "running_var",
                     Tensor<T>::full({l.channels}, static_cast<T>(1)));
    }
  }
  return params;
}

template <typename T>
NetworkParams<T> zeros_like_learnable(const NetworkSpec& spec,
                                      const NetworkParams<T>& like) {
  NetworkParams<T> out;
  for (const auto& [layer, arrays] : like.store()) {
    for (const auto& [name, t] : arrays) {
      if (name == "running_mean" || name == "running_var") continue;
      out.emplace(layer, name, Tensor<T>(t.shape()));
    }
  }
  (void)spec;
  return out;
}

template class NetworkParams<float>;
template class NetworkParams<double>;
template NetworkParams<float> init_params<float>(const NetworkSpec&, uint64_t);
template NetworkParams<double> init_params<double>(const NetworkSpec&, uint64_t);
template NetworkParams<float> zeros_like_learnable<float>(
    const NetworkSpec&, const NetworkParams<float>&);
template NetworkParams<double> zeros_like_learnable<double>(
    const NetworkSpec&, const NetworkParams<double>&);

}  // namespace spinelab::nets
