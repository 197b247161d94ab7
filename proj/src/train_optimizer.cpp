#include "spinelab/train/optimizer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "spinelab/error.hpp"

namespace spinelab::train {

namespace fs = std::filesystem;

template <typename T>
void Adam<T>::step(nets::NetworkParams<T>& params,
                   const nets::NetworkParams<T>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [layer, arrays] : grads.store()) {
    for (const auto& [name, g] : arrays) {
      Tensor<T>& p = params.at(layer, name);
      if (!p.same_shape(g))
        throw ShapeError("gradient shape mismatch at " + layer + "." + name);
      if (!m_.has(layer, name)) {
        m_.emplace(layer, name, Tensor<T>(g.shape()));
        v_.emplace(layer, name, Tensor<T>(g.shape()));
      }
      Tensor<T>& m = m_.at(layer, name);
      Tensor<T>& v = v_.at(layer, name);
      for (int64_t i = 0; i < g.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
        const double vi =
            beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        p[i] = static_cast<T>(static_cast<double>(p[i]) -
                              lr * mhat / (std::sqrt(vhat) + epsilon_));
      }
    }
  }
}

template <typename T>
void Adam<T>::save(const std::string& dir) const {
  fs::create_directories(dir);
  std::ofstream meta(fs::path(dir) / "adam.txt");
  if (!meta) throw Error("cannot write optimizer state in " + dir);
  meta.precision(17);
  meta << "beta1 " << beta1_ << "\nbeta2 " << beta2_ << "\nepsilon "
       << epsilon_ << "\nsteps " << t_ << "\n";
  m_.save((fs::path(dir) / "m").string());
  v_.save((fs::path(dir) / "v").string());
}

template <typename T>
Adam<T> Adam<T>::load(const std::string& dir) {
  std::ifstream meta(fs::path(dir) / "adam.txt");
  if (!meta) throw Error("missing optimizer state in " + dir);
  Adam a;
  std::string key;
  while (meta >> key) {
    if (key == "beta1")
      meta >> a.beta1_;
    else if (key == "beta2")
      meta >> a.beta2_;
    else if (key == "epsilon")
      meta >> a.epsilon_;
    else if (key == "steps")
      meta >> a.t_;
  }
  a.m_ = nets::NetworkParams<T>::load((fs::path(dir) / "m").string());
  a.v_ = nets::NetworkParams<T>::load((fs::path(dir) / "v").string());
  return a;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace spinelab::train
