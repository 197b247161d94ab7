#include "spinelab/infer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "spinelab/error.hpp"

namespace spinelab::infer {

namespace fs = std::filesystem;

void InferenceConfig::validate() const {
  if (threshold < 0.0 || threshold >= 1.0)
    throw ConfigError("threshold T must lie in [0, 1)");
  if (!(resample_mm > 0.0)) throw ConfigError("resample_mm must be positive");
}

prep::HeatmapStack threshold_stack(const prep::HeatmapStack& stack, double t) {
  if (t < 0.0 || t >= 1.0) throw ConfigError("threshold T must lie in [0, 1)");
  prep::HeatmapStack out = stack;
  for (int64_t i = 0; i < out.data.numel(); ++i) {
    if (out.data[i] < t) out.data[i] = 0.0;
  }
  return out;
}

FusedStack fuse_views(const prep::HeatmapStack& sag,
                      const prep::HeatmapStack& cor) {
  if (sag.data.dim(0) != cor.data.dim(0))
    throw ShapeError("fuse_views: channel counts differ");
  if (sag.data.dim(1) != cor.data.dim(1))
    throw ShapeError("fuse_views: shared z extents differ (" +
                     std::to_string(sag.data.dim(1)) + " vs " +
                     std::to_string(cor.data.dim(1)) + ")");
  const int64_t C = sag.data.dim(0);
  const int64_t h = sag.data.dim(1);
  const int64_t w = sag.data.dim(2);
  const int64_t d = cor.data.dim(2);

  FusedStack fused;
  fused.spacing = {sag.spacing[0], sag.spacing[1], cor.spacing[1]};
  fused.data = Tensor<double>(std::vector<int64_t>{C, h, w, d});
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t z = 0; z < h; ++z) {
      const double* srow = &sag.data.at(c, z, 0);
      const double* crow = &cor.data.at(c, z, 0);
      double* out = &fused.data.at(c, z, 0, 0);
      for (int64_t x = 0; x < w; ++x) {
        const double sv = srow[x];
        double* line = out + x * d;
        for (int64_t y = 0; y < d; ++y) line[y] = sv * crow[y];
      }
    }
  }
  return fused;
}

CentroidSet extract_centroids(const FusedStack& fused, double min_conf) {
  if (fused.data.rank() != 4)
    throw ShapeError("fused stack must be rank 4");
  const int64_t C = fused.data.dim(0);
  const int64_t h = fused.data.dim(1), w = fused.data.dim(2),
                d = fused.data.dim(3);
  CentroidSet out;
  for (int64_t c = 1; c < C; ++c) {  // background never emits
    double best = -1.0;
    std::array<int64_t, 3> best_idx{0, 0, 0};
    const double* base = fused.data.data() + c * h * w * d;
    int64_t i = 0;
    for (int64_t z = 0; z < h; ++z) {
      for (int64_t x = 0; x < w; ++x) {
        for (int64_t y = 0; y < d; ++y, ++i) {
          if (base[i] > best) {  // strict: first maximum wins, lexicographic
            best = base[i];
            best_idx = {z, x, y};
          }
        }
      }
    }
    if (best > min_conf) {
      out.set(VertebraLabel::from_index(static_cast<int>(c)),
              {static_cast<double>(best_idx[0]) * fused.spacing[0],
               static_cast<double>(best_idx[1]) * fused.spacing[1],
               static_cast<double>(best_idx[2]) * fused.spacing[2]},
              std::clamp(best, 0.0, 1.0));
    }
  }
  return out;
}

CentroidSet extract_centroids_from_views(const prep::HeatmapStack& sag,
                                         const prep::HeatmapStack& cor,
                                         double threshold, double min_conf) {
  if (sag.data.dim(0) != cor.data.dim(0) ||
      sag.data.dim(1) != cor.data.dim(1))
    throw ShapeError("extract_centroids_from_views: stacks incompatible");
  const int64_t C = sag.data.dim(0);
  const int64_t h = sag.data.dim(1), w = sag.data.dim(2), d = cor.data.dim(2);

  CentroidSet out;
  for (int64_t c = 1; c < C; ++c) {
    double best = -1.0;
    std::array<int64_t, 3> best_idx{0, 0, 0};
    for (int64_t z = 0; z < h; ++z) {
      // Per shared row the product separates into the two row maxima.
      double smax = -1.0;
      int64_t sarg = 0;
      const double* srow = &sag.data.at(c, z, 0);
      for (int64_t x = 0; x < w; ++x) {
        const double v = srow[x] < threshold ? 0.0 : srow[x];
        if (v > smax) {
          smax = v;
          sarg = x;
        }
      }
      double cmax = -1.0;
      int64_t carg = 0;
      const double* crow = &cor.data.at(c, z, 0);
      for (int64_t y = 0; y < d; ++y) {
        const double v = crow[y] < threshold ? 0.0 : crow[y];
        if (v > cmax) {
          cmax = v;
          carg = y;
        }
      }
      const double v = smax * cmax;
      if (v > best) {
        best = v;
        best_idx = {z, sarg, carg};
      }
    }
    if (best > min_conf) {
      out.set(VertebraLabel::from_index(static_cast<int>(c)),
              {static_cast<double>(best_idx[0]) * sag.spacing[0],
               static_cast<double>(best_idx[1]) * sag.spacing[1],
               static_cast<double>(best_idx[2]) * cor.spacing[1]},
              std::clamp(best, 0.0, 1.0));
    }
  }
  return out;
}

template <typename T>
Generator<T> Generator<T>::btrfly(nets::NetworkSpec spec,
                                  nets::NetworkParams<T> params) {
  Generator g;
  g.kind_ = Kind::kBtrfly;
  g.spec_a_ = std::move(spec);
  g.params_a_ = std::move(params);
  return g;
}

template <typename T>
Generator<T> Generator<T>::singleview_pair(nets::NetworkSpec sag_spec,
                                           nets::NetworkParams<T> sag_params,
                                           nets::NetworkSpec cor_spec,
                                           nets::NetworkParams<T> cor_params) {
  Generator g;
  g.kind_ = Kind::kSingleViewPair;
  g.spec_a_ = std::move(sag_spec);
  g.params_a_ = std::move(sag_params);
  g.spec_b_ = std::move(cor_spec);
  g.params_b_ = std::move(cor_params);
  return g;
}

template <typename T>
Generator<T> Generator<T>::load(const std::string& ckpt_dir) {
  const fs::path dir(ckpt_dir);
  std::ifstream meta(dir / "meta.txt");
  if (!meta) throw Error("not a checkpoint directory: " + ckpt_dir);
  std::string key, kind;
  while (meta >> key) {
    if (key == "kind") {
      meta >> kind;
    } else {
      std::string rest;
      std::getline(meta, rest);
    }
  }
  auto load_net = [&](const std::string& name, nets::NetworkSpec* spec,
                      nets::NetworkParams<T>* params) {
    const fs::path spec_path = dir / ("spec_" + name + ".json");
    if (!fs::exists(spec_path))
      throw Error("checkpoint " + ckpt_dir + " is missing " +
                  spec_path.string());
    *spec = nets::NetworkSpec::load(spec_path.string());
    *params = nets::NetworkParams<T>::load((dir / ("params_" + name)).string());
  };
  Generator g;
  if (kind == "btrfly" || kind == "btrfly-pe") {
    g.kind_ = Kind::kBtrfly;
    load_net("btrfly", &g.spec_a_, &g.params_a_);
  } else if (kind == "singleview") {
    g.kind_ = Kind::kSingleViewPair;
    load_net("sag", &g.spec_a_, &g.params_a_);
    load_net("cor", &g.spec_b_, &g.params_b_);
  } else {
    throw FormatError("unknown checkpoint kind '" + kind + "' in " + ckpt_dir);
  }
  return g;
}

namespace {

template <typename T>
Tensor<T> lift_image(const prep::ProjectionImage& img) {
  Tensor<T> t(std::vector<int64_t>{1, 1, img.data.dim(0), img.data.dim(1)});
  for (int64_t i = 0; i < img.data.numel(); ++i)
    t[i] = static_cast<T>(img.data[i]);
  return t;
}

template <typename T>
prep::HeatmapStack unlift_stack(const Tensor<T>& out, View view,
                                const std::array<double, 2>& spacing) {
  prep::HeatmapStack s;
  s.view = view;
  s.spacing = spacing;
  s.sigma_mm = 0.0;
  s.data = Tensor<double>(
      std::vector<int64_t>{out.dim(1), out.dim(2), out.dim(3)});
  for (int64_t i = 0; i < s.data.numel(); ++i)
    s.data[i] = static_cast<double>(out[i]);
  return s;
}

}  // namespace

template <typename T>
std::pair<prep::HeatmapStack, prep::HeatmapStack> Generator<T>::predict(
    const prep::ProjectionImage& sag, const prep::ProjectionImage& cor) {
  if (kind_ == Kind::kBtrfly) {
    nets::Executor<T> exec(spec_a_);
    std::map<std::string, Tensor<T>> in;
    in[nets::kSagittalPort] = lift_image<T>(sag);
    in[nets::kCoronalPort] = lift_image<T>(cor);
    auto out = exec.forward(in, params_a_, /*train=*/false);
    return {unlift_stack(out.at(nets::kSagittalOut), View::kSagittal,
                         sag.spacing),
            unlift_stack(out.at(nets::kCoronalOut), View::kCoronal,
                         cor.spacing)};
  }
  nets::Executor<T> exec_sag(spec_a_);
  nets::Executor<T> exec_cor(spec_b_);
  auto out_sag = exec_sag.forward({{nets::kImagePort, lift_image<T>(sag)}},
                                  params_a_, false);
  auto out_cor = exec_cor.forward({{nets::kImagePort, lift_image<T>(cor)}},
                                  params_b_, false);
  return {unlift_stack(out_sag.at(nets::kImageOut), View::kSagittal,
                       sag.spacing),
          unlift_stack(out_cor.at(nets::kImageOut), View::kCoronal,
                       cor.spacing)};
}

template <typename T>
ScanInference<T> infer_scan(const Volume3D& vol, Generator<T>& gen,
                            const InferenceConfig& cfg) {
  cfg.validate();
  const Volume3D iso = prep::resample_isotropic(vol, cfg.resample_mm);
  const prep::ProjectionImage sag_img = prep::mip(iso, View::kSagittal);
  const prep::ProjectionImage cor_img = prep::mip(iso, View::kCoronal);
  auto [sag_pred, cor_pred] = gen.predict(sag_img, cor_img);

  ScanInference<T> result;
  result.centroids = extract_centroids_from_views(
      sag_pred, cor_pred, cfg.threshold, cfg.effective_min_conf());
  result.sag = std::move(sag_pred);
  result.cor = std::move(cor_pred);
  return result;
}

template class Generator<float>;
template class Generator<double>;
template ScanInference<float> infer_scan<float>(const Volume3D&,
                                                Generator<float>&,
                                                const InferenceConfig&);
template ScanInference<double> infer_scan<double>(const Volume3D&,
                                                  Generator<double>&,
                                                  const InferenceConfig&);

}  // namespace spinelab::infer
