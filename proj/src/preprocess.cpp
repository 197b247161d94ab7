#include "spinelab/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "spinelab/error.hpp"
#include "spinelab/rng.hpp"

namespace spinelab::prep {

void HeatmapConfig::validate() const {
  if (!(sigma_mm > 0.0)) throw ConfigError("sigma_mm must be positive");
  if (truncation_sigmas < 3.0)
    throw ConfigError("truncation radius must be at least 3 sigma");
}

Volume3D resample_isotropic(const Volume3D& vol, double target_mm) {
  if (!(target_mm > 0.0)) throw ConfigError("target spacing must be positive");
  vol.validate();
  for (size_t a = 0; a < 3; ++a) {
    if (vol.extent(a) < 2)
      throw ConfigError("degenerate volume: axis " + std::to_string(a) +
                        " has fewer than 2 voxels");
  }

  std::array<int64_t, 3> out_shape{};
  for (size_t a = 0; a < 3; ++a) {
    out_shape[a] = std::llround(static_cast<double>(vol.extent(a)) *
                                vol.spacing[a] / target_mm);
    if (out_shape[a] < 2)
      throw ConfigError("resampled volume degenerate on axis " +
                        std::to_string(a));
  }

  Volume3D out;
  out.data = Tensor<double>(
      std::vector<int64_t>{out_shape[0], out_shape[1], out_shape[2]});
  out.spacing = {target_mm, target_mm, target_mm};

  const int64_t nz = vol.extent(0), nx = vol.extent(1), ny = vol.extent(2);
  const double rz = target_mm / vol.spacing[0];
  const double rx = target_mm / vol.spacing[1];
  const double ry = target_mm / vol.spacing[2];

  for (int64_t z = 0; z < out_shape[0]; ++z) {
    const double fz = static_cast<double>(z) * rz;
    int64_t z0 = static_cast<int64_t>(std::floor(fz));
    double wz = fz - static_cast<double>(z0);
    z0 = std::clamp<int64_t>(z0, 0, nz - 1);
    const int64_t z1 = std::min<int64_t>(z0 + 1, nz - 1);
    for (int64_t x = 0; x < out_shape[1]; ++x) {
      const double fx = static_cast<double>(x) * rx;
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      double wx = fx - static_cast<double>(x0);
      x0 = std::clamp<int64_t>(x0, 0, nx - 1);
      const int64_t x1 = std::min<int64_t>(x0 + 1, nx - 1);
      for (int64_t y = 0; y < out_shape[2]; ++y) {
        const double fy = static_cast<double>(y) * ry;
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        double wy = fy - static_cast<double>(y0);
        y0 = std::clamp<int64_t>(y0, 0, ny - 1);
        const int64_t y1 = std::min<int64_t>(y0 + 1, ny - 1);

        const double c000 = vol.data.at(z0, x0, y0);
        const double c001 = vol.data.at(z0, x0, y1);
        const double c010 = vol.data.at(z0, x1, y0);
        const double c011 = vol.data.at(z0, x1, y1);
        const double c100 = vol.data.at(z1, x0, y0);
        const double c101 = vol.data.at(z1, x0, y1);
        const double c110 = vol.data.at(z1, x1, y0);
        const double c111 = vol.data.at(z1, x1, y1);

        const double c00 = c000 * (1.0 - wy) + c001 * wy;
        const double c01 = c010 * (1.0 - wy) + c011 * wy;
        const double c10 = c100 * (1.0 - wy) + c101 * wy;
        const double c11 = c110 * (1.0 - wy) + c111 * wy;
        const double c0 = c00 * (1.0 - wx) + c01 * wx;
        const double c1 = c10 * (1.0 - wx) + c11 * wx;
        out.data.at(z, x, y) = c0 * (1.0 - wz) + c1 * wz;
      }
    }
  }
  return out;
}

namespace {

ProjectionImage mip_over_slices(const Volume3D& vol, View view,
                                const std::vector<int64_t>& slices) {
  const size_t drop = collapsed_axis(view);
  const size_t keep = kept_axis(view);
  ProjectionImage img;
  img.view = view;
  img.spacing = {vol.spacing[0], vol.spacing[keep]};
  img.data = Tensor<double>(std::vector<int64_t>{vol.extent(0), vol.extent(keep)});
  img.data.fill(-std::numeric_limits<double>::infinity());

  for (int64_t z = 0; z < vol.extent(0); ++z) {
    for (int64_t k = 0; k < vol.extent(keep); ++k) {
      double m = -std::numeric_limits<double>::infinity();
      for (int64_t s : slices) {
        const double v = (drop == 2) ? vol.data.at(z, k, s)
                                     : vol.data.at(z, s, k);
        m = std::max(m, v);
      }
      img.data.at(z, k) = m;
    }
  }
  return img;
}

}  // namespace

ProjectionImage mip(const Volume3D& vol, View view) {
  const size_t drop = collapsed_axis(view);
  std::vector<int64_t> all(static_cast<size_t>(vol.extent(drop)));
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
  return mip_over_slices(vol, view, all);
}

ProjectionImage random_half_slice_mip(const Volume3D& vol, View view,
                                      uint64_t seed) {
  const size_t drop = collapsed_axis(view);
  const int64_t n = vol.extent(drop);
  if (n < 2)
    throw ConfigError("half-slice MIP needs at least 2 slices on the "
                      "collapsed axis");
  Rng rng(seed);
  std::vector<int64_t> chosen = rng.sample_without_replacement(n, n / 2);
  std::sort(chosen.begin(), chosen.end());
  return mip_over_slices(vol, view, chosen);
}

std::map<int, std::array<double, 2>> project_centroids(const CentroidSet& cs,
                                                       View view) {
  const size_t keep = kept_axis(view);
  std::map<int, std::array<double, 2>> out;
  for (const auto& [idx, c] : cs.entries()) {
    out[idx] = {c.pos_mm[0], c.pos_mm[keep]};
  }
  return out;
}

HeatmapStack encode_heatmap(const std::map<int, std::array<double, 2>>& c2d,
                            int64_t height, int64_t width,
                            const std::array<double, 2>& spacing_mm,
                            const HeatmapConfig& cfg, View view) {
  cfg.validate();
  if (height <= 0 || width <= 0)
    throw ConfigError("heatmap extent must be positive");

  HeatmapStack stack;
  stack.view = view;
  stack.sigma_mm = cfg.sigma_mm;
  stack.spacing = spacing_mm;
  stack.data = Tensor<double>(std::vector<int64_t>{kNumChannels, height, width});

  const double sigma = cfg.sigma_mm;
  const double trunc = cfg.truncation_sigmas * sigma;
  const double trunc2 = trunc * trunc;
  const double inv_2s2 = 1.0 / (2.0 * sigma * sigma);

  for (const auto& [channel, pos] : c2d) {
    if (channel < 1 || channel >= kNumChannels)
      throw RangeError("heatmap channel out of range");
    const double row_mm_max = static_cast<double>(height - 1) * spacing_mm[0];
    const double col_mm_max = static_cast<double>(width - 1) * spacing_mm[1];
    if (pos[0] < 0.0 || pos[0] > row_mm_max || pos[1] < 0.0 ||
        pos[1] > col_mm_max) {
      std::cerr << "warning: centroid for channel " << channel
                << " lies outside the heatmap frame; rendering anyway\n";
    }
    for (int64_t r = 0; r < height; ++r) {
      const double dz = static_cast<double>(r) * spacing_mm[0] - pos[0];
      for (int64_t c = 0; c < width; ++c) {
        const double dk = static_cast<double>(c) * spacing_mm[1] - pos[1];
        const double d2 = dz * dz + dk * dk;
        stack.data.at(channel, r, c) =
            d2 <= trunc2 ? std::exp(-d2 * inv_2s2) : 0.0;
      }
    }
  }

  // Background: y0 = 1 - max over vertebra channels, exact.
  for (int64_t r = 0; r < height; ++r) {
    for (int64_t c = 0; c < width; ++c) {
      double m = 0.0;
      for (int ch = 1; ch < kNumChannels; ++ch)
        m = std::max(m, stack.data.at(ch, r, c));
      stack.data.at(0, r, c) = 1.0 - m;
    }
  }
  return stack;
}

int argmax_class(const HeatmapStack& stack, int64_t row, int64_t col) {
  int best = 0;
  double best_v = stack.data.at(0, row, col);
  for (int ch = 1; ch < kNumChannels; ++ch) {
    const double v = stack.data.at(ch, row, col);
    if (v > best_v) {  // strict: background (and lower channels) win ties
      best_v = v;
      best = ch;
    }
  }
  return best;
}

WeightTable median_frequency_weights(const std::vector<HeatmapStack>& stacks) {
  if (stacks.empty())
    throw ConfigError("median-frequency weights need at least one annotation");

  std::array<int64_t, kNumChannels> pixel_count{};
  std::array<int64_t, kNumChannels> covering_pixels{};
  pixel_count.fill(0);
  covering_pixels.fill(0);

  for (const auto& stack : stacks) {
    std::array<int64_t, kNumChannels> local{};
    local.fill(0);
    const int64_t h = stack.height(), w = stack.width();
    for (int64_t r = 0; r < h; ++r) {
      for (int64_t c = 0; c < w; ++c) local[argmax_class(stack, r, c)] += 1;
    }
    for (int ch = 0; ch < kNumChannels; ++ch) {
      pixel_count[ch] += local[ch];
      if (local[ch] > 0) covering_pixels[ch] += h * w;
    }
  }

  std::vector<int> present;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    if (pixel_count[ch] > 0) present.push_back(ch);
  }
  if (present.size() == 1 && present[0] == 0)
    throw ConfigError("all-background annotation set is degenerate");

  std::array<double, kNumChannels> freq{};
  std::vector<double> present_freqs;
  for (int ch : present) {
    freq[ch] = static_cast<double>(pixel_count[ch]) /
               static_cast<double>(covering_pixels[ch]);
    present_freqs.push_back(freq[ch]);
  }
  std::sort(present_freqs.begin(), present_freqs.end());
  const size_t n = present_freqs.size();
  const double median = (n % 2 == 1)
                            ? present_freqs[n / 2]
                            : 0.5 * (present_freqs[n / 2 - 1] +
                                     present_freqs[n / 2]);

  WeightTable table;
  for (int ch : present) table.weights[ch] = median / freq[ch];
  return table;
}

Tensor<double> weight_map(const HeatmapStack& gt, const WeightTable& table) {
  Tensor<double> map(std::vector<int64_t>{gt.height(), gt.width()});
  for (int64_t r = 0; r < gt.height(); ++r) {
    for (int64_t c = 0; c < gt.width(); ++c) {
      map.at(r, c) = table.weights[argmax_class(gt, r, c)];
    }
  }
  return map;
}

namespace {

void write_meta(const std::string& path, const ProjectionImage* img,
                const HeatmapStack* stack) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os.precision(17);
  if (img) {
    os << "view " << view_name(img->view) << "\n";
    os << "spacing " << img->spacing[0] << " " << img->spacing[1] << "\n";
  } else {
    os << "view " << view_name(stack->view) << "\n";
    os << "spacing " << stack->spacing[0] << " " << stack->spacing[1] << "\n";
    os << "sigma_mm " << stack->sigma_mm << "\n";
  }
}

void read_meta(const std::string& path, View* view,
               std::array<double, 2>* spacing, double* sigma) {
  std::ifstream is(path);
  if (!is) throw Error("missing sidecar: " + path);
  std::string key;
  while (is >> key) {
    if (key == "view") {
      std::string v;
      is >> v;
      *view = view_from_name(v);
    } else if (key == "spacing") {
      is >> (*spacing)[0] >> (*spacing)[1];
    } else if (key == "sigma_mm" && sigma) {
      is >> *sigma;
    } else {
      std::string rest;
      std::getline(is, rest);
    }
  }
}

}  // namespace

void save_projection(const std::string& path, const ProjectionImage& img,
                     TensorDType dtype) {
  if (dtype == TensorDType::kFloat64)
    tensor_write(path, img.data);
  else
    tensor_write(path, img.data.cast<float>());
  write_meta(path + ".meta", &img, nullptr);
}

ProjectionImage load_projection(const std::string& path) {
  ProjectionImage img;
  img.data = tensor_read_as<double>(path);
  if (img.data.rank() != 2) throw ShapeError("projection must be rank 2");
  read_meta(path + ".meta", &img.view, &img.spacing, nullptr);
  return img;
}

void save_heatmap(const std::string& path, const HeatmapStack& stack,
                  TensorDType dtype) {
  if (dtype == TensorDType::kFloat64)
    tensor_write(path, stack.data);
  else
    tensor_write(path, stack.data.cast<float>());
  write_meta(path + ".meta", nullptr, &stack);
}

HeatmapStack load_heatmap(const std::string& path) {
  HeatmapStack stack;
  stack.data = tensor_read_as<double>(path);
  if (stack.data.rank() != 3 || stack.data.dim(0) != kNumChannels)
    throw ShapeError("heatmap stack must be (25, H, W)");
  read_meta(path + ".meta", &stack.view, &stack.spacing, &stack.sigma_mm);
  return stack;
}

void save_weight_tables(const std::string& path, const WeightTable& sagittal,
                        const WeightTable& coronal) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "# view label weight\n";
  os.precision(17);
  for (int ch = 0; ch < kNumChannels; ++ch)
    os << "sagittal " << VertebraLabel::from_index(ch).name() << " "
       << sagittal.weights[ch] << "\n";
  for (int ch = 0; ch < kNumChannels; ++ch)
    os << "coronal " << VertebraLabel::from_index(ch).name() << " "
       << coronal.weights[ch] << "\n";
}

std::pair<WeightTable, WeightTable> load_weight_tables(
    const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open: " + path);
  WeightTable sag, cor;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string view, name;
    double w;
    if (!(ls >> view)) continue;
    if (!(ls >> name >> w))
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected `view label weight`");
    const int ch = VertebraLabel::from_name(name).index();
    if (view == "sagittal")
      sag.weights[ch] = w;
    else if (view == "coronal")
      cor.weights[ch] = w;
    else
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": unknown view '" + view + "'");
  }
  return {sag, cor};
}

}  // namespace spinelab::prep
