#ifndef SPINELAB_PREPROCESS_HPP_
#define SPINELAB_PREPROCESS_HPP_

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spinelab/volume.hpp"

namespace spinelab::prep {

/// Single 2D reformation of a volume. Rows follow z; columns follow the
/// kept in-plane axis (x for sagittal, y for coronal).
struct ProjectionImage {
  Tensor<double> data;                // (H, W) = (z, x|y)
  View view = View::kSagittal;
  std::array<double, 2> spacing{1.0, 1.0};  // mm/pixel along (z, x|y)
};

/// 25-channel heatmap stack for one view. For ground-truth stacks values lie
/// in [0,1] and channel 0 equals 1 - max over the vertebra channels.
struct HeatmapStack {
  Tensor<double> data;                // (25, H, W)
  View view = View::kSagittal;
  double sigma_mm = 0.0;              // 0 for predictions
  std::array<double, 2> spacing{1.0, 1.0};

  int64_t height() const { return data.dim(1); }
  int64_t width() const { return data.dim(2); }
};

struct HeatmapConfig {
  double sigma_mm = 6.0;
  double truncation_sigmas = 4.0;  // values beyond this radius are zeroed

  void validate() const;
};

/// Per-class weights plus the lookup that turns a ground-truth stack into a
/// per-pixel weight map.
struct WeightTable {
  std::array<double, kNumChannels> weights;

  WeightTable() { weights.fill(1.0); }
};

/// Trilinear resampling to isotropic target_mm spacing. Output extents are
/// round(extent * spacing / target).
Volume3D resample_isotropic(const Volume3D& vol, double target_mm);

/// Full maximum intensity projection.
ProjectionImage mip(const Volume3D& vol, View view);

/// MIP over floor(n/2) randomly chosen distinct slices of the collapsed
/// axis. Deterministic given the seed.
ProjectionImage random_half_slice_mip(const Volume3D& vol, View view,
                                      uint64_t seed);

/// Projected 2D centroids in mm: sagittal keeps (z,x), coronal keeps (z,y).
std::map<int, std::array<double, 2>> project_centroids(const CentroidSet& cs,
                                                       View view);

/// Renders the ground-truth Gaussian stack for projected centroids on an
/// H x W grid. Channel i peaks at 1 at its centroid; channel 0 is
/// 1 - max over channels 1..24 at every pixel. A centroid outside the frame
/// is still rendered from its out-of-frame centre (with a warning).
HeatmapStack encode_heatmap(const std::map<int, std::array<double, 2>>& c2d,
                            int64_t height, int64_t width,
                            const std::array<double, 2>& spacing_mm,
                            const HeatmapConfig& cfg, View view);

/// Hard class of a pixel: argmax over channels, background winning ties.
int argmax_class(const HeatmapStack& stack, int64_t row, int64_t col);

/// Median-frequency class weights over a set of ground-truth stacks.
/// f_c = (pixels whose argmax is c) / (total pixels of images containing c);
/// w_c = median(f over present classes) / f_c, absent classes get 1.
WeightTable median_frequency_weights(const std::vector<HeatmapStack>& stacks);

/// Per-pixel map: weight of the pixel's argmax ground-truth class.
Tensor<double> weight_map(const HeatmapStack& gt, const WeightTable& table);

// Disk format: TensorFile plus `<path>.meta` sidecar (view, spacing and,
// for ground-truth stacks, sigma_mm).
void save_projection(const std::string& path, const ProjectionImage& img,
                     TensorDType dtype = TensorDType::kFloat32);
ProjectionImage load_projection(const std::string& path);
void save_heatmap(const std::string& path, const HeatmapStack& stack,
                  TensorDType dtype = TensorDType::kFloat32);
HeatmapStack load_heatmap(const std::string& path);

void save_weight_tables(const std::string& path, const WeightTable& sagittal,
                        const WeightTable& coronal);
std::pair<WeightTable, WeightTable> load_weight_tables(const std::string& path);

}  // namespace spinelab::prep

#endif  // SPINELAB_PREPROCESS_HPP_
