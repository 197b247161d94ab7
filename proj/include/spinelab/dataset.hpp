#ifndef SPINELAB_DATASET_HPP_
#define SPINELAB_DATASET_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spinelab/volume.hpp"

namespace spinelab::dataset {

/// Parameters for one synthetic spine phantom. A phantom is a chain of
/// bright ellipsoids on a sinusoidally curved centerline over a dim noisy
/// background, with ground-truth centroids at the ellipsoid centres.
///
/// Each vertebra's appearance is graded by its anatomical index: in-plane
/// radius and peak intensity both grow from C1 to L5, so a network can
/// identify labels from local appearance even in a restricted field of view.
struct PhantomConfig {
  std::array<int64_t, 3> shape{96, 64, 64};  // (h, w, d) voxels
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  int num_vertebrae = 4;                 // in [3, 24]
  VertebraLabel start_label = VertebraLabel::from_index(20);  // L1
  double vertebra_radius_mm = 6.0;       // ellipsoid semi-axis along z
  double inter_vertebra_gap_mm = 6.0;
  double curvature_amplitude_mm = 4.0;
  double intensity_fg = 1.0;
  double intensity_bg = 0.0;
  double noise_std = 0.015;
  int distractor_count = 0;              // bright off-centerline spheres
  uint64_t seed = 0;

  void validate() const;
};

// Label-graded appearance: scale factors applied at vertebra index 1 (C1)
// through 24 (L5). The gradient is steep enough that adjacent labels differ
// by ~9% in brightness and ~7% in cross-section, well above the noise floor.
constexpr double kInplaneRadiusScaleAtC1 = 0.45;
constexpr double kIntensityScaleAtL5 = 3.0;
constexpr double kDistractorRadiusMm = 2.5;
constexpr double kDistractorIntensityScale = 3.3;

/// Deterministic given the config (including the seed).
std::pair<Volume3D, CentroidSet> generate_phantom(const PhantomConfig& cfg);

struct ScanEntry {
  std::string id;
  std::string volume_path;
  std::string centroid_path;
  std::string split;  // train | val | test
};

/// Flat list of scans with their split assignment.
class DatasetManifest {
 public:
  void add(ScanEntry e);
  const std::vector<ScanEntry>& entries() const { return entries_; }
  std::vector<ScanEntry> split(const std::string& tag) const;

  void save(const std::string& path) const;
  /// check_paths verifies every referenced file exists.
  static DatasetManifest load(const std::string& path, bool check_paths = true);

 private:
  std::vector<ScanEntry> entries_;
};

/// Random disjoint exhaustive partition of scan ids into train/val/test with
/// the given fractions (must sum to 1). Sizes use the largest-remainder
/// rule so e.g. 10 scans at (0.8, 0.1, 0.1) give (8, 1, 1).
std::vector<std::string> split_tags();
std::vector<std::pair<std::string, std::string>> make_splits(
    const std::vector<std::string>& scan_ids,
    const std::array<double, 3>& fractions, uint64_t seed);

}  // namespace spinelab::dataset

#endif  // SPINELAB_DATASET_HPP_
