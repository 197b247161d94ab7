#ifndef SPINELAB_VOLUME_HPP_
#define SPINELAB_VOLUME_HPP_

#include <array>
#include <map>
#include <optional>
#include <string>

#include "spinelab/labels.hpp"
#include "spinelab/tensor.hpp"
#include "spinelab/tensor_file.hpp"

namespace spinelab {

// Global axis convention: axis 0 = z (cranio-caudal; shared by both views),
// axis 1 = x (anterior-posterior), axis 2 = y (left-right).
enum class View { kSagittal, kCoronal };

inline const char* view_name(View v) {
  return v == View::kSagittal ? "sagittal" : "coronal";
}
View view_from_name(const std::string& name);

/// Axis a MIP collapses: sagittal drops y (axis 2), coronal drops x (axis 1).
inline size_t collapsed_axis(View v) {
  return v == View::kSagittal ? 2 : 1;
}
/// In-plane axis kept besides z: x for sagittal, y for coronal.
inline size_t kept_axis(View v) { return v == View::kSagittal ? 1 : 2; }

/// 3D scalar intensity grid with per-axis spacing in mm/voxel.
struct Volume3D {
  Tensor<double> data;                 // shape (h, w, d) = (z, x, y)
  std::array<double, 3> spacing{1, 1, 1};

  Volume3D() = default;
  Volume3D(Tensor<double> d, std::array<double, 3> s);

  int64_t extent(size_t axis) const { return data.dim(axis); }
  /// Physical size of the grid along an axis, mm.
  double size_mm(size_t axis) const {
    return static_cast<double>(data.dim(axis)) * spacing[axis];
  }
  void validate() const;
};

struct Centroid {
  std::array<double, 3> pos_mm{0, 0, 0};  // (z, x, y)
  std::optional<double> confidence;
};

/// Labelled 3D centroids in mm. At most one entry per vertebra; background
/// never appears. Ordered by channel index.
class CentroidSet {
 public:
  void set(const VertebraLabel& label, std::array<double, 3> pos_mm,
           std::optional<double> confidence = std::nullopt);
  bool has(const VertebraLabel& label) const;
  const Centroid& get(const VertebraLabel& label) const;
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const std::map<int, Centroid>& entries() const { return entries_; }

 private:
  std::map<int, Centroid> entries_;  // key: channel index 1..24
};

/// mm -> voxel index, rounding half away from zero. With clamp=false an
/// out-of-bounds result throws RangeError; with clamp=true it is clamped to
/// the grid.
std::array<int64_t, 3> mm_to_voxel(const std::array<double, 3>& pos_mm,
                                   const Volume3D& vol, bool clamp = false);

std::array<double, 3> voxel_to_mm(const std::array<int64_t, 3>& idx,
                                  const Volume3D& vol);

// Text serialization: one row per centroid, `label z_mm x_mm y_mm [conf]`,
// '#' starts a comment.
void save_centroids(const std::string& path, const CentroidSet& cs);
CentroidSet load_centroids(const std::string& path);

// Volume on disk: TensorFile (float32 or float64) plus `<path>.meta` sidecar
// holding the spacing.
void save_volume(const std::string& path, const Volume3D& vol,
                 TensorDType dtype = TensorDType::kFloat32);
Volume3D load_volume(const std::string& path);

}  // namespace spinelab

#endif  // SPINELAB_VOLUME_HPP_
