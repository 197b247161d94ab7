#ifndef SPINELAB_PREP_DATASET_HPP_
#define SPINELAB_PREP_DATASET_HPP_

#include <string>
#include <vector>

#include "spinelab/preprocess.hpp"

namespace spinelab::prep {

/// One scan's preprocessed artifacts. Paths are relative to the index
/// directory. All augmented reformations of a scan share the ground-truth
/// heatmap of the full projection: half-slice sampling moves intensity, not
/// centroids.
struct PreprocessedScan {
  std::string scan_id;
  std::string split;
  std::string centroid_path;               // original 3D centroids (mm)
  std::string sag_full, cor_full;          // full-MIP tensor paths
  std::vector<std::string> sag_aug, cor_aug;
  std::string sag_gt, cor_gt;              // heatmap stack paths
};

/// On-disk index of a preprocessed dataset (index.txt within the directory).
struct PreprocessedIndex {
  double sigma_mm = 6.0;
  double resample_mm = 1.0;
  std::string weight_table_path;  // relative
  std::vector<PreprocessedScan> scans;

  void save(const std::string& dir) const;
  static PreprocessedIndex load(const std::string& dir);
};

}  // namespace spinelab::prep

#endif  // SPINELAB_PREP_DATASET_HPP_
