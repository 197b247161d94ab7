#ifndef SPINELAB_INFER_HPP_
#define SPINELAB_INFER_HPP_

#include <array>
#include <string>
#include <utility>

#include "spinelab/nets/builders.hpp"
#include "spinelab/preprocess.hpp"
#include "spinelab/volume.hpp"

namespace spinelab::infer {

struct InferenceConfig {
  double threshold = 0.0;            // T, applied per view before fusion
  double min_peak_confidence = -1.0; // post-fusion gate; < 0 means T*T
  double resample_mm = 1.0;

  double effective_min_conf() const {
    return min_peak_confidence >= 0.0 ? min_peak_confidence
                                      : threshold * threshold;
  }
  void validate() const;
};

/// Full fused heatmap volume: value(c, z, x, y) = sag(c, z, x) * cor(c, z, y).
struct FusedStack {
  Tensor<double> data;  // (25, h, w, d)
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

/// Values below T are zeroed, others pass through unchanged.
prep::HeatmapStack threshold_stack(const prep::HeatmapStack& stack, double t);

/// Per-channel, per-shared-row outer product of the two view heatmaps.
/// Requires equal channel counts and equal z extents.
FusedStack fuse_views(const prep::HeatmapStack& sag,
                      const prep::HeatmapStack& cor);

/// Channel argmax extraction. A vertebra channel emits a centroid when its
/// maximum exceeds min_conf; ties resolve to the lexicographically smallest
/// (z, x, y) voxel. The background channel never emits.
CentroidSet extract_centroids(const FusedStack& fused, double min_conf);

/// Fusion + extraction without materializing the fused volume; exactly
/// equivalent to extract_centroids(fuse_views(sag, cor), min_conf) because
/// the per-row product separates into row maxima.
CentroidSet extract_centroids_from_views(const prep::HeatmapStack& sag,
                                         const prep::HeatmapStack& cor,
                                         double threshold, double min_conf);

/// A trained labelling model: either a Btrfly net or a pair of single-view
/// nets. Loads from a checkpoint directory written by the training loop.
template <typename T>
class Generator {
 public:
  enum class Kind { kBtrfly, kSingleViewPair };

  static Generator load(const std::string& ckpt_dir);
  static Generator btrfly(nets::NetworkSpec spec, nets::NetworkParams<T> params);
  static Generator singleview_pair(nets::NetworkSpec sag_spec,
                                   nets::NetworkParams<T> sag_params,
                                   nets::NetworkSpec cor_spec,
                                   nets::NetworkParams<T> cor_params);

  Kind kind() const { return kind_; }

  /// Eval-mode forward of both views; returns prediction stacks in double.
  std::pair<prep::HeatmapStack, prep::HeatmapStack> predict(
      const prep::ProjectionImage& sag, const prep::ProjectionImage& cor);

 private:
  Kind kind_ = Kind::kBtrfly;
  nets::NetworkSpec spec_a_, spec_b_;
  nets::NetworkParams<T> params_a_, params_b_;
};

template <typename T>
struct ScanInference {
  CentroidSet centroids;
  prep::HeatmapStack sag;  // raw (unthresholded) predictions
  prep::HeatmapStack cor;
};

/// Full per-scan pipeline: resample, full MIPs, forward, threshold,
/// fuse, extract. Deterministic; no discriminator involved.
template <typename T>
ScanInference<T> infer_scan(const Volume3D& vol, Generator<T>& gen,
                            const InferenceConfig& cfg);

}  // namespace spinelab::infer

#endif  // SPINELAB_INFER_HPP_
