#ifndef SPINELAB_NETS_BUILDERS_HPP_
#define SPINELAB_NETS_BUILDERS_HPP_

#include <cstdint>
#include <utility>

#include "spinelab/nets/engine.hpp"
#include "spinelab/nets/params.hpp"
#include "spinelab/nets/spec.hpp"

namespace spinelab::nets {

/// Two-arm fused network. Each arm is an encoder-decoder over one view;
/// the arms' deepest feature maps are concatenated into a shared trunk
/// which then feeds both decoders. Skip connections stay within a view.
/// Batch-norm follows every convolution except the final linear one;
/// dropout sits in the fused trunk.
struct BtrflyConfig {
  int64_t input_channels = 1;
  int64_t output_channels = 25;
  int arm_levels = 4;          // resolution levels per arm
  int fusion_depth = -1;       // level at which the arms merge; -1 = deepest
  int64_t base_width = 16;
  int fused_convs = 2;
  double dropout_rate = 0.2;
  int64_t kernel = 3;
};

/// One arm of the Btrfly layout working on a single view.
struct SingleViewConfig {
  int64_t input_channels = 1;
  int64_t output_channels = 25;
  int arm_levels = 4;
  int64_t base_width = 16;
  int trunk_convs = 2;
  int64_t kernel = 3;
};

/// Fully-convolutional 3D auto-encoder over a heatmap stack viewed as a
/// single-channel volume (channel axis becomes the leading spatial axis).
/// 5x5x5 kernels dilated in-plane only, average pooling only, no
/// fully-connected layers; the reconstruction matches the input shape.
struct DiscriminatorConfig {
  int64_t kernel = 5;
  int64_t dilation_inplane = 2;
  int64_t enc_width0 = 3;
  int64_t enc_width1 = 6;
  int64_t bottleneck_width = 6;
  double min_inplane_receptive_field = 76.0;  // enforced at build time
};

NetworkSpec btrfly_spec(const BtrflyConfig& cfg);
NetworkSpec singleview_spec(const SingleViewConfig& cfg);
NetworkSpec discriminator_spec(const DiscriminatorConfig& cfg);

template <typename T>
std::pair<NetworkSpec, NetworkParams<T>> build_btrfly(const BtrflyConfig& cfg,
                                                      uint64_t seed) {
  NetworkSpec spec = btrfly_spec(cfg);
  return {spec, init_params<T>(spec, seed)};
}

template <typename T>
std::pair<NetworkSpec, NetworkParams<T>> build_singleview(
    const SingleViewConfig& cfg, uint64_t seed) {
  NetworkSpec spec = singleview_spec(cfg);
  return {spec, init_params<T>(spec, seed)};
}

template <typename T>
std::pair<NetworkSpec, NetworkParams<T>> build_discriminator(
    const DiscriminatorConfig& cfg, uint64_t seed) {
  NetworkSpec spec = discriminator_spec(cfg);
  return {spec, init_params<T>(spec, seed)};
}

enum class EnergyNorm { kMean, kSum };

/// Reconstruction energy E = ||stack - rec(stack)||^2 of a (25, H, W)
/// stack, divided by the element count under the (default) mean
/// normalization so the margin is scale-free across input sizes.
template <typename T>
double discriminator_energy(Executor<T>& exec, NetworkParams<T>& params,
                            const Tensor<T>& stack,
                            EnergyNorm norm = EnergyNorm::kMean);

// Port names shared by builders and training.
inline const char* kSagittalPort = "sagittal";
inline const char* kCoronalPort = "coronal";
inline const char* kSagittalOut = "sag_out";
inline const char* kCoronalOut = "cor_out";
inline const char* kImagePort = "image";
inline const char* kImageOut = "out";
inline const char* kStackPort = "stack";
inline const char* kReconstructionOut = "rec";

}  // namespace spinelab::nets

#endif  // SPINELAB_NETS_BUILDERS_HPP_
