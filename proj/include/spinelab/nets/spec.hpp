#ifndef SPINELAB_NETS_SPEC_HPP_
#define SPINELAB_NETS_SPEC_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spinelab/error.hpp"

namespace spinelab::nets {

enum class LayerKind {
  kInput,
  kConv2d,
  kConv3d,
  kAvgPool,
  kUpsample,
  kConcat,
  kBatchNorm,
  kDropout,
  kRelu,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

/// One node of the network DAG. Which fields apply depends on `kind`:
/// convs use kernel/stride/dilation/in_channels/out_channels, pooling and
/// upsampling use window, batch-norm uses channels, dropout uses rate.
/// All convolutions are same-padded: output spatial extent is
/// ceil(input / stride) per axis.
struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::kInput;
  std::vector<std::string> inputs;  // source layer ids; empty for kInput

  std::vector<int64_t> kernel;      // per spatial axis
  std::vector<int64_t> stride;
  std::vector<int64_t> dilation;
  int64_t in_channels = 0;
  int64_t out_channels = 0;

  std::vector<int64_t> window;      // pool window (= stride) / upsample factor

  double rate = 0.0;                // dropout

  int64_t channels = 0;             // batch-norm
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  bool has_params() const {
    return kind == LayerKind::kConv2d || kind == LayerKind::kConv3d ||
           kind == LayerKind::kBatchNorm;
  }
  size_t spatial_rank() const { return kind == LayerKind::kConv3d ? 3 : 2; }
};

/// Receptive field extent and stride (jump) per spatial axis.
struct ReceptiveField {
  std::vector<double> extent;
  std::vector<double> jump;
};

/// Directed acyclic network with named input and output ports. Layers are
/// stored in topological order; every referenced source appears earlier.
class NetworkSpec {
 public:
  std::vector<LayerSpec> layers;
  std::vector<std::string> input_ports;   // ids of kInput layers
  std::vector<std::string> output_ports;  // ids of producing layers

  const LayerSpec& layer(const std::string& id) const;
  bool has_layer(const std::string& id) const;

  /// Structural validation: ordering, port existence, field sanity.
  void validate() const;

  /// Propagates (N, C, spatial...) shapes from the given port shapes and
  /// checks channel/extent consistency. Returns the shape at every layer.
  std::map<std::string, std::vector<int64_t>> infer_shapes(
      const std::map<std::string, std::vector<int64_t>>& port_shapes) const;

  bool contains_kind(LayerKind k) const;

  std::string to_json() const;
  static NetworkSpec from_json(const std::string& text);

  void save(const std::string& path) const;
  static NetworkSpec load(const std::string& path);
};

/// Receptive field at the output of the deepest input->output path
/// (path with the most layers; ties broken toward the first output).
/// Composition per axis: r += (k_eff - 1) * j, j *= stride, with
/// k_eff = dilation * (k - 1) + 1. Pooling uses k = window = stride;
/// upsampling divides the jump by its factor.
ReceptiveField compute_receptive_field(const NetworkSpec& spec);

}  // namespace spinelab::nets

#endif  // SPINELAB_NETS_SPEC_HPP_
