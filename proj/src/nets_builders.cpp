#include "spinelab/nets/builders.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace spinelab::nets {

namespace {

LayerSpec conv2d(const std::string& id, const std::string& src, int64_t in_ch,
                 int64_t out_ch, int64_t k) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kConv2d;
  l.inputs = {src};
  l.kernel = {k, k};
  l.stride = {1, 1};
  l.dilation = {1, 1};
  l.in_channels = in_ch;
  l.out_channels = out_ch;
  return l;
}

LayerSpec bn(const std::string& id, const std::string& src, int64_t channels) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kBatchNorm;
  l.inputs = {src};
  l.channels = channels;
  return l;
}

LayerSpec relu(const std::string& id, const std::string& src) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kRelu;
  l.inputs = {src};
  return l;
}

LayerSpec pool2(const std::string& id, const std::string& src) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kAvgPool;
  l.inputs = {src};
  l.window = {2, 2};
  return l;
}

LayerSpec up2(const std::string& id, const std::string& src) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kUpsample;
  l.inputs = {src};
  l.window = {2, 2};
  return l;
}

LayerSpec input_layer(const std::string& id) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kInput;
  return l;
}

int64_t level_width(int64_t base, int level) {
  return base * (int64_t{1} << std::min(level, 2));
}

/// Conv + BN + ReLU block; returns the id of the block output.
std::string conv_block(NetworkSpec& spec, const std::string& name,
                       const std::string& src, int64_t in_ch, int64_t out_ch,
                       int64_t k) {
  spec.layers.push_back(conv2d(name + "_conv", src, in_ch, out_ch, k));
  spec.layers.push_back(bn(name + "_bn", name + "_conv", out_ch));
  spec.layers.push_back(relu(name + "_relu", name + "_bn"));
  return name + "_relu";
}

/// Encoder for one view; fills `skips` with the per-level block outputs.
std::string build_encoder(NetworkSpec& spec, const std::string& prefix,
                          const std::string& input, int64_t in_channels,
                          int levels, int64_t base, int64_t k,
                          std::vector<std::string>* skips,
                          std::vector<int64_t>* widths) {
  std::string cur = input;
  int64_t cur_ch = in_channels;
  for (int i = 0; i < levels; ++i) {
    const int64_t w = level_width(base, i);
    if (i > 0) {
      spec.layers.push_back(pool2(prefix + "_pool" + std::to_string(i - 1), cur));
      cur = prefix + "_pool" + std::to_string(i - 1);
    }
    cur = conv_block(spec, prefix + "_enc" + std::to_string(i), cur, cur_ch, w, k);
    cur_ch = w;
    skips->push_back(cur);
    widths->push_back(w);
  }
  return cur;
}

/// Decoder mirroring the encoder, with same-view skip concatenation. The
/// returned readout tensor concatenates the last decoder block with the
/// full-resolution encoder features, so the regression head sees both deep
/// context and near-raw appearance.
std::string build_decoder(NetworkSpec& spec, const std::string& prefix,
                          const std::string& trunk, int64_t trunk_ch,
                          const std::vector<std::string>& skips,
                          const std::vector<int64_t>& widths, int64_t k,
                          int64_t* readout_channels) {
  std::string cur = trunk;
  int64_t cur_ch = trunk_ch;
  for (int i = static_cast<int>(widths.size()) - 2; i >= 0; --i) {
    const std::string lvl = std::to_string(i);
    spec.layers.push_back(up2(prefix + "_up" + lvl, cur));
    LayerSpec cat;
    cat.id = prefix + "_dec" + lvl + "_cat";
    cat.kind = LayerKind::kConcat;
    cat.inputs = {prefix + "_up" + lvl, skips[static_cast<size_t>(i)]};
    spec.layers.push_back(cat);
    cur = conv_block(spec, prefix + "_dec" + lvl, cat.id,
                     cur_ch + widths[static_cast<size_t>(i)],
                     widths[static_cast<size_t>(i)], k);
    cur_ch = widths[static_cast<size_t>(i)];
  }
  LayerSpec readout;
  readout.id = prefix + "_readout_cat";
  readout.kind = LayerKind::kConcat;
  readout.inputs = {cur, skips.front()};
  spec.layers.push_back(readout);
  *readout_channels = cur_ch + widths.front();
  return readout.id;
}

}  // namespace

NetworkSpec btrfly_spec(const BtrflyConfig& cfg) {
  if (cfg.arm_levels < 2) throw ConfigError("btrfly needs at least 2 levels");
  const int fusion_depth =
      cfg.fusion_depth < 0 ? cfg.arm_levels - 1 : cfg.fusion_depth;
  if (fusion_depth > cfg.arm_levels - 1)
    throw ConfigError("fusion depth exceeds arm depth");
  if (fusion_depth != cfg.arm_levels - 1)
    throw ConfigError("fusion is supported only at the deepest arm level");
  if (cfg.fused_convs < 1) throw ConfigError("need at least one fused conv");

  NetworkSpec spec;
  spec.layers.push_back(input_layer(kSagittalPort));
  spec.layers.push_back(input_layer(kCoronalPort));
  spec.input_ports = {kSagittalPort, kCoronalPort};

  std::vector<std::string> skips_sag, skips_cor;
  std::vector<int64_t> widths;
  const std::string deep_sag =
      build_encoder(spec, "sag", kSagittalPort, cfg.input_channels,
                    cfg.arm_levels, cfg.base_width, cfg.kernel, &skips_sag,
                    &widths);
  std::vector<int64_t> widths_cor;
  const std::string deep_cor =
      build_encoder(spec, "cor", kCoronalPort, cfg.input_channels,
                    cfg.arm_levels, cfg.base_width, cfg.kernel, &skips_cor,
                    &widths_cor);

  // Fusion: concatenate the deepest per-view features into a shared trunk.
  LayerSpec cat;
  cat.id = "fused_concat";
  cat.kind = LayerKind::kConcat;
  cat.inputs = {deep_sag, deep_cor};
  spec.layers.push_back(cat);

  const int64_t trunk_ch = 2 * widths.back();
  std::string cur = cat.id;
  int64_t cur_ch = trunk_ch;
  for (int j = 0; j < cfg.fused_convs; ++j) {
    const std::string name = "fused" + std::to_string(j);
    cur = conv_block(spec, name, cur, cur_ch, trunk_ch, cfg.kernel);
    cur_ch = trunk_ch;
    if (cfg.dropout_rate > 0.0) {
      LayerSpec drop;
      drop.id = name + "_drop";
      drop.kind = LayerKind::kDropout;
      drop.inputs = {cur};
      drop.rate = cfg.dropout_rate;
      spec.layers.push_back(drop);
      cur = drop.id;
    }
  }

  int64_t head_sag = 0, head_cor = 0;
  const std::string dec_sag = build_decoder(spec, "sag", cur, trunk_ch,
                                            skips_sag, widths, cfg.kernel,
                                            &head_sag);
  const std::string dec_cor = build_decoder(spec, "cor", cur, trunk_ch,
                                            skips_cor, widths, cfg.kernel,
                                            &head_cor);

  // Final per-view regression convs are linear.
  spec.layers.push_back(
      conv2d(kSagittalOut, dec_sag, head_sag, cfg.output_channels, cfg.kernel));
  spec.layers.push_back(
      conv2d(kCoronalOut, dec_cor, head_cor, cfg.output_channels, cfg.kernel));
  spec.output_ports = {kSagittalOut, kCoronalOut};
  spec.validate();
  return spec;
}

NetworkSpec singleview_spec(const SingleViewConfig& cfg) {
  if (cfg.arm_levels < 2)
    throw ConfigError("single-view net needs at least 2 levels");

  NetworkSpec spec;
  spec.layers.push_back(input_layer(kImagePort));
  spec.input_ports = {kImagePort};

  std::vector<std::string> skips;
  std::vector<int64_t> widths;
  std::string cur =
      build_encoder(spec, "arm", kImagePort, cfg.input_channels,
                    cfg.arm_levels, cfg.base_width, cfg.kernel, &skips, &widths);

  const int64_t trunk_ch = widths.back();
  for (int j = 0; j < cfg.trunk_convs; ++j) {
    cur = conv_block(spec, "mid" + std::to_string(j), cur, trunk_ch, trunk_ch,
                     cfg.kernel);
  }

  int64_t head = 0;
  cur = build_decoder(spec, "arm", cur, trunk_ch, skips, widths, cfg.kernel,
                      &head);
  spec.layers.push_back(
      conv2d(kImageOut, cur, head, cfg.output_channels, cfg.kernel));
  spec.output_ports = {kImageOut};
  spec.validate();
  return spec;
}

namespace {

LayerSpec conv3d_inplane_dilated(const std::string& id, const std::string& src,
                                 int64_t in_ch, int64_t out_ch, int64_t k,
                                 int64_t dil) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kConv3d;
  l.inputs = {src};
  l.kernel = {k, k, k};
  l.stride = {1, 1, 1};
  l.dilation = {1, dil, dil};  // dilated in the image plane only
  l.in_channels = in_ch;
  l.out_channels = out_ch;
  return l;
}

LayerSpec pool_inplane(const std::string& id, const std::string& src) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kAvgPool;
  l.inputs = {src};
  l.window = {1, 2, 2};
  return l;
}

LayerSpec up_inplane(const std::string& id, const std::string& src) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::kUpsample;
  l.inputs = {src};
  l.window = {1, 2, 2};
  return l;
}

}  // namespace

NetworkSpec discriminator_spec(const DiscriminatorConfig& cfg) {
  if (cfg.kernel < 1 || cfg.kernel % 2 == 0)
    throw ConfigError("discriminator kernel must be odd");

  NetworkSpec spec;
  spec.layers.push_back(input_layer(kStackPort));
  spec.input_ports = {kStackPort};

  const int64_t k = cfg.kernel, d = cfg.dilation_inplane;
  auto block = [&](const std::string& name, const std::string& src,
                   int64_t in_ch, int64_t out_ch) {
    spec.layers.push_back(
        conv3d_inplane_dilated(name + "_conv", src, in_ch, out_ch, k, d));
    spec.layers.push_back(relu(name + "_relu", name + "_conv"));
    return name + "_relu";
  };

  std::string cur = block("d_enc0", kStackPort, 1, cfg.enc_width0);
  spec.layers.push_back(pool_inplane("d_pool0", cur));
  cur = block("d_enc1", "d_pool0", cfg.enc_width0, cfg.enc_width1);
  spec.layers.push_back(pool_inplane("d_pool1", cur));
  cur = block("d_mid", "d_pool1", cfg.enc_width1, cfg.bottleneck_width);
  spec.layers.push_back(up_inplane("d_up0", cur));
  cur = block("d_dec0", "d_up0", cfg.bottleneck_width, cfg.enc_width0);
  spec.layers.push_back(up_inplane("d_up1", cur));
  spec.layers.push_back(
      conv3d_inplane_dilated(kReconstructionOut, "d_up1", cfg.enc_width0, 1, k, d));
  spec.output_ports = {kReconstructionOut};
  spec.validate();

  const ReceptiveField rf = compute_receptive_field(spec);
  // Spatial axes are (channel-extent, H, W); the last two are in-plane.
  for (size_t a = 1; a < rf.extent.size(); ++a) {
    if (rf.extent[a] < cfg.min_inplane_receptive_field)
      throw ConfigError(
          "discriminator in-plane receptive field " +
          std::to_string(rf.extent[a]) + " is below the required " +
          std::to_string(cfg.min_inplane_receptive_field));
  }
  return spec;
}

template <typename T>
double discriminator_energy(Executor<T>& exec, NetworkParams<T>& params,
                            const Tensor<T>& stack, EnergyNorm norm) {
  if (stack.rank() != 3)
    throw ShapeError("discriminator_energy expects a (C, H, W) stack");
  Tensor<T> lifted(std::vector<int64_t>{1, 1, stack.dim(0), stack.dim(1),
                                        stack.dim(2)});
  std::copy(stack.data(), stack.data() + stack.numel(), lifted.data());
  auto out = exec.forward({{kStackPort, std::move(lifted)}}, params,
                          /*train=*/false);
  const Tensor<T>& rec = out.at(kReconstructionOut);
  double e = 0.0;
  for (int64_t i = 0; i < stack.numel(); ++i) {
    const double r = static_cast<double>(stack[i]) - static_cast<double>(rec[i]);
    e += r * r;
  }
  if (norm == EnergyNorm::kMean) e /= static_cast<double>(stack.numel());
  return e;
}

template double discriminator_energy<float>(Executor<float>&,
                                            NetworkParams<float>&,
                                            const Tensor<float>&, EnergyNorm);
template double discriminator_energy<double>(Executor<double>&,
                                             NetworkParams<double>&,
                                             const Tensor<double>&, EnergyNorm);

}  // namespace spinelab::nets
