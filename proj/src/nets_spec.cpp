#include "spinelab/nets/spec.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace spinelab::nets {

namespace {

const std::map<LayerKind, std::string>& kind_names() {
  static const std::map<LayerKind, std::string> names = {
      {LayerKind::kInput, "input"},       {LayerKind::kConv2d, "conv2d"},
      {LayerKind::kConv3d, "conv3d"},     {LayerKind::kAvgPool, "avg_pool"},
      {LayerKind::kUpsample, "upsample"}, {LayerKind::kConcat, "concat"},
      {LayerKind::kBatchNorm, "batch_norm"},
      {LayerKind::kDropout, "dropout"},   {LayerKind::kRelu, "relu"}};
  return names;
}

}  // namespace

const char* layer_kind_name(LayerKind k) { return kind_names().at(k).c_str(); }

LayerKind layer_kind_from_name(const std::string& name) {
  for (const auto& [k, n] : kind_names()) {
    if (n == name) return k;
  }
  throw FormatError("unknown layer kind: '" + name + "'");
}

const LayerSpec& NetworkSpec::layer(const std::string& id) const {
  for (const auto& l : layers) {
    if (l.id == id) return l;
  }
  throw ConfigError("no layer named '" + id + "'");
}

bool NetworkSpec::has_layer(const std::string& id) const {
  return std::any_of(layers.begin(), layers.end(),
                     [&](const LayerSpec& l) { return l.id == id; });
}

void NetworkSpec::validate() const {
  std::set<std::string> seen;
  for (const auto& l : layers) {
    if (l.id.empty()) throw ConfigError("layer with empty id");
    if (seen.count(l.id)) throw ConfigError("duplicate layer id " + l.id);
    if (l.kind == LayerKind::kInput) {
      if (!l.inputs.empty()) throw ConfigError("input layer cannot have sources");
    } else {
      if (l.inputs.empty())
        throw ConfigError("layer " + l.id + " has no source");
      for (const auto& src : l.inputs) {
        if (!seen.count(src))
          throw ConfigError("layer " + l.id + " references '" + src +
                            "' which does not appear earlier");
      }
    }
    if (l.kind == LayerKind::kConv2d || l.kind == LayerKind::kConv3d) {
      const size_t r = l.spatial_rank();
      if (l.kernel.size() != r || l.stride.size() != r ||
          l.dilation.size() != r)
        throw ConfigError("layer " + l.id + ": conv needs per-axis kernel, "
                          "stride and dilation");
      if (l.in_channels <= 0 || l.out_channels <= 0)
        throw ConfigError("layer " + l.id + ": conv channels must be positive");
      for (size_t a = 0; a < r; ++a) {
        if (l.kernel[a] < 1 || l.kernel[a] % 2 == 0)
          throw ConfigError("layer " + l.id + ": kernels must be odd");
        if (l.stride[a] < 1) throw ConfigError("layer " + l.id + ": bad stride");
        if (l.dilation[a] < 1)
          throw ConfigError("layer " + l.id + ": dilation must be >= 1");
      }
    }
    if (l.kind == LayerKind::kAvgPool || l.kind == LayerKind::kUpsample) {
      if (l.window.empty())
        throw ConfigError("layer " + l.id + ": window required");
      for (int64_t w : l.window) {
        if (w < 1) throw ConfigError("layer " + l.id + ": bad window");
      }
    }
    if (l.kind == LayerKind::kConcat && l.inputs.size() < 2)
      throw ConfigError("layer " + l.id + ": concat needs >= 2 sources");
    if (l.kind == LayerKind::kBatchNorm && l.channels <= 0)
      throw ConfigError("layer " + l.id + ": batch_norm needs channels");
    if (l.kind == LayerKind::kDropout && (l.rate < 0.0 || l.rate >= 1.0))
      throw ConfigError("layer " + l.id + ": dropout rate outside [0,1)");
    seen.insert(l.id);
  }
  for (const auto& p : input_ports) {
    if (!has_layer(p) || layer(p).kind != LayerKind::kInput)
      throw ConfigError("input port '" + p + "' is not an input layer");
  }
  for (const auto& p : output_ports) {
    if (!has_layer(p)) throw ConfigError("output port '" + p + "' missing");
  }
  if (input_ports.empty() || output_ports.empty())
    throw ConfigError("network needs at least one input and output port");
}

std::map<std::string, std::vector<int64_t>> NetworkSpec::infer_shapes(
    const std::map<std::string, std::vector<int64_t>>& port_shapes) const {
  std::map<std::string, std::vector<int64_t>> shapes;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::kInput) {
      auto it = port_shapes.find(l.id);
      if (it == port_shapes.end())
        throw ShapeError("no shape provided for input port '" + l.id + "'");
      if (it->second.size() < 3)
        throw ShapeError("input shapes are (N, C, spatial...)");
      shapes[l.id] = it->second;
      continue;
    }
    std::vector<std::vector<int64_t>> in;
    in.reserve(l.inputs.size());
    for (const auto& src : l.inputs) in.push_back(shapes.at(src));
    const auto& x = in[0];
    const size_t spatial = x.size() - 2;

    switch (l.kind) {
      case LayerKind::kConv2d:
      case LayerKind::kConv3d: {
        if (spatial != l.spatial_rank())
          throw ShapeError("layer " + l.id + ": expects rank-" +
                           std::to_string(l.spatial_rank()) + " input");
        if (x[1] != l.in_channels)
          throw ShapeError("layer " + l.id + ": got " + std::to_string(x[1]) +
                           " channels, spec says " +
                           std::to_string(l.in_channels));
        std::vector<int64_t> out = x;
        out[1] = l.out_channels;
        for (size_t a = 0; a < spatial; ++a) {
          // same padding: ceil(extent / stride)
          out[2 + a] = (x[2 + a] + l.stride[a] - 1) / l.stride[a];
        }
        shapes[l.id] = out;
        break;
      }
      case LayerKind::kAvgPool: {
        if (l.window.size() != spatial)
          throw ShapeError("layer " + l.id + ": window rank mismatch");
        std::vector<int64_t> out = x;
        for (size_t a = 0; a < spatial; ++a) {
          if (x[2 + a] % l.window[a] != 0)
            throw ShapeError("layer " + l.id + ": extent " +
                             std::to_string(x[2 + a]) +
                             " not divisible by pool window " +
                             std::to_string(l.window[a]));
          out[2 + a] = x[2 + a] / l.window[a];
        }
        shapes[l.id] = out;
        break;
      }
      case LayerKind::kUpsample: {
        if (l.window.size() != spatial)
          throw ShapeError("layer " + l.id + ": window rank mismatch");
        std::vector<int64_t> out = x;
        for (size_t a = 0; a < spatial; ++a) out[2 + a] = x[2 + a] * l.window[a];
        shapes[l.id] = out;
        break;
      }
      case LayerKind::kConcat: {
        std::vector<int64_t> out = x;
        for (size_t i = 1; i < in.size(); ++i) {
          if (in[i].size() != x.size())
            throw ShapeError("layer " + l.id + ": concat rank mismatch");
          for (size_t a = 0; a < x.size(); ++a) {
            if (a == 1) continue;
            if (in[i][a] != x[a])
              throw ShapeError("layer " + l.id +
                               ": concat extents differ off-channel");
          }
          out[1] += in[i][1];
        }
        shapes[l.id] = out;
        break;
      }
      case LayerKind::kBatchNorm: {
        if (x[1] != l.channels)
          throw ShapeError("layer " + l.id + ": batch_norm channel mismatch");
        shapes[l.id] = x;
        break;
      }
      case LayerKind::kDropout:
      case LayerKind::kRelu: {
        shapes[l.id] = x;
        break;
      }
      case LayerKind::kInput:
        break;  // handled above
    }
  }
  return shapes;
}

bool NetworkSpec::contains_kind(LayerKind k) const {
  return std::any_of(layers.begin(), layers.end(),
                     [&](const LayerSpec& l) { return l.kind == k; });
}

ReceptiveField compute_receptive_field(const NetworkSpec& spec) {
  spec.validate();
  // Deepest path = most layers from any input to any output.
  std::map<std::string, int> depth;
  std::map<std::string, std::string> via;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::kInput) {
      depth[l.id] = 0;
      continue;
    }
    int best = -1;
    std::string best_src;
    for (const auto& src : l.inputs) {
      auto it = depth.find(src);
      if (it != depth.end() && it->second > best) {
        best = it->second;
        best_src = src;
      }
    }
    if (best < 0) throw ConfigError("layer " + l.id + " unreachable from inputs");
    depth[l.id] = best + 1;
    via[l.id] = best_src;
  }
  std::string end;
  int best_depth = -1;
  for (const auto& p : spec.output_ports) {
    if (depth.at(p) > best_depth) {
      best_depth = depth.at(p);
      end = p;
    }
  }
  // Collect the chain input -> ... -> end.
  std::vector<const LayerSpec*> chain;
  std::string cur = end;
  while (true) {
    const LayerSpec& l = spec.layer(cur);
    chain.push_back(&l);
    if (l.kind == LayerKind::kInput) break;
    cur = via.at(cur);
  }
  std::reverse(chain.begin(), chain.end());

  // Spatial rank along this chain comes from the first layer that fixes it.
  size_t rank = 0;
  for (const LayerSpec* l : chain) {
    if (l->kind == LayerKind::kConv2d || l->kind == LayerKind::kConv3d) {
      rank = l->spatial_rank();
      break;
    }
    if ((l->kind == LayerKind::kAvgPool || l->kind == LayerKind::kUpsample) &&
        !l->window.empty()) {
      rank = l->window.size();
      break;
    }
  }
  if (rank == 0) rank = 2;

  ReceptiveField rf;
  rf.extent.assign(rank, 1.0);
  rf.jump.assign(rank, 1.0);
  for (const LayerSpec* l : chain) {
    switch (l->kind) {
      case LayerKind::kConv2d:
      case LayerKind::kConv3d: {
        if (l->kernel.size() != rank)
          throw ConfigError("receptive field: mixed spatial ranks in chain");
        for (size_t a = 0; a < rank; ++a) {
          const double k_eff =
              static_cast<double>(l->dilation[a] * (l->kernel[a] - 1) + 1);
          rf.extent[a] += (k_eff - 1.0) * rf.jump[a];
          rf.jump[a] *= static_cast<double>(l->stride[a]);
        }
        break;
      }
      case LayerKind::kAvgPool: {
        for (size_t a = 0; a < rank; ++a) {
          rf.extent[a] += static_cast<double>(l->window[a] - 1) * rf.jump[a];
          rf.jump[a] *= static_cast<double>(l->window[a]);
        }
        break;
      }
      case LayerKind::kUpsample: {
        for (size_t a = 0; a < rank; ++a)
          rf.jump[a] /= static_cast<double>(l->window[a]);
        break;
      }
      case LayerKind::kInput:
      case LayerKind::kConcat:
      case LayerKind::kBatchNorm:
      case LayerKind::kDropout:
      case LayerKind::kRelu:
        break;  // pointwise or pass-through
    }
  }
  return rf;
}

std::string NetworkSpec::to_json() const {
  nlohmann::json j;
  j["input_ports"] = input_ports;
  j["output_ports"] = output_ports;
  nlohmann::json jl = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json e;
    e["id"] = l.id;
    e["kind"] = kind_names().at(l.kind);
    if (!l.inputs.empty()) e["inputs"] = l.inputs;
    switch (l.kind) {
      case LayerKind::kConv2d:
      case LayerKind::kConv3d:
        e["kernel"] = l.kernel;
        e["stride"] = l.stride;
        e["dilation"] = l.dilation;
        e["in_channels"] = l.in_channels;
        e["out_channels"] = l.out_channels;
        break;
      case LayerKind::kAvgPool:
      case LayerKind::kUpsample:
        e["window"] = l.window;
        break;
      case LayerKind::kBatchNorm:
        e["channels"] = l.channels;
        e["momentum"] = l.bn_momentum;
        e["epsilon"] = l.bn_epsilon;
        break;
      case LayerKind::kDropout:
        e["rate"] = l.rate;
        break;
      default:
        break;
    }
    jl.push_back(e);
  }
  j["layers"] = jl;
  return j.dump(2);
}

NetworkSpec NetworkSpec::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("bad network spec JSON: ") + e.what());
  }
  NetworkSpec spec;
  spec.input_ports = j.at("input_ports").get<std::vector<std::string>>();
  spec.output_ports = j.at("output_ports").get<std::vector<std::string>>();
  for (const auto& e : j.at("layers")) {
    LayerSpec l;
    l.id = e.at("id").get<std::string>();
    l.kind = layer_kind_from_name(e.at("kind").get<std::string>());
    if (e.contains("inputs"))
      l.inputs = e.at("inputs").get<std::vector<std::string>>();
    if (e.contains("kernel")) l.kernel = e.at("kernel").get<std::vector<int64_t>>();
    if (e.contains("stride")) l.stride = e.at("stride").get<std::vector<int64_t>>();
    if (e.contains("dilation"))
      l.dilation = e.at("dilation").get<std::vector<int64_t>>();
    if (e.contains("in_channels")) l.in_channels = e.at("in_channels").get<int64_t>();
    if (e.contains("out_channels")) l.out_channels = e.at("out_channels").get<int64_t>();
    if (e.contains("window")) l.window = e.at("window").get<std::vector<int64_t>>();
    if (e.contains("channels")) l.channels = e.at("channels").get<int64_t>();
    if (e.contains("momentum")) l.bn_momentum = e.at("momentum").get<double>();
    if (e.contains("epsilon")) l.bn_epsilon = e.at("epsilon").get<double>();
    if (e.contains("rate")) l.rate = e.at("rate").get<double>();
    spec.layers.push_back(std::move(l));
  }
  spec.validate();
  return spec;
}

void NetworkSpec::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << to_json() << "\n";
}

NetworkSpec NetworkSpec::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return from_json(buf.str());
}

}  // namespace spinelab::nets
