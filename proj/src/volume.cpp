#include "spinelab/volume.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "spinelab/error.hpp"

namespace spinelab {

View view_from_name(const std::string& name) {
  if (name == "sagittal") return View::kSagittal;
  if (name == "coronal") return View::kCoronal;
  throw FormatError("unknown view: '" + name + "'");
}

Volume3D::Volume3D(Tensor<double> d, std::array<double, 3> s)
    : data(std::move(d)), spacing(s) {
  validate();
}

void Volume3D::validate() const {
  if (data.rank() != 3) throw ShapeError("Volume3D requires a rank-3 grid");
  for (double s : spacing) {
    if (!(s > 0.0)) throw ConfigError("volume spacing must be positive");
  }
  for (int64_t i = 0; i < data.numel(); ++i) {
    if (!std::isfinite(data[i]))
      throw Error("volume contains non-finite intensity");
  }
}

void CentroidSet::set(const VertebraLabel& label, std::array<double, 3> pos_mm,
                      std::optional<double> confidence) {
  if (label.is_background())
    throw ConfigError("background cannot carry a centroid");
  for (double v : pos_mm) {
    if (!std::isfinite(v)) throw Error("non-finite centroid position");
  }
  if (confidence && (*confidence < 0.0 || *confidence > 1.0))
    throw ConfigError("centroid confidence outside [0,1]");
  entries_[label.index()] = Centroid{pos_mm, confidence};
}

bool CentroidSet::has(const VertebraLabel& label) const {
  return entries_.count(label.index()) > 0;
}

const Centroid& CentroidSet::get(const VertebraLabel& label) const {
  auto it = entries_.find(label.index());
  if (it == entries_.end())
    throw RangeError("no centroid for label " + label.name());
  return it->second;
}

std::array<int64_t, 3> mm_to_voxel(const std::array<double, 3>& pos_mm,
                                   const Volume3D& vol, bool clamp) {
  std::array<int64_t, 3> out{};
  for (size_t a = 0; a < 3; ++a) {
    // llround rounds half away from zero, the documented convention.
    int64_t v = std::llround(pos_mm[a] / vol.spacing[a]);
    const int64_t n = vol.extent(a);
    if (v < 0 || v >= n) {
      if (!clamp)
        throw RangeError("mm position maps outside the grid on axis " +
                         std::to_string(a));
      v = std::min<int64_t>(std::max<int64_t>(v, 0), n - 1);
    }
    out[a] = v;
  }
  return out;
}

std::array<double, 3> voxel_to_mm(const std::array<int64_t, 3>& idx,
                                  const Volume3D& vol) {
  return {static_cast<double>(idx[0]) * vol.spacing[0],
          static_cast<double>(idx[1]) * vol.spacing[1],
          static_cast<double>(idx[2]) * vol.spacing[2]};
}

void save_centroids(const std::string& path, const CentroidSet& cs) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "# label z_mm x_mm y_mm [confidence]\n";
  os.precision(17);
  for (const auto& [idx, c] : cs.entries()) {
    os << VertebraLabel::from_index(idx).name() << " " << c.pos_mm[0] << " "
       << c.pos_mm[1] << " " << c.pos_mm[2];
    if (c.confidence) os << " " << *c.confidence;
    os << "\n";
  }
  if (!os) throw Error("short write: " + path);
}

CentroidSet load_centroids(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open: " + path);
  CentroidSet cs;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name)) continue;  // blank line
    double z, x, y;
    if (!(ls >> z >> x >> y))
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected `label z x y [conf]`");
    std::optional<double> conf;
    double c;
    if (ls >> c) conf = c;
    VertebraLabel label = [&] {
      try {
        return VertebraLabel::from_name(name);
      } catch (const FormatError& e) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": " +
                          e.what());
      }
    }();
    cs.set(label, {z, x, y}, conf);
  }
  return cs;
}

void save_volume(const std::string& path, const Volume3D& vol,
                 TensorDType dtype) {
  if (dtype == TensorDType::kFloat64) {
    tensor_write(path, vol.data);
  } else {
    tensor_write(path, vol.data.cast<float>());
  }
  std::ofstream os(path + ".meta");
  if (!os) throw Error("cannot open for writing: " + path + ".meta");
  os.precision(17);
  os << "spacing " << vol.spacing[0] << " " << vol.spacing[1] << " "
     << vol.spacing[2] << "\n";
}

Volume3D load_volume(const std::string& path) {
  Volume3D vol;
  vol.data = tensor_read_as<double>(path);
  std::ifstream is(path + ".meta");
  if (!is) throw Error("missing volume sidecar: " + path + ".meta");
  std::string key;
  while (is >> key) {
    if (key == "spacing") {
      is >> vol.spacing[0] >> vol.spacing[1] >> vol.spacing[2];
    } else {
      std::string rest;
      std::getline(is, rest);
    }
  }
  vol.validate();
  return vol;
}

}  // namespace spinelab
