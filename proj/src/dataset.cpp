#include "spinelab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spinelab/error.hpp"
#include "spinelab/rng.hpp"

namespace spinelab::dataset {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Per-label appearance grading, t in [0,1] from C1 to L5.
double label_t(int vertebra_index) {
  return static_cast<double>(vertebra_index - 1) /
         static_cast<double>(kNumVertebrae - 1);
}

double inplane_radius(const PhantomConfig& cfg, int vertebra_index) {
  const double t = label_t(vertebra_index);
  return cfg.vertebra_radius_mm *
         (kInplaneRadiusScaleAtC1 + (1.0 - kInplaneRadiusScaleAtC1) * t);
}

double vertebra_intensity(const PhantomConfig& cfg, int vertebra_index) {
  const double t = label_t(vertebra_index);
  return cfg.intensity_fg * (1.0 + (kIntensityScaleAtL5 - 1.0) * t);
}

void render_ellipsoid(Volume3D& vol, const std::array<double, 3>& center_mm,
                      const std::array<double, 3>& semi_axes_mm,
                      double intensity) {
  const auto& shape = vol.data.shape();
  std::array<int64_t, 3> lo{}, hi{};
  for (size_t a = 0; a < 3; ++a) {
    lo[a] = std::max<int64_t>(
        0, static_cast<int64_t>(
               std::floor((center_mm[a] - semi_axes_mm[a]) / vol.spacing[a])));
    hi[a] = std::min<int64_t>(
        shape[a] - 1,
        static_cast<int64_t>(
            std::ceil((center_mm[a] + semi_axes_mm[a]) / vol.spacing[a])));
  }
  for (int64_t z = lo[0]; z <= hi[0]; ++z) {
    const double dz = (static_cast<double>(z) * vol.spacing[0] - center_mm[0]) /
                      semi_axes_mm[0];
    for (int64_t x = lo[1]; x <= hi[1]; ++x) {
      const double dx =
          (static_cast<double>(x) * vol.spacing[1] - center_mm[1]) /
          semi_axes_mm[1];
      for (int64_t y = lo[2]; y <= hi[2]; ++y) {
        const double dy =
            (static_cast<double>(y) * vol.spacing[2] - center_mm[2]) /
            semi_axes_mm[2];
        if (dz * dz + dx * dx + dy * dy <= 1.0) {
          double& v = vol.data.at(z, x, y);
          v = std::max(v, intensity);
        }
      }
    }
  }
}

}  // namespace

void PhantomConfig::validate() const {
  for (int64_t d : shape) {
    if (d < 4) throw ConfigError("phantom grid too small");
  }
  for (double s : spacing) {
    if (!(s > 0.0)) throw ConfigError("phantom spacing must be positive");
  }
  if (num_vertebrae < 3 || num_vertebrae > kNumVertebrae)
    throw ConfigError("num_vertebrae must lie in [3, 24]");
  if (start_label.is_background())
    throw ConfigError("start_label must be a vertebra");
  if (start_label.index() + num_vertebrae - 1 > kNumVertebrae)
    throw ConfigError("label run " + start_label.name() + "+" +
                      std::to_string(num_vertebrae) + " exceeds L5");
  if (!(vertebra_radius_mm > 0.0) || !(inter_vertebra_gap_mm > 0.0))
    throw ConfigError("radii and gaps must be positive");
  if (curvature_amplitude_mm < 0.0)
    throw ConfigError("curvature amplitude must be non-negative");
  if (!(intensity_fg > intensity_bg + 3.0 * noise_std))
    throw ConfigError("need intensity_fg > intensity_bg + 3*noise_std");
  if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  if (distractor_count < 0) throw ConfigError("distractor_count negative");
}

std::pair<Volume3D, CentroidSet> generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  Volume3D vol;
  vol.data = Tensor<double>(
      std::vector<int64_t>{cfg.shape[0], cfg.shape[1], cfg.shape[2]});
  vol.spacing = cfg.spacing;
  vol.data.fill(cfg.intensity_bg);

  const double size_z = vol.size_mm(0);
  const double size_x = vol.size_mm(1);
  const double size_y = vol.size_mm(2);

  const double pitch = 2.0 * cfg.vertebra_radius_mm + cfg.inter_vertebra_gap_mm;
  const double run_span = static_cast<double>(cfg.num_vertebrae - 1) * pitch;
  const double z_margin = cfg.vertebra_radius_mm + 2.0 * cfg.spacing[0];
  if (run_span + 2.0 * z_margin > size_z)
    throw ConfigError("vertebra run does not fit the grid along z");
  const double z0 = 0.5 * (size_z - run_span);

  // Sinusoidal lateral curvature; phases and cycle counts are seeded so
  // different phantoms curve differently. Zero amplitude gives a straight
  // centerline exactly.
  const double phase_x = rng.uniform(0.0, kTwoPi);
  const double phase_y = rng.uniform(0.0, kTwoPi);
  const double cycles_x = rng.uniform(0.5, 1.5);
  const double cycles_y = rng.uniform(0.5, 1.5);

  const int last_index = cfg.start_label.index() + cfg.num_vertebrae - 1;
  const double widest = inplane_radius(cfg, last_index);
  const double lateral_margin = widest + 2.0 * std::max(cfg.spacing[1], cfg.spacing[2]);
  if (cfg.curvature_amplitude_mm + lateral_margin > 0.5 * std::min(size_x, size_y))
    throw ConfigError("curvature amplitude pushes vertebrae outside the grid");

  auto centerline_x = [&](double z) {
    return 0.5 * size_x +
           cfg.curvature_amplitude_mm *
               std::sin(kTwoPi * cycles_x * z / size_z + phase_x);
  };
  auto centerline_y = [&](double z) {
    return 0.5 * size_y +
           cfg.curvature_amplitude_mm *
               std::sin(kTwoPi * cycles_y * z / size_z + phase_y);
  };

  CentroidSet centroids;
  for (int i = 0; i < cfg.num_vertebrae; ++i) {
    const int gi = cfg.start_label.index() + i;
    const double z = z0 + static_cast<double>(i) * pitch;
    const std::array<double, 3> c{z, centerline_x(z), centerline_y(z)};
    const double r_ip = inplane_radius(cfg, gi);
    render_ellipsoid(vol, c, {cfg.vertebra_radius_mm, r_ip, r_ip},
                     vertebra_intensity(cfg, gi));
    centroids.set(VertebraLabel::from_index(gi), c);
  }

  // Metal-insertion analog: small very bright spheres away from the
  // centerline, exercising false-positive control downstream.
  for (int d = 0; d < cfg.distractor_count; ++d) {
    const double z = rng.uniform(z_margin, size_z - z_margin);
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double offset =
        widest + kDistractorRadiusMm + rng.uniform(2.0, 6.0);
    double x = centerline_x(z) + side * offset;
    double y = centerline_y(z) + rng.uniform(-offset, offset);
    x = std::clamp(x, kDistractorRadiusMm + 1.0, size_x - kDistractorRadiusMm - 1.0);
    y = std::clamp(y, kDistractorRadiusMm + 1.0, size_y - kDistractorRadiusMm - 1.0);
    render_ellipsoid(
        vol, {z, x, y},
        {kDistractorRadiusMm, kDistractorRadiusMm, kDistractorRadiusMm},
        cfg.intensity_fg * kDistractorIntensityScale);
  }

  if (cfg.noise_std > 0.0) {
    for (int64_t i = 0; i < vol.data.numel(); ++i)
      vol.data[i] += rng.normal(0.0, cfg.noise_std);
  }
  return {std::move(vol), std::move(centroids)};
}

void DatasetManifest::add(ScanEntry e) { entries_.push_back(std::move(e)); }

std::vector<ScanEntry> DatasetManifest::split(const std::string& tag) const {
  std::vector<ScanEntry> out;
  for (const auto& e : entries_) {
    if (e.split == tag) out.push_back(e);
  }
  return out;
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "# id volume_path centroid_path split\n";
  for (const auto& e : entries_) {
    os << e.id << " " << e.volume_path << " " << e.centroid_path << " "
       << e.split << "\n";
  }
  if (!os) throw Error("short write: " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path,
                                      bool check_paths) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open: " + path);
  const std::filesystem::path base =
      std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    if (std::filesystem::path(p).is_absolute() || base.empty()) return p;
    return (base / p).string();
  };
  DatasetManifest m;
  std::string line;
  int lineno = 0;
  std::vector<std::string> seen;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    ScanEntry e;
    if (!(ls >> e.id)) continue;
    if (!(ls >> e.volume_path >> e.centroid_path >> e.split))
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected `id volume centroids split`");
    if (e.split != "train" && e.split != "val" && e.split != "test")
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": unknown split '" + e.split + "'");
    if (std::find(seen.begin(), seen.end(), e.id) != seen.end())
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": duplicate scan id '" + e.id + "'");
    seen.push_back(e.id);
    e.volume_path = resolve(e.volume_path);
    e.centroid_path = resolve(e.centroid_path);
    if (check_paths) {
      for (const std::string& p : {e.volume_path, e.centroid_path}) {
        if (!std::filesystem::exists(p))
          throw Error("manifest references missing file: " + p);
      }
    }
    m.add(std::move(e));
  }
  return m;
}

std::vector<std::string> split_tags() { return {"train", "val", "test"}; }

std::vector<std::pair<std::string, std::string>> make_splits(
    const std::vector<std::string>& scan_ids,
    const std::array<double, 3>& fractions, uint64_t seed) {
  if (scan_ids.empty()) throw ConfigError("cannot split an empty scan list");
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");

  const int64_t n = static_cast<int64_t>(scan_ids.size());
  // Largest-remainder apportionment.
  std::array<int64_t, 3> counts{};
  std::array<double, 3> remainders{};
  int64_t assigned = 0;
  for (size_t i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    counts[i] = static_cast<int64_t>(std::floor(exact));
    remainders[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  while (assigned < n) {
    size_t best = 0;
    for (size_t i = 1; i < 3; ++i) {
      if (remainders[i] > remainders[best]) best = i;
    }
    counts[best] += 1;
    remainders[best] = -1.0;
    ++assigned;
  }

  std::vector<std::string> shuffled = scan_ids;
  Rng rng(seed);
  rng.shuffle(shuffled);

  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(shuffled.size());
  const auto tags = split_tags();
  size_t pos = 0;
  for (size_t s = 0; s < 3; ++s) {
    for (int64_t k = 0; k < counts[s]; ++k) {
      out.emplace_back(shuffled[pos++], tags[s]);
    }
  }
  return out;
}

}  // namespace spinelab::dataset
