#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "spinelab/preprocess.hpp"
#include "spinelab/rng.hpp"

using namespace spinelab;
using namespace spinelab::prep;
namespace fs = std::filesystem;

namespace {

Volume3D random_volume(std::array<int64_t, 3> shape,
                       std::array<double, 3> spacing, uint64_t seed) {
  Volume3D vol;
  vol.data = Tensor<double>({shape[0], shape[1], shape[2]});
  vol.spacing = spacing;
  Rng rng(seed);
  for (int64_t i = 0; i < vol.data.numel(); ++i) vol.data[i] = rng.uniform();
  return vol;
}

}  // namespace

TEST_CASE("resample at the native spacing is the identity") {
  const Volume3D vol = random_volume({5, 6, 7}, {1, 1, 1}, 1);
  const Volume3D out = resample_isotropic(vol, 1.0);
  REQUIRE(out.data.shape() == vol.data.shape());
  CHECK(std::memcmp(out.data.data(), vol.data.data(),
                    sizeof(double) * static_cast<size_t>(vol.data.numel())) ==
        0);
}

TEST_CASE("resample doubles extents when halving the spacing") {
  const Volume3D vol = random_volume({10, 10, 10}, {2, 2, 2}, 2);
  const Volume3D out = resample_isotropic(vol, 1.0);
  CHECK(out.data.shape() == std::vector<int64_t>{20, 20, 20});
  CHECK(out.spacing == std::array<double, 3>{1.0, 1.0, 1.0});
}

TEST_CASE("resample preserves constants") {
  Volume3D vol;
  vol.data = Tensor<double>::full({6, 5, 4}, 3.25);
  vol.spacing = {1.7, 0.9, 1.3};
  const Volume3D out = resample_isotropic(vol, 1.0);
  for (int64_t i = 0; i < out.data.numel(); ++i)
    CHECK(out.data[i] == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("resample rejects degenerate volumes") {
  const Volume3D vol = random_volume({5, 6, 7}, {1, 1, 1}, 3);
  CHECK_THROWS_AS(resample_isotropic(vol, 0.0), ConfigError);
  CHECK_THROWS_AS(resample_isotropic(vol, 10.0), ConfigError);  // < 2 voxels
}

TEST_CASE("mip of zeros is zero; single voxel projects to both views") {
  Volume3D vol;
  vol.data = Tensor<double>({8, 6, 5});
  vol.spacing = {1, 1, 1};
  ProjectionImage sag = mip(vol, View::kSagittal);
  for (int64_t i = 0; i < sag.data.numel(); ++i) CHECK(sag.data[i] == 0.0);

  vol.data.at(3, 2, 4) = 9.0;
  sag = mip(vol, View::kSagittal);
  const ProjectionImage cor = mip(vol, View::kCoronal);
  CHECK(sag.data.shape() == std::vector<int64_t>{8, 6});
  CHECK(cor.data.shape() == std::vector<int64_t>{8, 5});
  CHECK(sag.data.at(3, 2) == 9.0);
  CHECK(cor.data.at(3, 4) == 9.0);
  // Everything else is zero.
  CHECK(sag.data.at(3, 3) == 0.0);
  CHECK(cor.data.at(2, 4) == 0.0);
}

TEST_CASE("mip equals the brute-force loop oracle") {
  const Volume3D vol = random_volume({4, 4, 4}, {1, 1, 1}, 11);
  const ProjectionImage sag = mip(vol, View::kSagittal);
  const ProjectionImage cor = mip(vol, View::kCoronal);
  for (int64_t z = 0; z < 4; ++z) {
    for (int64_t x = 0; x < 4; ++x) {
      double m = -1e300;
      for (int64_t y = 0; y < 4; ++y) m = std::max(m, vol.data.at(z, x, y));
      CHECK(sag.data.at(z, x) == m);
    }
    for (int64_t y = 0; y < 4; ++y) {
      double m = -1e300;
      for (int64_t x = 0; x < 4; ++x) m = std::max(m, vol.data.at(z, x, y));
      CHECK(cor.data.at(z, y) == m);
    }
  }
}

TEST_CASE("half-slice mip: deterministic, bounded by the full mip") {
  const Volume3D vol = random_volume({6, 5, 8}, {1, 1, 1}, 21);
  const ProjectionImage a = random_half_slice_mip(vol, View::kSagittal, 5);
  const ProjectionImage b = random_half_slice_mip(vol, View::kSagittal, 5);
  CHECK(std::memcmp(a.data.data(), b.data.data(),
                    sizeof(double) * static_cast<size_t>(a.data.numel())) == 0);

  const ProjectionImage full = mip(vol, View::kSagittal);
  const ProjectionImage c = random_half_slice_mip(vol, View::kSagittal, 99);
  bool any_less = false;
  for (int64_t i = 0; i < full.data.numel(); ++i) {
    CHECK(c.data[i] <= full.data[i]);
    if (c.data[i] < full.data[i]) any_less = true;
  }
  CHECK(any_less);  // half the slices of random data should lose some maxima
}

TEST_CASE("half-slice mip with two slices picks exactly one") {
  Volume3D vol;
  vol.data = Tensor<double>({3, 4, 2});
  vol.spacing = {1, 1, 1};
  Rng rng(4);
  for (int64_t i = 0; i < vol.data.numel(); ++i) vol.data[i] = rng.uniform();
  const ProjectionImage half = random_half_slice_mip(vol, View::kSagittal, 8);
  bool matches_slice0 = true, matches_slice1 = true;
  for (int64_t z = 0; z < 3; ++z) {
    for (int64_t x = 0; x < 4; ++x) {
      if (half.data.at(z, x) != vol.data.at(z, x, 0)) matches_slice0 = false;
      if (half.data.at(z, x) != vol.data.at(z, x, 1)) matches_slice1 = false;
    }
  }
  CHECK((matches_slice0 || matches_slice1));
}

TEST_CASE("half-slice mip requires at least two slices") {
  Volume3D vol;
  vol.data = Tensor<double>({3, 4, 1});
  vol.spacing = {1, 1, 1};
  CHECK_THROWS_AS(random_half_slice_mip(vol, View::kSagittal, 0), ConfigError);
}

TEST_CASE("project_centroids keeps the view axes") {
  CentroidSet cs;
  cs.set(VertebraLabel::from_name("L1"), {10, 20, 30});
  const auto sag = project_centroids(cs, View::kSagittal);
  const auto cor = project_centroids(cs, View::kCoronal);
  CHECK(sag.at(20) == std::array<double, 2>{10, 20});
  CHECK(cor.at(20) == std::array<double, 2>{10, 30});
  CHECK(project_centroids(CentroidSet{}, View::kSagittal).empty());
}

TEST_CASE("heatmap encoding: peak, sigma falloff, background identity") {
  HeatmapConfig cfg;
  cfg.sigma_mm = 6.0;
  std::map<int, std::array<double, 2>> c2d;
  c2d[20] = {16.0, 16.0};  // L1 at a pixel centre
  const HeatmapStack stack = encode_heatmap(c2d, 32, 32, {1, 1}, cfg,
                                            View::kSagittal);
  CHECK(stack.data.at(20, 16, 16) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(stack.data.at(20, 22, 16) ==
        doctest::Approx(std::exp(-0.5)).epsilon(1e-9));  // one sigma away
  CHECK(stack.data.at(0, 22, 16) ==
        doctest::Approx(1.0 - std::exp(-0.5)).epsilon(1e-9));

  // y0 = 1 - max_i y_i holds exactly at every pixel; values stay in [0,1].
  for (int64_t r = 0; r < 32; ++r) {
    for (int64_t c = 0; c < 32; ++c) {
      double m = 0.0;
      for (int ch = 1; ch < kNumChannels; ++ch)
        m = std::max(m, stack.data.at(ch, r, c));
      CHECK(stack.data.at(0, r, c) == 1.0 - m);
      for (int ch = 0; ch < kNumChannels; ++ch) {
        CHECK(stack.data.at(ch, r, c) >= 0.0);
        CHECK(stack.data.at(ch, r, c) <= 1.0);
      }
    }
  }
}

TEST_CASE("heatmap truncation zeroes the far field") {
  HeatmapConfig cfg;
  cfg.sigma_mm = 2.0;
  cfg.truncation_sigmas = 4.0;
  std::map<int, std::array<double, 2>> c2d;
  c2d[1] = {0.0, 0.0};
  const HeatmapStack stack =
      encode_heatmap(c2d, 20, 20, {1, 1}, cfg, View::kSagittal);
  CHECK(stack.data.at(1, 0, 8) > 0.0);   // exactly at 4 sigma
  CHECK(stack.data.at(1, 0, 9) == 0.0);  // beyond
  CHECK(stack.data.at(1, 12, 12) == 0.0);
}

TEST_CASE("out-of-frame centroid still renders its tail") {
  HeatmapConfig cfg;
  cfg.sigma_mm = 4.0;
  std::map<int, std::array<double, 2>> c2d;
  c2d[2] = {-2.0, 5.0};  // above the frame
  const HeatmapStack stack =
      encode_heatmap(c2d, 10, 10, {1, 1}, cfg, View::kCoronal);
  CHECK(stack.data.at(2, 0, 5) ==
        doctest::Approx(std::exp(-4.0 / 32.0)).epsilon(1e-9));
}

TEST_CASE("mip of an isotropic 3d gaussian equals the projected 2d gaussian") {
  // Licenses rendering ground truth directly in 2D.
  Rng rng(33);
  for (int trial = 0; trial < 5; ++trial) {
    const double sigma = 2.0 + 4.0 * rng.uniform();
    const int64_t n = 16;
    const std::array<double, 3> mu{
        static_cast<double>(2 + rng.uniform_int(n - 4)),
        static_cast<double>(2 + rng.uniform_int(n - 4)),
        static_cast<double>(2 + rng.uniform_int(n - 4))};
    Volume3D vol;
    vol.data = Tensor<double>({n, n, n});
    vol.spacing = {1, 1, 1};
    for (int64_t z = 0; z < n; ++z)
      for (int64_t x = 0; x < n; ++x)
        for (int64_t y = 0; y < n; ++y) {
          const double d2 = (z - mu[0]) * (z - mu[0]) +
                            (x - mu[1]) * (x - mu[1]) +
                            (y - mu[2]) * (y - mu[2]);
          vol.data.at(z, x, y) = std::exp(-d2 / (2 * sigma * sigma));
        }
    const ProjectionImage proj = mip(vol, View::kSagittal);
    double max_err = 0.0;
    for (int64_t z = 0; z < n; ++z)
      for (int64_t x = 0; x < n; ++x) {
        const double d2 =
            (z - mu[0]) * (z - mu[0]) + (x - mu[1]) * (x - mu[1]);
        const double expect = std::exp(-d2 / (2 * sigma * sigma));
        max_err = std::max(max_err, std::abs(proj.data.at(z, x) - expect));
      }
    CHECK(max_err < 1e-6);
  }
}

namespace {

/// Stack whose argmax class is painted per pixel (one-hot).
HeatmapStack painted_stack(const std::vector<std::vector<int>>& classes) {
  HeatmapStack s;
  s.view = View::kSagittal;
  const int64_t h = static_cast<int64_t>(classes.size());
  const int64_t w = static_cast<int64_t>(classes[0].size());
  s.data = Tensor<double>({kNumChannels, h, w});
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      s.data.at(classes[static_cast<size_t>(r)][static_cast<size_t>(c)], r,
                c) = 1.0;
  return s;
}

}  // namespace

TEST_CASE("median frequency weights: symmetry and the 3x ratio example") {
  // Two images, 10 pixels each: 6 background, 3 of class A (=1), 1 of B (=2)
  // gives frequencies (0.6, 0.3, 0.1) and weight ratio w_B / w_A = 3.
  const std::vector<std::vector<int>> img{{0, 0, 0, 0, 0, 0, 1, 1, 1, 2}};
  const std::vector<HeatmapStack> stacks{painted_stack(img),
                                         painted_stack(img)};
  const WeightTable t = median_frequency_weights(stacks);
  CHECK(t.weights[2] / t.weights[1] == doctest::Approx(3.0).epsilon(1e-12));
  // Median of {0.6, 0.3, 0.1} is 0.3, so class A carries weight 1.
  CHECK(t.weights[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.weights[0] == doctest::Approx(0.5).epsilon(1e-12));
  // Absent classes default to 1.
  CHECK(t.weights[7] == 1.0);

  // Equal pixel counts and coverage give equal weights.
  const std::vector<std::vector<int>> sym{{0, 0, 1, 1, 2, 2}};
  const WeightTable ts = median_frequency_weights({painted_stack(sym)});
  CHECK(ts.weights[1] == doctest::Approx(ts.weights[2]).epsilon(1e-12));
}

TEST_CASE("median frequency weights: single class and degenerate cases") {
  const std::vector<std::vector<int>> only_a{{1, 1, 1}};
  const WeightTable t = median_frequency_weights({painted_stack(only_a)});
  CHECK(t.weights[1] == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<std::vector<int>> only_bg{{0, 0, 0}};
  CHECK_THROWS_AS(median_frequency_weights({painted_stack(only_bg)}),
                  ConfigError);
  CHECK_THROWS_AS(median_frequency_weights({}), ConfigError);
}

TEST_CASE("frequency denominator counts only covering images") {
  // Each class's frequency divides by the pixels of the images that
  // contain it, not by the whole dataset.
  const std::vector<std::vector<int>> img1{{0, 0, 2, 2}};
  const std::vector<std::vector<int>> img2{{0, 0, 0, 1}};
  const WeightTable t =
      median_frequency_weights({painted_stack(img1), painted_stack(img2)});
  // f_bg = 5/8, f_A = 1/4, f_B = 2/4; median = 0.5. Dividing A by all 8
  // pixels instead would give weight 4.
  CHECK(t.weights[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(t.weights[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(t.weights[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("weight map assigns the argmax class weight per pixel") {
  const std::vector<std::vector<int>> img{{0, 1}, {2, 0}};
  const HeatmapStack s = painted_stack(img);
  WeightTable t;
  t.weights[0] = 0.5;
  t.weights[1] = 2.0;
  t.weights[2] = 3.0;
  const Tensor<double> m = weight_map(s, t);
  CHECK(m.at(0, 0) == 0.5);
  CHECK(m.at(0, 1) == 2.0);
  CHECK(m.at(1, 0) == 3.0);
  CHECK(m.at(1, 1) == 0.5);
}

TEST_CASE("background wins argmax ties") {
  HeatmapStack s;
  s.data = Tensor<double>({kNumChannels, 1, 1});
  s.data.at(0, 0, 0) = 0.5;
  s.data.at(5, 0, 0) = 0.5;
  CHECK(argmax_class(s, 0, 0) == 0);
}

TEST_CASE("projection and heatmap disk round trips") {
  const fs::path dir = fs::temp_directory_path() / "spinelab_prep_io";
  fs::remove_all(dir);
  fs::create_directories(dir);

  ProjectionImage img;
  img.view = View::kCoronal;
  img.spacing = {1.5, 0.75};
  img.data = Tensor<double>({6, 4});
  Rng rng(2);
  for (int64_t i = 0; i < img.data.numel(); ++i) img.data[i] = rng.uniform();
  const std::string ppath = (dir / "p.tns").string();
  save_projection(ppath, img, TensorDType::kFloat64);
  const ProjectionImage pback = load_projection(ppath);
  CHECK(pback.view == View::kCoronal);
  CHECK(pback.spacing == img.spacing);
  CHECK(std::memcmp(pback.data.data(), img.data.data(),
                    sizeof(double) * static_cast<size_t>(img.data.numel())) ==
        0);

  HeatmapConfig cfg;
  std::map<int, std::array<double, 2>> c2d;
  c2d[3] = {3.0, 2.0};
  const HeatmapStack stack = encode_heatmap(c2d, 8, 8, {1, 1}, cfg,
                                            View::kSagittal);
  const std::string hpath = (dir / "h.tns").string();
  save_heatmap(hpath, stack, TensorDType::kFloat64);
  const HeatmapStack hback = load_heatmap(hpath);
  CHECK(hback.view == View::kSagittal);
  CHECK(hback.sigma_mm == stack.sigma_mm);
  CHECK(std::memcmp(hback.data.data(), stack.data.data(),
                    sizeof(double) *
                        static_cast<size_t>(stack.data.numel())) == 0);

  WeightTable wt_sag, wt_cor;
  wt_sag.weights[3] = 2.5;
  wt_cor.weights[9] = 0.25;
  const std::string wpath = (dir / "w.txt").string();
  save_weight_tables(wpath, wt_sag, wt_cor);
  const auto [ws, wc] = load_weight_tables(wpath);
  CHECK(ws.weights[3] == 2.5);
  CHECK(wc.weights[9] == 0.25);
  CHECK(ws.weights[9] == 1.0);
}
