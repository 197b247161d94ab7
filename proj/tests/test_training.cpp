#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "spinelab/preprocess.hpp"
#include "spinelab/rng.hpp"
#include "spinelab/train/loop.hpp"
#include "spinelab/train/losses.hpp"

using namespace spinelab;
using namespace spinelab::train;
namespace fs = std::filesystem;

TEST_CASE("softmax over channels") {
  Tensor<double> zeros({25, 2, 2});
  const auto u = softmax_channels(zeros);
  for (int64_t i = 0; i < u.numel(); ++i)
    CHECK(u[i] == doctest::Approx(1.0 / 25).epsilon(1e-12));

  Tensor<double> dominant({25, 1, 1});
  dominant.at(7, 0, 0) = 100.0;
  const auto d = softmax_channels(dominant);
  CHECK(d.at(7, 0, 0) == doctest::Approx(1.0).epsilon(1e-9));

  Rng rng(5);
  Tensor<double> t({25, 3, 4});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0, 3);
  const auto s = softmax_channels(t);
  for (int64_t p = 0; p < 12; ++p) {
    double sum = 0.0;
    for (int64_t c = 0; c < 25; ++c) sum += s[c * 12 + p];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("view loss: perfect prediction leaves only the entropy floor") {
  Rng rng(6);
  Tensor<double> gt({25, 4, 4});
  for (int64_t i = 0; i < gt.numel(); ++i) gt[i] = rng.uniform();
  Tensor<double> w = Tensor<double>::full({4, 4}, 1.0);
  const auto terms = btrfly_view_loss(gt, gt, w);
  CHECK(terms.l2 == 0.0);

  // CE(p, p) is the entropy of p, summed over pixels.
  const auto p = softmax_channels(gt);
  double entropy = 0.0;
  for (int64_t px = 0; px < 16; ++px) {
    for (int64_t c = 0; c < 25; ++c) {
      const double v = p[c * 16 + px];
      entropy -= v * std::log(v);
    }
  }
  CHECK(terms.cross_entropy == doctest::Approx(entropy).epsilon(1e-9));
  CHECK(terms.total == terms.l2 + terms.cross_entropy);
}

TEST_CASE("view loss: all-zero stacks give N log 25") {
  Tensor<double> zeros({25, 3, 5});
  Tensor<double> w = Tensor<double>::full({3, 5}, 1.0);
  const auto terms = btrfly_view_loss(zeros, zeros, w);
  CHECK(terms.cross_entropy ==
        doctest::Approx(15.0 * std::log(25.0)).epsilon(1e-12));
}

TEST_CASE("view loss matches a brute-force oracle") {
  Rng rng(7);
  Tensor<double> gt({25, 2, 3}), pred({25, 2, 3});
  for (int64_t i = 0; i < gt.numel(); ++i) gt[i] = rng.uniform();
  for (int64_t i = 0; i < pred.numel(); ++i) pred[i] = rng.normal();
  Tensor<double> w = Tensor<double>::full({2, 3}, 1.0);

  const auto terms = btrfly_view_loss(gt, pred, w);

  double l2 = 0.0;
  for (int64_t i = 0; i < gt.numel(); ++i)
    l2 += (gt[i] - pred[i]) * (gt[i] - pred[i]);
  const auto ps = softmax_channels(gt);
  const auto qs = softmax_channels(pred);
  double ce = 0.0;
  for (int64_t px = 0; px < 6; ++px)
    for (int64_t c = 0; c < 25; ++c)
      ce -= ps[c * 6 + px] * std::log(qs[c * 6 + px]);
  CHECK(terms.l2 == doctest::Approx(l2).epsilon(1e-10));
  CHECK(terms.cross_entropy == doctest::Approx(ce).epsilon(1e-10));
}

TEST_CASE("total loss adds the views symmetrically") {
  ViewLossTerms a, b;
  a.total = 3.25;
  b.total = 1.5;
  CHECK(btrfly_total_loss(a, b) == 4.75);
  CHECK(btrfly_total_loss(b, a) == 4.75);
}

TEST_CASE("perturbing the optimal prediction never lowers the CE term") {
  // Gibbs: CE(p, q) >= H(p) with equality iff q = p.
  Rng rng(8);
  Tensor<double> gt({25, 2, 2});
  for (int64_t i = 0; i < gt.numel(); ++i) gt[i] = rng.uniform();
  Tensor<double> w = Tensor<double>::full({2, 2}, 1.0);
  const double floor_ce = btrfly_view_loss(gt, gt, w).cross_entropy;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> pred = gt;
    for (int64_t i = 0; i < pred.numel(); ++i)
      pred[i] += 0.3 * rng.normal();
    CHECK(btrfly_view_loss(gt, pred, w).cross_entropy >= floor_ce - 1e-12);
  }
}

TEST_CASE("discriminator loss formula and hinge") {
  CHECK(discriminator_loss(0.3, 0.1, 1.0) == doctest::Approx(1.2));
  CHECK(discriminator_loss(0.4, 2.0, 1.0) == doctest::Approx(0.4));
  CHECK(discriminator_loss(0.0, 0.0, 0.5) == doctest::Approx(0.5));
  // L_D >= 0, and equals m when both energies vanish.
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    const double m = 0.1 + rng.uniform();
    CHECK(discriminator_loss(rng.uniform(), rng.uniform(), m) >= 0.0);
    CHECK(discriminator_loss(0.0, 0.0, m) == doctest::Approx(m));
  }
  CHECK_THROWS_AS(discriminator_loss(-0.1, 0.0, 1.0), ConfigError);
}

TEST_CASE("generator loss formula") {
  CHECK(generator_loss(0.2, 1.0, 1.0) == doctest::Approx(1.2));
  CHECK(generator_loss(0.7, 2.5, 0.0) == doctest::Approx(2.5));
}

TEST_CASE("learning-rate schedule decays by 3/4 and clamps") {
  OptimizerConfig cfg;  // defaults: 1e-3, 3/4 every 10k, floor 2e-4
  CHECK(lr_schedule(0, cfg) == doctest::Approx(1e-3));
  CHECK(lr_schedule(9999, cfg) == doctest::Approx(1e-3));
  CHECK(lr_schedule(10000, cfg) == doctest::Approx(7.5e-4));
  CHECK(lr_schedule(20000, cfg) == doctest::Approx(5.625e-4));
  // At 60k the unclamped value 1.7798e-4 falls below the 2e-4 floor.
  CHECK(lr_schedule(60000, cfg) == doctest::Approx(2e-4));
  CHECK(lr_schedule(1000000, cfg) == doctest::Approx(2e-4));

  // Non-increasing and bounded.
  double prev = lr_schedule(0, cfg);
  for (int64_t it = 0; it < 120000; it += 997) {
    const double lr = lr_schedule(it, cfg);
    CHECK(lr <= prev + 1e-18);
    CHECK(lr >= cfg.lr_floor);
    CHECK(lr <= cfg.learning_rate);
    prev = lr;
  }
}

TEST_CASE("optimizer config validation") {
  OptimizerConfig cfg;
  cfg.lr_floor = 2e-3;  // above the learning rate
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = OptimizerConfig{};
  cfg.decay_factor = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  AdversarialConfig adv;
  adv.margin = 0.0;
  CHECK_THROWS_AS(adv.validate(), ConfigError);
}

namespace {

/// In-memory miniature dataset: small MIP-like images with Gaussian
/// ground truth at label-graded brightness.
template <typename T>
LoadedDataset<T> synthetic_dataset(int n_train, int n_val, uint64_t seed,
                                   int64_t hw = 16) {
  LoadedDataset<T> data;
  data.sigma_mm = 3.0;
  Rng rng(seed);
  prep::HeatmapConfig hm;
  hm.sigma_mm = 3.0;

  auto make_scan = [&](const std::string& id) {
    ScanData<T> scan;
    scan.id = id;
    const int label = 1 + static_cast<int>(rng.uniform_int(24));
    const double z = 4.0 + rng.uniform() * (static_cast<double>(hw) - 8.0);
    const double x = 4.0 + rng.uniform() * (static_cast<double>(hw) - 8.0);
    const double y = 4.0 + rng.uniform() * (static_cast<double>(hw) - 8.0);
    scan.gt_centroids.set(VertebraLabel::from_index(label), {z, x, y});

    for (bool sagittal : {true, false}) {
      ViewData<T>& view = sagittal ? scan.sag : scan.cor;
      view.spacing = {1.0, 1.0};
      Tensor<double> img({hw, hw});
      const double k = sagittal ? x : y;
      const double bright = 0.8 + 0.05 * label;
      for (int64_t r = 0; r < hw; ++r)
        for (int64_t c = 0; c < hw; ++c) {
          const double d2 = (r - z) * (r - z) + (c - k) * (c - k);
          img.at(r, c) = bright * std::exp(-d2 / 8.0) + 0.02 * rng.normal();
        }
      view.full_mip = img.template cast<T>();
      view.train_mips = {view.full_mip};
      const auto c2d = prep::project_centroids(scan.gt_centroids,
                                               sagittal ? View::kSagittal
                                                        : View::kCoronal);
      const auto gt = prep::encode_heatmap(c2d, hw, hw, {1, 1}, hm,
                                           sagittal ? View::kSagittal
                                                    : View::kCoronal);
      view.gt = gt.data.template cast<T>();
      view.weight_map = Tensor<T>::full({hw, hw}, static_cast<T>(1));
    }
    return scan;
  };

  for (int i = 0; i < n_train; ++i)
    data.train.push_back(make_scan("t" + std::to_string(i)));
  for (int i = 0; i < n_val; ++i)
    data.val.push_back(make_scan("v" + std::to_string(i)));
  return data;
}

nets::BtrflyConfig tiny_btrfly() {
  nets::BtrflyConfig cfg;
  cfg.arm_levels = 2;
  cfg.base_width = 4;
  cfg.fused_convs = 1;
  return cfg;
}

nets::SingleViewConfig tiny_singleview() {
  nets::SingleViewConfig cfg;
  cfg.arm_levels = 2;
  cfg.base_width = 4;
  cfg.trunk_convs = 1;
  return cfg;
}

TrainConfig quick_config(int64_t iterations, uint64_t seed) {
  TrainConfig cfg;
  cfg.opt.max_iterations = iterations;
  cfg.opt.batch_size = 2;
  cfg.opt.seed = seed;
  cfg.init_seed = seed + 1;
  cfg.val_interval = 0;
  cfg.log_interval = 1000000;
  return cfg;
}

template <typename T>
bool params_equal(const nets::NetworkParams<T>& a,
                  const nets::NetworkParams<T>& b) {
  if (a.total_count() != b.total_count()) return false;
  for (const auto& [layer, arrays] : a.store()) {
    for (const auto& [name, t] : arrays) {
      const Tensor<T>& u = b.at(layer, name);
      if (!u.same_shape(t)) return false;
      if (std::memcmp(u.data(), t.data(),
                      sizeof(T) * static_cast<size_t>(t.numel())) != 0)
        return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("training loss decreases on a small dataset in most trials") {
  int ok = 0;
  for (uint64_t trial = 0; trial < 10; ++trial) {
    const auto data = synthetic_dataset<double>(2, 0, 100 + trial);
    std::vector<IterationRecord> history;
    train_plain<double>(data, PlainKind::kBtrfly, tiny_btrfly(),
                        tiny_singleview(), quick_config(50, trial), &history);
    REQUIRE(history.size() == 50);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 10; ++i) {
      first += history[static_cast<size_t>(i)].task_loss / 10.0;
      last += history[history.size() - 10 + static_cast<size_t>(i)].task_loss /
              10.0;
    }
    if (last < first) ++ok;
  }
  CHECK(ok >= 8);
}

TEST_CASE("training is deterministic given the seed") {
  const auto data = synthetic_dataset<double>(2, 0, 55);
  auto s1 = train_plain<double>(data, PlainKind::kBtrfly, tiny_btrfly(),
                                tiny_singleview(), quick_config(20, 4));
  auto s2 = train_plain<double>(data, PlainKind::kBtrfly, tiny_btrfly(),
                                tiny_singleview(), quick_config(20, 4));
  CHECK(params_equal(s1.params.at("btrfly"), s2.params.at("btrfly")));
}

TEST_CASE("single-view pair keeps the views in separate networks") {
  const auto data = synthetic_dataset<double>(2, 0, 56);
  auto state =
      train_plain<double>(data, PlainKind::kSingleViewPair, tiny_btrfly(),
                          tiny_singleview(), quick_config(10, 5));
  REQUIRE(state.params.count("sag") == 1);
  REQUIRE(state.params.count("cor") == 1);
  CHECK(state.params.count("btrfly") == 0);
  // The two nets share a topology but not parameters.
  CHECK_FALSE(params_equal(state.params.at("sag"), state.params.at("cor")));
  for (const auto& l : state.specs.at("sag").layers) {
    for (const auto& src : l.inputs) CHECK(src.find("cor") == std::string::npos);
  }
}

TEST_CASE("checkpoint restore continues the trajectory bit-exactly") {
  const fs::path dir = fs::temp_directory_path() / "spinelab_ckpt_test";
  fs::remove_all(dir);
  const auto data = synthetic_dataset<double>(2, 1, 57);

  // Straight run to 14 iterations.
  auto full = train_plain<double>(data, PlainKind::kBtrfly, tiny_btrfly(),
                                  tiny_singleview(), quick_config(14, 6));

  // Run to 7, checkpoint, restore, continue to 14.
  auto half = train_plain<double>(data, PlainKind::kBtrfly, tiny_btrfly(),
                                  tiny_singleview(), quick_config(7, 6));
  half.save(dir.string());
  auto restored = TrainState<double>::load(dir.string());
  CHECK(restored.iteration == 7);
  auto resumed =
      train_plain<double>(data, PlainKind::kBtrfly, tiny_btrfly(),
                          tiny_singleview(), quick_config(14, 6), nullptr,
                          &restored);
  CHECK(params_equal(full.params.at("btrfly"), resumed.params.at("btrfly")));
}

TEST_CASE("adversarial run with zero weight reproduces plain training") {
  const auto data = synthetic_dataset<double>(2, 0, 58);
  nets::DiscriminatorConfig dcfg;
  dcfg.enc_width0 = 2;
  dcfg.enc_width1 = 2;
  dcfg.bottleneck_width = 2;
  AdversarialConfig adv;
  adv.adversarial_weight = 0.0;

  auto plain = train_plain<double>(data, PlainKind::kBtrfly, tiny_btrfly(),
                                   tiny_singleview(), quick_config(6, 7));
  auto pe = train_adversarial<double>(data, tiny_btrfly(), dcfg,
                                      quick_config(6, 7), adv);
  CHECK(params_equal(plain.params.at("btrfly"), pe.params.at("btrfly")));
  // The discriminators trained on their own objective meanwhile.
  CHECK(pe.params.count("disc_sag") == 1);
  CHECK(pe.params.count("disc_cor") == 1);
}

TEST_CASE("adversarial training separates real and generated energies") {
  const auto data = synthetic_dataset<double>(3, 0, 59);
  nets::DiscriminatorConfig dcfg;
  dcfg.enc_width0 = 2;
  dcfg.enc_width1 = 3;
  dcfg.bottleneck_width = 3;
  AdversarialConfig adv;
  std::vector<IterationRecord> history;
  train_adversarial<double>(data, tiny_btrfly(), dcfg, quick_config(150, 8),
                            adv, &history);
  REQUIRE(history.size() == 150);
  double e_real = 0.0, e_gen = 0.0;
  for (size_t i = history.size() - 10; i < history.size(); ++i) {
    e_real += history[i].e_real_sag + history[i].e_real_cor;
    e_gen += history[i].e_gen_sag + history[i].e_gen_cor;
  }
  // The margin objective drives real energies below generated ones.
  CHECK(e_real < e_gen);
}

TEST_CASE("divergent training aborts with a diagnostic error") {
  const auto data = synthetic_dataset<float>(2, 0, 60);
  TrainConfig cfg = quick_config(60, 9);
  // A step this large overflows float32 parameters outright; the loop must
  // notice the non-finite loss and abort with a diagnostic.
  cfg.opt.learning_rate = 1e39;
  cfg.opt.lr_floor = 1e38;
  CHECK_THROWS_AS(train_plain<float>(data, PlainKind::kBtrfly, tiny_btrfly(),
                                     tiny_singleview(), cfg),
                  Error);
}

TEST_CASE("threshold selection maximizes F1 with ties toward smaller T") {
  // Craft predictions whose F1 is uniquely best at T = 0.2: a correct peak
  // at 0.9 in the right channel plus a spurious 0.15 peak elsewhere.
  eval::ScanPrediction sp;
  sp.scan_id = "s";
  for (auto* stack : {&sp.sag, &sp.cor}) {
    stack->view = stack == &sp.sag ? View::kSagittal : View::kCoronal;
    stack->spacing = {1, 1};
    stack->data = Tensor<double>({25, 16, 16});
  }
  sp.sag.data.at(10, 8, 8) = 0.9;
  sp.cor.data.at(10, 8, 8) = 0.9;
  // Spurious response that survives until the threshold reaches 0.2.
  sp.sag.data.at(11, 2, 2) = 0.55;
  sp.cor.data.at(11, 2, 2) = 0.18;
  sp.gt.set(VertebraLabel::from_index(10), {8, 8, 8});

  std::vector<eval::PrPoint> curve;
  const double t = select_threshold({sp}, eval::default_threshold_grid(),
                                    &curve);
  CHECK(t == doctest::Approx(0.2));
  REQUIRE(curve.size() == 17);

  // Perfect predictions: every T below the peak ties, the smallest wins.
  eval::ScanPrediction clean = sp;
  clean.sag.data.at(11, 2, 2) = 0.0;
  clean.cor.data.at(11, 2, 2) = 0.0;
  clean.sag.data.at(11, 2, 2) = 0.0;
  CHECK(select_threshold({clean}, eval::default_threshold_grid()) ==
        doctest::Approx(0.0));

  // All-noise predictions remain reproducible.
  Rng rng(61);
  eval::ScanPrediction noise = sp;
  for (int64_t i = 0; i < noise.sag.data.numel(); ++i) {
    noise.sag.data[i] = rng.uniform() * 0.5;
    noise.cor.data[i] = rng.uniform() * 0.5;
  }
  const double t1 = select_threshold({noise}, eval::default_threshold_grid());
  const double t2 = select_threshold({noise}, eval::default_threshold_grid());
  CHECK(t1 == t2);
}

TEST_CASE("adam minimizes a quadratic") {
  nets::NetworkParams<double> params;
  params.emplace("p", "w", Tensor<double>::full({4}, 5.0));
  Adam<double> adam(0.9, 0.999, 1e-8);
  for (int i = 0; i < 800; ++i) {
    nets::NetworkParams<double> grads;
    Tensor<double> g({4});
    for (int64_t j = 0; j < 4; ++j) g[j] = 2.0 * params.at("p", "w")[j];
    grads.emplace("p", "w", std::move(g));
    adam.step(params, grads, 0.05);
  }
  for (int64_t j = 0; j < 4; ++j)
    CHECK(std::abs(params.at("p", "w")[j]) < 1e-2);
  CHECK(adam.steps_taken() == 800);
}
