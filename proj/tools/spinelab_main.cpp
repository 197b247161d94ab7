// spinelab — vertebrae labelling pipeline on synthetic spine phantoms.
//
// Subcommands: phantom | preprocess | train | infer | eval | pr-curve.
// Every subcommand is deterministic given its flags, inputs and seed;
// SPINELAB_SEED serves as a global seed fallback.

#include <array>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "spinelab/config.hpp"
#include "spinelab/dataset.hpp"
#include "spinelab/error.hpp"
#include "spinelab/eval.hpp"
#include "spinelab/infer.hpp"
#include "spinelab/prep_dataset.hpp"
#include "spinelab/preprocess.hpp"
#include "spinelab/rng.hpp"
#include "spinelab/train/loop.hpp"

namespace fs = std::filesystem;
using namespace spinelab;

namespace {

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t resolve_seed(const std::optional<uint64_t>& flag,
                      const KeyValueConfig& cfg, const std::string& key) {
  if (flag) return *flag;
  if (cfg.has(key)) return cfg.get_u64(key, 0);
  if (const char* env = std::getenv("SPINELAB_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return 0;
}

std::array<int64_t, 3> parse_shape(const std::string& s) {
  std::array<int64_t, 3> shape{};
  char sep1, sep2;
  std::istringstream is(s);
  if (!(is >> shape[0] >> sep1 >> shape[1] >> sep2 >> shape[2]) ||
      (sep1 != 'x' && sep1 != ',') || (sep2 != 'x' && sep2 != ','))
    throw ConfigError("cannot parse shape '" + s + "' (expected HxWxD)");
  return shape;
}

std::array<double, 3> parse_fractions(const std::string& s) {
  std::array<double, 3> f{};
  char c1, c2;
  std::istringstream is(s);
  if (!(is >> f[0] >> c1 >> f[1] >> c2 >> f[2]))
    throw ConfigError("cannot parse fractions '" + s + "'");
  return f;
}

TensorDType dtype_for_precision(int precision) {
  if (precision == 32) return TensorDType::kFloat32;
  if (precision == 64) return TensorDType::kFloat64;
  throw ConfigError("precision must be 32 or 64");
}

void require_empty_or_force(const std::string& out, bool force) {
  if (fs::exists(out) && !fs::is_empty(out) && !force)
    throw Error("output directory '" + out +
                "' is not empty; pass --force to overwrite");
  fs::create_directories(out);
}

/// Runs fn(i) for i in [0, n) on `jobs` threads; failures are collected
/// per index and reported after joining.
void parallel_for(int64_t n, int jobs, const std::function<void(int64_t)>& fn,
                  std::vector<std::string>* failures) {
  jobs = std::max(1, jobs);
  std::vector<std::string> errors(static_cast<size_t>(n));
  std::atomic<int64_t> next{0};
  auto worker = [&] {
    while (true) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (const std::exception& e) {
        errors[static_cast<size_t>(i)] = e.what();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (int64_t i = 0; i < n; ++i) {
    if (!errors[static_cast<size_t>(i)].empty())
      failures->push_back(errors[static_cast<size_t>(i)]);
  }
}

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
  int64_t num_scans = 0;
  std::optional<uint64_t> seed;
  std::string out;
  bool force = false;
  std::string shape = "96x64x64";
  std::string fractions = "0.8,0.1,0.1";
  int precision = 32;
  std::string config_path;
};

int cmd_phantom(const PhantomArgs& a) {
  KeyValueConfig cfg;
  if (!a.config_path.empty()) cfg = KeyValueConfig::parse_file(a.config_path);
  const uint64_t seed = resolve_seed(a.seed, cfg, "phantom.seed");
  require_empty_or_force(a.out, a.force);

  const auto shape = parse_shape(cfg.get_string("phantom.shape", a.shape));
  const double spacing = cfg.get_double("phantom.spacing_mm", 1.0);
  const int min_v = static_cast<int>(cfg.get_int("phantom.min_vertebrae", 3));
  const int max_v = static_cast<int>(cfg.get_int("phantom.max_vertebrae", 5));
  if (min_v > max_v || min_v < 3)
    throw ConfigError("bad vertebra count range");
  const double radius = cfg.get_double("phantom.vertebra_radius_mm", 6.0);
  const double gap = cfg.get_double("phantom.gap_mm", 6.0);
  const double curv_max = cfg.get_double("phantom.curvature_max_mm", 4.0);
  const double noise = cfg.get_double("phantom.noise_std", 0.02);
  const int distractors =
      static_cast<int>(cfg.get_int("phantom.distractors", 1));
  const TensorDType dtype = dtype_for_precision(
      static_cast<int>(cfg.get_int("precision", a.precision)));

  Rng master(seed);
  dataset::DatasetManifest manifest;
  std::vector<std::string> ids;
  std::vector<dataset::PhantomConfig> configs;
  for (int64_t i = 0; i < a.num_scans; ++i) {
    dataset::PhantomConfig pc;
    pc.shape = shape;
    pc.spacing = {spacing, spacing, spacing};
    pc.seed = master.next_u64();
    pc.num_vertebrae =
        min_v + static_cast<int>(master.uniform_int(max_v - min_v + 1));
    pc.start_label = VertebraLabel::from_index(
        1 + static_cast<int>(
                master.uniform_int(kNumVertebrae - pc.num_vertebrae + 1)));
    pc.vertebra_radius_mm = radius;
    pc.inter_vertebra_gap_mm = gap;
    pc.curvature_amplitude_mm = master.uniform(0.0, curv_max);
    pc.noise_std = noise;
    pc.distractor_count =
        distractors > 0 ? static_cast<int>(master.uniform_int(distractors + 1))
                        : 0;
    configs.push_back(pc);
    std::ostringstream id;
    id << "scan_" << std::setw(3) << std::setfill('0') << i;
    ids.push_back(id.str());
  }

  const auto split_pairs = dataset::make_splits(
      ids, parse_fractions(cfg.get_string("splits", a.fractions)),
      mix(seed, 0xA11));
  std::map<std::string, std::string> split_of;
  for (const auto& [id, tag] : split_pairs) split_of[id] = tag;

  std::vector<std::string> failures;
  parallel_for(
      a.num_scans, 1,
      [&](int64_t i) {
        const auto [vol, cents] =
            dataset::generate_phantom(configs[static_cast<size_t>(i)]);
        const std::string base = (fs::path(a.out) / ids[static_cast<size_t>(i)]).string();
        save_volume(base + ".tns", vol, dtype);
        save_centroids(base + ".cent", cents);
      },
      &failures);
  for (const auto& f : failures) std::cerr << "error: " << f << "\n";
  if (!failures.empty()) return 1;

  for (int64_t i = 0; i < a.num_scans; ++i) {
    dataset::ScanEntry e;
    e.id = ids[static_cast<size_t>(i)];
    e.volume_path = e.id + ".tns";
    e.centroid_path = e.id + ".cent";
    e.split = split_of[e.id];
    manifest.add(e);
  }
  manifest.save((fs::path(a.out) / "manifest.txt").string());
  std::cout << "wrote " << a.num_scans << " phantoms to " << a.out << "\n";
  return 0;
}

// ------------------------------------------------------------- preprocess

struct PreprocessArgs {
  std::string manifest;
  std::string out;
  int64_t augment = 10;
  std::optional<uint64_t> seed;
  double sigma = 6.0;
  double truncation = 4.0;
  double target_mm = 1.0;
  int precision = 32;
  int jobs = 1;
  bool force = false;
  std::string config_path;
};

int cmd_preprocess(const PreprocessArgs& a) {
  KeyValueConfig cfg;
  if (!a.config_path.empty()) cfg = KeyValueConfig::parse_file(a.config_path);
  const uint64_t seed = resolve_seed(a.seed, cfg, "preprocess.seed");
  require_empty_or_force(a.out, a.force);

  prep::HeatmapConfig hm_cfg;
  hm_cfg.sigma_mm = cfg.get_double("heatmap.sigma_mm", a.sigma);
  hm_cfg.truncation_sigmas = cfg.get_double("heatmap.truncation", a.truncation);
  hm_cfg.validate();
  const double target = cfg.get_double("preprocess.target_mm", a.target_mm);
  const int64_t augment = cfg.get_int("preprocess.augment", a.augment);
  const TensorDType dtype = dtype_for_precision(
      static_cast<int>(cfg.get_int("precision", a.precision)));

  const auto manifest = dataset::DatasetManifest::load(a.manifest);
  const int64_t n = static_cast<int64_t>(manifest.entries().size());
  if (n == 0) throw Error("manifest lists no scans");

  prep::PreprocessedIndex index;
  index.sigma_mm = hm_cfg.sigma_mm;
  index.resample_mm = target;
  index.weight_table_path = "weight_tables.txt";
  index.scans.resize(static_cast<size_t>(n));

  // Ground-truth stacks of training scans feed the weight tables.
  std::vector<prep::HeatmapStack> train_sag(static_cast<size_t>(n));
  std::vector<prep::HeatmapStack> train_cor(static_cast<size_t>(n));
  std::vector<char> is_train(static_cast<size_t>(n), 0);

  std::vector<std::string> failures;
  parallel_for(
      n, a.jobs,
      [&](int64_t i) {
        const dataset::ScanEntry& entry =
            manifest.entries()[static_cast<size_t>(i)];
        const Volume3D vol = load_volume(entry.volume_path);
        const CentroidSet cents = load_centroids(entry.centroid_path);
        const Volume3D iso = prep::resample_isotropic(vol, target);

        prep::PreprocessedScan ps;
        ps.scan_id = entry.id;
        ps.split = entry.split;
        ps.centroid_path =
            fs::relative(fs::absolute(entry.centroid_path), fs::absolute(a.out))
                .string();

        for (const View view : {View::kSagittal, View::kCoronal}) {
          const bool sagittal = view == View::kSagittal;
          const std::string tag = sagittal ? "sag" : "cor";
          const prep::ProjectionImage full = prep::mip(iso, view);
          const std::string full_name = entry.id + "_" + tag + "_full.tns";
          prep::save_projection((fs::path(a.out) / full_name).string(), full,
                                dtype);

          std::vector<std::string> aug_names;
          for (int64_t k = 0; k < augment; ++k) {
            const prep::ProjectionImage aug = prep::random_half_slice_mip(
                iso, view, mix(seed, static_cast<uint64_t>(i) * 1024 +
                                         (sagittal ? 0 : 512) +
                                         static_cast<uint64_t>(k)));
            const std::string aug_name = entry.id + "_" + tag + "_aug" +
                                         std::to_string(k) + ".tns";
            prep::save_projection((fs::path(a.out) / aug_name).string(), aug,
                                  dtype);
            aug_names.push_back(aug_name);
          }

          const auto c2d = prep::project_centroids(cents, view);
          const prep::HeatmapStack gt = prep::encode_heatmap(
              c2d, full.data.dim(0), full.data.dim(1), full.spacing, hm_cfg,
              view);
          const std::string gt_name = entry.id + "_" + tag + "_gt.tns";
          prep::save_heatmap((fs::path(a.out) / gt_name).string(), gt, dtype);

          if (sagittal) {
            ps.sag_full = full_name;
            ps.sag_aug = aug_names;
            ps.sag_gt = gt_name;
            if (entry.split == "train")
              train_sag[static_cast<size_t>(i)] = gt;
          } else {
            ps.cor_full = full_name;
            ps.cor_aug = aug_names;
            ps.cor_gt = gt_name;
            if (entry.split == "train")
              train_cor[static_cast<size_t>(i)] = gt;
          }
        }
        if (entry.split == "train") is_train[static_cast<size_t>(i)] = 1;
        index.scans[static_cast<size_t>(i)] = std::move(ps);
      },
      &failures);

  for (const auto& f : failures) std::cerr << "error: " << f << "\n";
  if (!failures.empty()) {
    std::cerr << failures.size() << " scan(s) failed\n";
    return 1;
  }

  // Median-frequency weights from the training split only.
  std::vector<prep::HeatmapStack> sag_stacks, cor_stacks;
  for (int64_t i = 0; i < n; ++i) {
    if (!is_train[static_cast<size_t>(i)]) continue;
    sag_stacks.push_back(std::move(train_sag[static_cast<size_t>(i)]));
    cor_stacks.push_back(std::move(train_cor[static_cast<size_t>(i)]));
  }
  if (sag_stacks.empty()) throw Error("manifest has no training scans");
  const prep::WeightTable wt_sag = prep::median_frequency_weights(sag_stacks);
  const prep::WeightTable wt_cor = prep::median_frequency_weights(cor_stacks);
  prep::save_weight_tables((fs::path(a.out) / "weight_tables.txt").string(),
                           wt_sag, wt_cor);
  index.save(a.out);
  std::cout << "preprocessed " << n << " scans (" << augment
            << " augmentations per view) into " << a.out << "\n";
  return 0;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string prep;
  std::string arch = "btrfly";
  std::string out;
  std::optional<int64_t> iterations;
  std::optional<int64_t> batch;
  std::optional<double> lr;
  std::optional<uint64_t> seed;
  std::optional<uint64_t> init_seed;
  std::optional<double> margin;
  std::optional<double> adv_weight;
  int precision = 32;
  bool resume = false;
  std::string config_path;
};

template <typename T>
int run_train(const TrainArgs& a, const KeyValueConfig& file_cfg) {
  KeyValueConfig cfg = file_cfg;  // resolved copy, echoed below

  train::TrainConfig tc;
  tc.run_dir = a.out;
  tc.opt.learning_rate =
      a.lr ? *a.lr : cfg.get_double("optimizer.learning_rate", 1e-3);
  tc.opt.decay_factor = cfg.get_double("optimizer.decay_factor", 0.75);
  tc.opt.decay_interval = cfg.get_int("optimizer.decay_interval", 10000);
  tc.opt.lr_floor = cfg.get_double("optimizer.lr_floor", 2e-4);
  tc.opt.beta1 = cfg.get_double("optimizer.beta1", 0.9);
  tc.opt.beta2 = cfg.get_double("optimizer.beta2", 0.999);
  tc.opt.epsilon = cfg.get_double("optimizer.epsilon", 1e-8);
  tc.opt.batch_size = a.batch ? *a.batch : cfg.get_int("optimizer.batch_size", 2);
  tc.opt.max_iterations =
      a.iterations ? *a.iterations : cfg.get_int("optimizer.max_iterations", 1000);
  tc.opt.seed = resolve_seed(a.seed, cfg, "optimizer.seed");
  tc.init_seed = a.init_seed ? *a.init_seed : cfg.get_u64("train.init_seed", 1);
  tc.log_interval = cfg.get_int("train.log_interval", 10);
  tc.val_interval = cfg.get_int("train.val_interval", 200);
  tc.checkpoint_interval = cfg.get_int("train.checkpoint_interval", 0);

  nets::BtrflyConfig bcfg;
  bcfg.arm_levels = static_cast<int>(cfg.get_int("btrfly.arm_levels", 4));
  bcfg.fusion_depth =
      static_cast<int>(cfg.get_int("btrfly.fusion_depth", bcfg.arm_levels - 1));
  bcfg.base_width = cfg.get_int("btrfly.base_width", 16);
  bcfg.fused_convs = static_cast<int>(cfg.get_int("btrfly.fused_convs", 2));
  bcfg.dropout_rate = cfg.get_double("btrfly.dropout", 0.2);

  nets::SingleViewConfig scfg;
  scfg.arm_levels = static_cast<int>(cfg.get_int("singleview.arm_levels", 4));
  scfg.base_width = cfg.get_int("singleview.base_width", 16);
  scfg.trunk_convs = static_cast<int>(cfg.get_int("singleview.trunk_convs", 2));

  nets::DiscriminatorConfig dcfg;
  dcfg.enc_width0 = cfg.get_int("disc.enc_width0", 3);
  dcfg.enc_width1 = cfg.get_int("disc.enc_width1", 6);
  dcfg.bottleneck_width = cfg.get_int("disc.bottleneck_width", 6);

  train::AdversarialConfig adv;
  adv.margin = a.margin ? *a.margin : cfg.get_double("adversarial.margin", 1.0);
  adv.adversarial_weight = a.adv_weight
                               ? *a.adv_weight
                               : cfg.get_double("adversarial.weight", 1.0);
  adv.discriminator_steps =
      static_cast<int>(cfg.get_int("adversarial.d_steps", 1));
  adv.energy_norm = cfg.get_string("adversarial.energy_norm", "mean") == "sum"
                        ? nets::EnergyNorm::kSum
                        : nets::EnergyNorm::kMean;

  // Snapshot of the fully resolved run configuration.
  fs::create_directories(a.out);
  cfg.set("arch", a.arch);
  cfg.set_int("precision", a.precision);
  cfg.set_double("optimizer.learning_rate", tc.opt.learning_rate);
  cfg.set_int("optimizer.batch_size", tc.opt.batch_size);
  cfg.set_int("optimizer.max_iterations", tc.opt.max_iterations);
  cfg.set("optimizer.seed", std::to_string(tc.opt.seed));
  cfg.set("train.init_seed", std::to_string(tc.init_seed));
  cfg.set_double("adversarial.margin", adv.margin);
  cfg.set_double("adversarial.weight", adv.adversarial_weight);
  cfg.save((fs::path(a.out) / "config_resolved.txt").string());

  auto data = train::LoadedDataset<T>::load(a.prep);
  std::cout << "loaded " << data.train.size() << " train / " << data.val.size()
            << " val / " << data.test.size() << " test scans\n";

  train::TrainState<T> state;
  std::optional<train::TrainState<T>> resume_state;
  if (a.resume) {
    resume_state =
        train::TrainState<T>::load((fs::path(a.out) / "final").string());
    std::cout << "resuming from iteration " << resume_state->iteration << "\n";
  }

  if (a.arch == "btrfly" || a.arch == "singleview") {
    state = train::train_plain<T>(
        data,
        a.arch == "btrfly" ? train::PlainKind::kBtrfly
                           : train::PlainKind::kSingleViewPair,
        bcfg, scfg, tc, nullptr,
        resume_state ? &*resume_state : nullptr);
  } else if (a.arch == "btrfly-pe") {
    state = train::train_adversarial<T>(data, bcfg, dcfg, tc, adv, nullptr,
                                        resume_state ? &*resume_state : nullptr);
    std::cout << "adversarial run: nets =";
    for (const auto& [name, s] : state.specs) std::cout << " " << name;
    std::cout << "\n";
  } else {
    throw ConfigError("unknown --arch '" + a.arch + "'");
  }

  // Validation-selected inference threshold (Fig.-5 style sweep).
  if (!data.val.empty()) {
    auto val_preds = train::predict_split(data.val, state);
    std::vector<eval::PrPoint> curve;
    const double t =
        train::select_threshold(val_preds, eval::default_threshold_grid(), &curve);
    std::ofstream os(fs::path(a.out) / "threshold.txt");
    os.precision(17);
    os << t << "\n";
    eval::write_pr_curve_csv((fs::path(a.out) / "val_pr_curve.csv").string(),
                             curve);
    std::cout << "selected threshold T=" << t << " on validation\n";
  }
  std::cout << "trained " << state.kind << " to iteration " << state.iteration
            << " (best val loss "
            << (std::isfinite(state.best_val_loss)
                    ? std::to_string(state.best_val_loss)
                    : std::string("n/a"))
            << ")\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  KeyValueConfig cfg;
  if (!a.config_path.empty()) cfg = KeyValueConfig::parse_file(a.config_path);
  const int precision =
      static_cast<int>(cfg.get_int("precision", a.precision));
  if (precision == 64) return run_train<double>(a, cfg);
  if (precision == 32) return run_train<float>(a, cfg);
  throw ConfigError("precision must be 32 or 64");
}

// ------------------------------------------------------------------ infer

struct InferArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string out;
  std::optional<double> threshold;
  std::optional<double> min_conf;
  bool dump_heatmaps = false;
  int jobs = 1;
  int precision = 32;
  bool force = false;
};

double checkpoint_threshold(const std::string& ckpt_dir) {
  // The training run stores the validation-selected T next to its
  // checkpoints.
  const fs::path run_dir = fs::path(ckpt_dir).parent_path();
  for (const fs::path p :
       {fs::path(ckpt_dir) / "threshold.txt", run_dir / "threshold.txt"}) {
    std::ifstream is(p);
    if (is) {
      double t = 0.0;
      if (is >> t) return t;
    }
  }
  return 0.0;
}

template <typename T>
int run_infer(const InferArgs& a) {
  require_empty_or_force(a.out, a.force);
  infer::InferenceConfig icfg;
  icfg.threshold =
      a.threshold ? *a.threshold : checkpoint_threshold(a.checkpoint);
  if (a.min_conf) icfg.min_peak_confidence = *a.min_conf;
  icfg.validate();

  const auto manifest = dataset::DatasetManifest::load(a.manifest);
  const auto scans = manifest.split(a.split);
  if (scans.empty()) throw Error("no scans with split '" + a.split + "'");

  std::vector<std::string> failures;
  parallel_for(
      static_cast<int64_t>(scans.size()), a.jobs,
      [&](int64_t i) {
        // One generator per worker call: executors cache per-run state.
        infer::Generator<T> gen = infer::Generator<T>::load(a.checkpoint);
        const auto& entry = scans[static_cast<size_t>(i)];
        const Volume3D vol = load_volume(entry.volume_path);
        const auto result = infer::infer_scan(vol, gen, icfg);
        const std::string base = (fs::path(a.out) / entry.id).string();
        save_centroids(base + ".cent", result.centroids);
        if (a.dump_heatmaps) {
          prep::save_heatmap(base + "_sag_pred.tns", result.sag);
          prep::save_heatmap(base + "_cor_pred.tns", result.cor);
        }
      },
      &failures);
  for (const auto& f : failures) std::cerr << "error: " << f << "\n";
  if (!failures.empty()) return 1;
  std::cout << "inferred " << scans.size() << " scans at T=" << icfg.threshold
            << " into " << a.out << "\n";
  return 0;
}

// ------------------------------------------------------------------- eval

struct EvalArgs {
  std::string pred;
  std::string manifest;
  std::string split = "test";
  std::string out;
  double threshold_used = 0.0;
  bool hits_only = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto manifest = dataset::DatasetManifest::load(a.manifest);
  const auto scans = manifest.split(a.split);
  if (scans.empty()) throw Error("no scans with split '" + a.split + "'");

  std::vector<eval::ScoredScan> scored;
  for (const auto& entry : scans) {
    eval::ScoredScan s;
    s.scan_id = entry.id;
    s.gt = load_centroids(entry.centroid_path);
    const fs::path pred_path = fs::path(a.pred) / (entry.id + ".cent");
    if (!fs::exists(pred_path))
      throw Error("missing prediction file: " + pred_path.string());
    s.pred = load_centroids(pred_path.string());
    scored.push_back(std::move(s));
  }
  const eval::EvalReport report =
      eval::evaluate(scored, a.threshold_used, a.hits_only);
  eval::write_report(a.out, report);
  std::cout << "id rate " << report.id_rate << " %, P " << report.precision
            << " %, R " << report.recall << " %, F1 " << report.f1
            << " % -> " << a.out << "\n";
  return 0;
}

// --------------------------------------------------------------- pr-curve

struct PrCurveArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string out = "pr_curve.csv";
  std::string plot;
  double tmin = 0.0, tmax = 0.8, tstep = 0.05;
  int precision = 32;
};

template <typename T>
int run_pr_curve(const PrCurveArgs& a) {
  const auto manifest = dataset::DatasetManifest::load(a.manifest);
  const auto scans = manifest.split(a.split);
  if (scans.empty()) throw Error("no scans with split '" + a.split + "'");

  infer::Generator<T> gen = infer::Generator<T>::load(a.checkpoint);
  infer::InferenceConfig icfg;  // raw heatmaps; thresholds applied in sweep
  std::vector<eval::ScanPrediction> preds;
  for (const auto& entry : scans) {
    const Volume3D vol = load_volume(entry.volume_path);
    auto result = infer::infer_scan(vol, gen, icfg);
    eval::ScanPrediction sp;
    sp.scan_id = entry.id;
    sp.sag = std::move(result.sag);
    sp.cor = std::move(result.cor);
    sp.gt = load_centroids(entry.centroid_path);
    preds.push_back(std::move(sp));
  }

  std::vector<double> grid;
  for (double t = a.tmin; t <= a.tmax + 1e-12; t += a.tstep) grid.push_back(t);
  const auto curve = eval::pr_sweep(preds, grid);
  eval::write_pr_curve_csv(a.out, curve);
  if (!a.plot.empty()) eval::write_pr_curve_svg(a.plot, curve);
  std::cout << "wrote " << curve.size() << "-row PR curve to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spinelab: vertebrae labelling on dual-view MIP heatmaps"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* sp = app.add_subcommand("phantom", "generate a synthetic dataset");
  sp->add_option("--num-scans", pa.num_scans, "number of phantoms")->required();
  sp->add_option("--seed", pa.seed, "master seed");
  sp->add_option("--out", pa.out, "output directory")->required();
  sp->add_flag("--force", pa.force, "overwrite a non-empty directory");
  sp->add_option("--shape", pa.shape, "grid HxWxD (default 96x64x64)");
  sp->add_option("--fractions", pa.fractions, "train,val,test fractions");
  sp->add_option("--precision", pa.precision, "32 or 64");
  sp->add_option("--config", pa.config_path, "key=value config file");

  PreprocessArgs qa;
  auto* sq = app.add_subcommand("preprocess", "MIPs, heatmaps, weight tables");
  sq->add_option("--manifest", qa.manifest)->required();
  sq->add_option("--out", qa.out)->required();
  sq->add_option("--augment", qa.augment, "half-slice MIPs per scan per view");
  sq->add_option("--seed", qa.seed);
  sq->add_option("--sigma", qa.sigma, "heatmap sigma (mm)");
  sq->add_option("--truncation", qa.truncation, "truncation radius (sigmas)");
  sq->add_option("--target-mm", qa.target_mm, "isotropic resample target");
  sq->add_option("--precision", qa.precision);
  sq->add_option("--jobs", qa.jobs, "parallel scan workers");
  sq->add_flag("--force", qa.force);
  sq->add_option("--config", qa.config_path);

  TrainArgs ta;
  auto* st = app.add_subcommand("train", "train a labelling network");
  st->add_option("--prep", ta.prep, "preprocessed dataset directory")->required();
  st->add_option("--arch", ta.arch, "btrfly | singleview | btrfly-pe");
  st->add_option("--out", ta.out, "run directory")->required();
  st->add_option("--iterations", ta.iterations);
  st->add_option("--batch", ta.batch);
  st->add_option("--lr", ta.lr);
  st->add_option("--seed", ta.seed);
  st->add_option("--init-seed", ta.init_seed);
  st->add_option("--margin", ta.margin, "EB margin m");
  st->add_option("--adv-weight", ta.adv_weight, "generator energy weight");
  st->add_option("--precision", ta.precision, "32 or 64");
  st->add_flag("--resume", ta.resume, "continue from <out>/final");
  st->add_option("--config", ta.config_path);

  InferArgs ia;
  auto* si = app.add_subcommand("infer", "scan -> labelled centroids");
  si->add_option("--checkpoint", ia.checkpoint)->required();
  si->add_option("--manifest", ia.manifest)->required();
  si->add_option("--split", ia.split);
  si->add_option("--out", ia.out)->required();
  si->add_option("--threshold", ia.threshold, "override the stored T");
  si->add_option("--min-conf", ia.min_conf, "post-fusion peak gate");
  si->add_flag("--dump-heatmaps", ia.dump_heatmaps);
  si->add_option("--jobs", ia.jobs);
  si->add_option("--precision", ia.precision);
  si->add_flag("--force", ia.force);

  EvalArgs ea;
  auto* se = app.add_subcommand("eval", "score predicted centroid files");
  se->add_option("--pred", ea.pred, "directory of <scan>.cent predictions")
      ->required();
  se->add_option("--manifest", ea.manifest)->required();
  se->add_option("--split", ea.split);
  se->add_option("--out", ea.out)->required();
  se->add_option("--threshold-used", ea.threshold_used,
                 "recorded in the report");
  se->add_flag("--hits-only", ea.hits_only,
               "restrict distance stats to identified vertebrae");

  PrCurveArgs ca;
  auto* sc = app.add_subcommand("pr-curve", "precision/recall threshold sweep");
  sc->add_option("--checkpoint", ca.checkpoint)->required();
  sc->add_option("--manifest", ca.manifest)->required();
  sc->add_option("--split", ca.split);
  sc->add_option("--out", ca.out);
  sc->add_option("--plot", ca.plot, "optional SVG output");
  sc->add_option("--tmin", ca.tmin);
  sc->add_option("--tmax", ca.tmax);
  sc->add_option("--tstep", ca.tstep);
  sc->add_option("--precision", ca.precision);

  CLI11_PARSE(app, argc, argv);

  try {
    if (sp->parsed()) return cmd_phantom(pa);
    if (sq->parsed()) return cmd_preprocess(qa);
    if (st->parsed()) return cmd_train(ta);
    if (si->parsed())
      return ia.precision == 64 ? run_infer<double>(ia) : run_infer<float>(ia);
    if (se->parsed()) return cmd_eval(ea);
    if (sc->parsed())
      return ca.precision == 64 ? run_pr_curve<double>(ca)
                                : run_pr_curve<float>(ca);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
