#ifndef SPINELAB_TRAIN_LOOP_HPP_
#define SPINELAB_TRAIN_LOOP_HPP_

#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spinelab/dataset.hpp"
#include "spinelab/eval.hpp"
#include "spinelab/nets/builders.hpp"
#include "spinelab/prep_dataset.hpp"
#include "spinelab/rng.hpp"
#include "spinelab/train/losses.hpp"
#include "spinelab/train/optimizer.hpp"

namespace spinelab::train {

/// Preprocessed data for one view of one scan, resident in memory.
template <typename T>
struct ViewData {
  std::vector<Tensor<T>> train_mips;  // (H, W); augmented, or the full MIP
  Tensor<T> full_mip;                 // (H, W)
  Tensor<T> gt;                       // (25, H, W)
  Tensor<T> weight_map;               // (H, W)
  std::array<double, 2> spacing{1.0, 1.0};
};

template <typename T>
struct ScanData {
  std::string id;
  std::string split;
  ViewData<T> sag, cor;
  CentroidSet gt_centroids;
};

template <typename T>
struct LoadedDataset {
  std::vector<ScanData<T>> train, val, test;
  prep::WeightTable table_sag, table_cor;
  double sigma_mm = 0.0;
  double resample_mm = 1.0;

  /// Loads every referenced tensor; training batches require all scans to
  /// share one MIP shape per view.
  static LoadedDataset load(const std::string& prep_dir);
};

struct TrainConfig {
  OptimizerConfig opt;
  int64_t log_interval = 10;
  int64_t val_interval = 200;
  int64_t checkpoint_interval = 0;  // 0: only final/best checkpoints
  std::string run_dir;
  uint64_t init_seed = 1;  // parameter initialization stream
};

/// Everything a run needs to continue: parameters, optimizer moments and
/// the exact random stream positions.
template <typename T>
struct TrainState {
  std::string kind;  // btrfly | singleview | btrfly-pe
  int64_t iteration = 0;
  std::map<std::string, nets::NetworkSpec> specs;
  std::map<std::string, nets::NetworkParams<T>> params;
  std::map<std::string, Adam<T>> optim;
  Rng data_rng{0};
  Rng dropout_rng{0};
  double best_val_loss = std::numeric_limits<double>::infinity();
  int64_t best_val_iteration = -1;

  void save(const std::string& dir) const;
  static TrainState load(const std::string& dir);
};

/// Per-iteration scalars appended to run_dir/metrics.txt and returned for
/// programmatic gates.
struct IterationRecord {
  int64_t iteration = 0;
  double lr = 0.0;
  double task_loss = 0.0;  // L_b (both views) averaged over the batch
  double loss_sag = 0.0, loss_cor = 0.0;
  double e_real_sag = 0.0, e_gen_sag = 0.0;  // adversarial runs only
  double e_real_cor = 0.0, e_gen_cor = 0.0;
};

enum class PlainKind { kBtrfly, kSingleViewPair };

/// Standalone training of the Btrfly net or of the two single-view nets.
/// Deterministic given cfg.opt.seed and cfg.init_seed. Returns the final
/// state; per-iteration records go to `history` when given. A non-finite
/// loss aborts with a diagnostic checkpoint under run_dir/diverged.
template <typename T>
TrainState<T> train_plain(const LoadedDataset<T>& data, PlainKind kind,
                          const nets::BtrflyConfig& btrfly_cfg,
                          const nets::SingleViewConfig& single_cfg,
                          const TrainConfig& cfg,
                          std::vector<IterationRecord>* history = nullptr,
                          TrainState<T>* resume_from = nullptr);

/// Adversarial regime: the Btrfly generator against one energy-based
/// discriminator per view. Each iteration updates both discriminators on
/// (real, detached-generated) stacks, then the generator on task loss plus
/// the weighted generated-sample energies. Discriminators start from
/// scratch; there is no pre-training.
template <typename T>
TrainState<T> train_adversarial(const LoadedDataset<T>& data,
                                const nets::BtrflyConfig& btrfly_cfg,
                                const nets::DiscriminatorConfig& disc_cfg,
                                const TrainConfig& cfg,
                                const AdversarialConfig& adv,
                                std::vector<IterationRecord>* history = nullptr,
                                TrainState<T>* resume_from = nullptr);

/// One discriminator forward over a (N, 1, C, H, W) batch with per-sample
/// reconstruction energies. backward() then propagates
/// d(sum_n w_n * E_n)/d(...) for caller-chosen per-sample weights w_n: the
/// real term of the margin loss uses w = 1/N, its hinge uses w = -1/N on
/// active samples, and the generator's energy term uses w = alpha/N with
/// input gradients flowing back into the generator.
template <typename T>
class DiscriminatorPass {
 public:
  DiscriminatorPass(nets::Executor<T>& exec, nets::NetworkParams<T>& params,
                    Tensor<T> batch, nets::EnergyNorm norm);

  const std::vector<double>& energies() const { return energies_; }
  double mean_energy() const;

  /// Param gradients accumulate into `param_grads` when given; returns
  /// dLoss/dbatch (including the direct residual term) when
  /// want_input_grads is set, otherwise an empty tensor.
  Tensor<T> backward(const std::vector<double>& weights,
                     nets::NetworkParams<T>* param_grads,
                     bool want_input_grads = false);

 private:
  nets::Executor<T>* exec_;
  nets::NetworkParams<T>* params_;
  Tensor<T> batch_;
  Tensor<T> reconstruction_;
  std::vector<double> energies_;
  double energy_scale_ = 1.0;
};

/// Validation loss (eval mode, full MIPs) of the current state.
template <typename T>
double validation_loss(const LoadedDataset<T>& data, TrainState<T>& state);

/// Runs the generator of `state` on every scan of a split and pairs the raw
/// prediction stacks with ground truth, ready for sweeps or evaluation.
template <typename T>
std::vector<eval::ScanPrediction> predict_split(
    const std::vector<ScanData<T>>& scans, TrainState<T>& state);

/// F1-maximizing threshold over the grid (ties toward the smaller T).
/// Returns 0 with a warning when no threshold yields any prediction.
double select_threshold(const std::vector<eval::ScanPrediction>& val_preds,
                        const std::vector<double>& grid,
                        std::vector<eval::PrPoint>* curve_out = nullptr);

}  // namespace spinelab::train

#endif  // SPINELAB_TRAIN_LOOP_HPP_
