#include "spinelab/train/loop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "spinelab/error.hpp"
#include "spinelab/nets/engine.hpp"

namespace spinelab::train {

namespace fs = std::filesystem;

namespace {

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string resolve(const std::string& dir, const std::string& rel) {
  const fs::path p(rel);
  if (p.is_absolute()) return rel;
  return (fs::path(dir) / p).string();
}

template <typename T>
Tensor<T> to_t(const Tensor<double>& in) {
  return in.template cast<T>();
}

template <typename T>
ViewData<T> load_view(const std::string& dir, const std::string& full,
                      const std::vector<std::string>& aug,
                      const std::string& gt_path,
                      const prep::WeightTable& table) {
  ViewData<T> v;
  prep::ProjectionImage full_img = prep::load_projection(resolve(dir, full));
  v.spacing = full_img.spacing;
  v.full_mip = to_t<T>(full_img.data);
  for (const auto& a : aug) {
    v.train_mips.push_back(
        to_t<T>(prep::load_projection(resolve(dir, a)).data));
  }
  if (v.train_mips.empty()) v.train_mips.push_back(v.full_mip);
  prep::HeatmapStack gt = prep::load_heatmap(resolve(dir, gt_path));
  v.weight_map = to_t<T>(prep::weight_map(gt, table));
  v.gt = to_t<T>(gt.data);
  return v;
}

}  // namespace

template <typename T>
LoadedDataset<T> LoadedDataset<T>::load(const std::string& prep_dir) {
  const prep::PreprocessedIndex idx = prep::PreprocessedIndex::load(prep_dir);
  LoadedDataset<T> data;
  data.sigma_mm = idx.sigma_mm;
  data.resample_mm = idx.resample_mm;
  std::tie(data.table_sag, data.table_cor) =
      prep::load_weight_tables(resolve(prep_dir, idx.weight_table_path));

  for (const auto& s : idx.scans) {
    ScanData<T> scan;
    scan.id = s.scan_id;
    scan.split = s.split;
    scan.sag = load_view<T>(prep_dir, s.sag_full, s.sag_aug, s.sag_gt,
                            data.table_sag);
    scan.cor = load_view<T>(prep_dir, s.cor_full, s.cor_aug, s.cor_gt,
                            data.table_cor);
    scan.gt_centroids = load_centroids(resolve(prep_dir, s.centroid_path));
    if (scan.sag.train_mips.size() != scan.cor.train_mips.size())
      throw Error("scan " + s.scan_id + ": view augmentation counts differ");
    if (s.split == "train")
      data.train.push_back(std::move(scan));
    else if (s.split == "val")
      data.val.push_back(std::move(scan));
    else
      data.test.push_back(std::move(scan));
  }
  // Training batches stack samples, so shapes must agree across scans.
  auto check_uniform = [](const std::vector<ScanData<T>>& scans) {
    for (size_t i = 1; i < scans.size(); ++i) {
      if (!scans[i].sag.full_mip.same_shape(scans[0].sag.full_mip) ||
          !scans[i].cor.full_mip.same_shape(scans[0].cor.full_mip))
        throw Error("training requires uniform MIP shapes across scans");
    }
  };
  check_uniform(data.train);
  return data;
}

template <typename T>
void TrainState<T>::save(const std::string& dir) const {
  const fs::path target(dir);
  const fs::path tmp(dir + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream meta(tmp / "meta.txt");
    if (!meta) throw Error("cannot write checkpoint meta in " + dir);
    meta.precision(17);
    meta << "kind " << kind << "\n";
    meta << "iteration " << iteration << "\n";
    if (std::isfinite(best_val_loss))
      meta << "best_val_loss " << best_val_loss << "\n";
    meta << "best_val_iteration " << best_val_iteration << "\n";
    meta << "nets";
    for (const auto& [name, spec] : specs) meta << " " << name;
    meta << "\n";
  }
  {
    std::ofstream rng(tmp / "rng.txt");
    rng << data_rng.serialize() << "\n" << dropout_rng.serialize() << "\n";
  }
  for (const auto& [name, spec] : specs)
    spec.save((tmp / ("spec_" + name + ".json")).string());
  for (const auto& [name, p] : params)
    p.save((tmp / ("params_" + name)).string());
  for (const auto& [name, opt] : optim)
    opt.save((tmp / ("adam_" + name)).string());
  // Atomic publish: temp directory renamed over the target.
  fs::remove_all(target);
  fs::rename(tmp, target);
}

template <typename T>
TrainState<T> TrainState<T>::load(const std::string& dir) {
  const fs::path d(dir);
  std::ifstream meta(d / "meta.txt");
  if (!meta) throw Error("not a checkpoint directory: " + dir);
  TrainState<T> state;
  std::vector<std::string> names;
  std::string key;
  while (meta >> key) {
    if (key == "kind")
      meta >> state.kind;
    else if (key == "iteration")
      meta >> state.iteration;
    else if (key == "best_val_loss")
      meta >> state.best_val_loss;
    else if (key == "best_val_iteration")
      meta >> state.best_val_iteration;
    else if (key == "nets") {
      std::string line;
      std::getline(meta, line);
      std::istringstream ls(line);
      std::string n;
      while (ls >> n) names.push_back(n);
    }
  }
  {
    std::ifstream rng(d / "rng.txt");
    if (!rng) throw Error("checkpoint missing rng state: " + dir);
    std::string line;
    std::getline(rng, line);
    state.data_rng.deserialize(line);
    std::getline(rng, line);
    state.dropout_rng.deserialize(line);
  }
  for (const auto& name : names) {
    state.specs[name] =
        nets::NetworkSpec::load((d / ("spec_" + name + ".json")).string());
    state.params[name] =
        nets::NetworkParams<T>::load((d / ("params_" + name)).string());
    const fs::path adam_dir = d / ("adam_" + name);
    if (fs::exists(adam_dir)) state.optim[name] = Adam<T>::load(adam_dir.string());
  }
  return state;
}

namespace {

/// Output-layer bias starts at the background prior (channel 0 is ~1 over
/// most of a ground-truth stack), so early iterations go into the peaks
/// rather than the trivial solution.
template <typename T>
void seed_background_bias(nets::NetworkParams<T>& params,
                          const std::string& out_layer) {
  if (params.has(out_layer, "bias"))
    params.at(out_layer, "bias")[0] = static_cast<T>(1);
}

struct BatchPick {
  int64_t scan;
  int64_t aug;
};

template <typename T>
std::vector<BatchPick> draw_batch(Rng& rng,
                                  const std::vector<ScanData<T>>& scans,
                                  int64_t batch_size) {
  std::vector<BatchPick> picks;
  picks.reserve(static_cast<size_t>(batch_size));
  for (int64_t b = 0; b < batch_size; ++b) {
    BatchPick p;
    p.scan = rng.uniform_int(static_cast<int64_t>(scans.size()));
    p.aug = rng.uniform_int(
        static_cast<int64_t>(scans[static_cast<size_t>(p.scan)]
                                 .sag.train_mips.size()));
    picks.push_back(p);
  }
  return picks;
}

/// (N, 1, H, W) batch from per-scan 2D MIPs.
template <typename T>
Tensor<T> stack_images(const std::vector<const Tensor<T>*>& images) {
  const int64_t n = static_cast<int64_t>(images.size());
  const int64_t h = images[0]->dim(0), w = images[0]->dim(1);
  Tensor<T> out(std::vector<int64_t>{n, 1, h, w});
  for (int64_t i = 0; i < n; ++i)
    std::copy(images[static_cast<size_t>(i)]->data(),
              images[static_cast<size_t>(i)]->data() + h * w,
              out.data() + i * h * w);
  return out;
}

/// Scores one view's batch predictions and accumulates dL/dpred (already
/// scaled by 1/N for batch averaging).
template <typename T>
ViewLossTerms batch_view_loss(const Tensor<T>& preds,
                              const std::vector<const ScanData<T>*>& scans,
                              bool sagittal, Tensor<T>* grads) {
  const int64_t n = preds.dim(0);
  const int64_t c = preds.dim(1), h = preds.dim(2), w = preds.dim(3);
  const int64_t block = c * h * w;
  const double inv_n = 1.0 / static_cast<double>(n);
  ViewLossTerms sum;
  for (int64_t i = 0; i < n; ++i) {
    const ViewData<T>& view =
        sagittal ? scans[static_cast<size_t>(i)]->sag
                 : scans[static_cast<size_t>(i)]->cor;
    const ViewLossTerms t = view_loss_core<T>(
        view.gt.data(), preds.data() + i * block, view.weight_map.data(), c, h,
        w, grads ? grads->data() + i * block : nullptr, inv_n);
    sum.l2 += t.l2 * inv_n;
    sum.cross_entropy += t.cross_entropy * inv_n;
    sum.total += t.total * inv_n;
  }
  return sum;
}

/// (N, 1, 25, H, W) discriminator input from a (N, 25, H, W) stack batch
/// (same layout, one more axis).
template <typename T>
Tensor<T> lift_batch(const Tensor<T>& batch) {
  Tensor<T> out(std::vector<int64_t>{batch.dim(0), 1, batch.dim(1),
                                     batch.dim(2), batch.dim(3)});
  std::copy(batch.data(), batch.data() + batch.numel(), out.data());
  return out;
}

template <typename T>
Tensor<T> stack_gt(const std::vector<const ScanData<T>*>& scans,
                   bool sagittal) {
  const Tensor<T>& first = sagittal ? scans[0]->sag.gt : scans[0]->cor.gt;
  Tensor<T> out(std::vector<int64_t>{static_cast<int64_t>(scans.size()), 1,
                                     first.dim(0), first.dim(1),
                                     first.dim(2)});
  const int64_t block = first.numel();
  for (size_t i = 0; i < scans.size(); ++i) {
    const Tensor<T>& gt = sagittal ? scans[i]->sag.gt : scans[i]->cor.gt;
    std::copy(gt.data(), gt.data() + block,
              out.data() + static_cast<int64_t>(i) * block);
  }
  return out;
}

std::string metrics_header() {
  return "# iter lr task_loss loss_sag loss_cor e_real_sag e_gen_sag "
         "e_real_cor e_gen_cor\n";
}

void append_metrics(std::ofstream& os, const IterationRecord& r) {
  os.precision(17);
  os << r.iteration << " " << r.lr << " " << r.task_loss << " " << r.loss_sag
     << " " << r.loss_cor << " " << r.e_real_sag << " " << r.e_gen_sag << " "
     << r.e_real_cor << " " << r.e_gen_cor << "\n";
  os.flush();
}

template <typename T>
void abort_diverged(TrainState<T>& state, const std::string& run_dir,
                    int64_t iteration) {
  if (!run_dir.empty())
    state.save((fs::path(run_dir) / "diverged").string());
  throw Error("training diverged (non-finite loss) at iteration " +
              std::to_string(iteration) + "; diagnostic checkpoint written");
}

}  // namespace

template <typename T>
DiscriminatorPass<T>::DiscriminatorPass(nets::Executor<T>& exec,
                                        nets::NetworkParams<T>& params,
                                        Tensor<T> batch,
                                        nets::EnergyNorm norm)
    : exec_(&exec), params_(&params), batch_(std::move(batch)) {
  if (batch_.rank() != 5)
    throw ShapeError("discriminator batches are (N, 1, C, H, W)");
  auto out = exec.forward({{nets::kStackPort, batch_}}, params, true);
  reconstruction_ = std::move(out.at(nets::kReconstructionOut));
  const int64_t n = batch_.dim(0);
  const int64_t block = batch_.numel() / n;
  energy_scale_ =
      norm == nets::EnergyNorm::kMean ? 1.0 / static_cast<double>(block) : 1.0;
  energies_.assign(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const T* x = batch_.data() + i * block;
    const T* r = reconstruction_.data() + i * block;
    double s = 0.0;
    for (int64_t j = 0; j < block; ++j) {
      const double d = static_cast<double>(x[j]) - static_cast<double>(r[j]);
      s += d * d;
    }
    energies_[static_cast<size_t>(i)] = s * energy_scale_;
  }
}

template <typename T>
double DiscriminatorPass<T>::mean_energy() const {
  double s = 0.0;
  for (double e : energies_) s += e;
  return energies_.empty() ? 0.0 : s / static_cast<double>(energies_.size());
}

template <typename T>
Tensor<T> DiscriminatorPass<T>::backward(const std::vector<double>& weights,
                                         nets::NetworkParams<T>* param_grads,
                                         bool want_input_grads) {
  const int64_t n = batch_.dim(0);
  if (weights.size() != static_cast<size_t>(n))
    throw ShapeError("one weight per batch sample required");
  const int64_t block = batch_.numel() / n;

  bool any = false;
  for (double w : weights) any = any || (w != 0.0);
  if (!any && !want_input_grads) return Tensor<T>();

  // dE/drec = -2 (x - rec) * scale per sample, weighted.
  Tensor<T> dout(reconstruction_.shape());
  for (int64_t i = 0; i < n; ++i) {
    const double w = weights[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    const T* x = batch_.data() + i * block;
    const T* r = reconstruction_.data() + i * block;
    T* g = dout.data() + i * block;
    const double k = 2.0 * w * energy_scale_;
    for (int64_t j = 0; j < block; ++j)
      g[j] = static_cast<T>(
          k * (static_cast<double>(r[j]) - static_cast<double>(x[j])));
  }

  nets::NetworkParams<T> scratch;
  nets::NetworkParams<T>& grads = param_grads ? *param_grads : scratch;
  std::map<std::string, Tensor<T>> og;
  og[nets::kReconstructionOut] = std::move(dout);
  auto input_grads = exec_->backward(og, *params_, grads);

  if (!want_input_grads) return Tensor<T>();
  Tensor<T> gin = std::move(input_grads.at(nets::kStackPort));
  // Direct term dE/dx = +2 (x - rec) * scale, weighted.
  for (int64_t i = 0; i < n; ++i) {
    const double w = weights[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    const T* x = batch_.data() + i * block;
    const T* r = reconstruction_.data() + i * block;
    T* g = gin.data() + i * block;
    const double k = 2.0 * w * energy_scale_;
    for (int64_t j = 0; j < block; ++j)
      g[j] += static_cast<T>(
          k * (static_cast<double>(x[j]) - static_cast<double>(r[j])));
  }
  return gin;
}

template <typename T>
double validation_loss(const LoadedDataset<T>& data, TrainState<T>& state) {
  if (data.val.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  if (state.kind == "singleview") {
    nets::Executor<T> exec_sag(state.specs.at("sag"));
    nets::Executor<T> exec_cor(state.specs.at("cor"));
    for (const auto& scan : data.val) {
      std::vector<const ScanData<T>*> one{&scan};
      auto out_sag = exec_sag.forward(
          {{nets::kImagePort, stack_images<T>({&scan.sag.full_mip})}},
          state.params.at("sag"), false);
      auto out_cor = exec_cor.forward(
          {{nets::kImagePort, stack_images<T>({&scan.cor.full_mip})}},
          state.params.at("cor"), false);
      total += batch_view_loss<T>(out_sag.at(nets::kImageOut), one, true,
                                  nullptr)
                   .total;
      total += batch_view_loss<T>(out_cor.at(nets::kImageOut), one, false,
                                  nullptr)
                   .total;
    }
  } else {
    nets::Executor<T> exec(state.specs.at("btrfly"));
    for (const auto& scan : data.val) {
      std::vector<const ScanData<T>*> one{&scan};
      std::map<std::string, Tensor<T>> in;
      in[nets::kSagittalPort] = stack_images<T>({&scan.sag.full_mip});
      in[nets::kCoronalPort] = stack_images<T>({&scan.cor.full_mip});
      auto out = exec.forward(in, state.params.at("btrfly"), false);
      total += batch_view_loss<T>(out.at(nets::kSagittalOut), one, true,
                                  nullptr)
                   .total;
      total += batch_view_loss<T>(out.at(nets::kCoronalOut), one, false,
                                  nullptr)
                   .total;
    }
  }
  return total / static_cast<double>(data.val.size());
}

template <typename T>
TrainState<T> train_plain(const LoadedDataset<T>& data, PlainKind kind,
                          const nets::BtrflyConfig& btrfly_cfg,
                          const nets::SingleViewConfig& single_cfg,
                          const TrainConfig& cfg,
                          std::vector<IterationRecord>* history,
                          TrainState<T>* resume_from) {
  cfg.opt.validate();
  if (data.train.empty()) throw ConfigError("no training scans");
  if (!cfg.run_dir.empty()) fs::create_directories(cfg.run_dir);

  TrainState<T> state;
  if (resume_from) {
    state = std::move(*resume_from);
  } else {
    state.kind = kind == PlainKind::kBtrfly ? "btrfly" : "singleview";
    state.data_rng = Rng(cfg.opt.seed);
    state.dropout_rng = Rng(mix(cfg.opt.seed, 0x5EEDu));
    if (kind == PlainKind::kBtrfly) {
      state.specs["btrfly"] = nets::btrfly_spec(btrfly_cfg);
      state.params["btrfly"] =
          nets::init_params<T>(state.specs["btrfly"], cfg.init_seed);
      seed_background_bias(state.params["btrfly"], nets::kSagittalOut);
      seed_background_bias(state.params["btrfly"], nets::kCoronalOut);
      state.optim["btrfly"] =
          Adam<T>(cfg.opt.beta1, cfg.opt.beta2, cfg.opt.epsilon);
    } else {
      state.specs["sag"] = nets::singleview_spec(single_cfg);
      state.specs["cor"] = state.specs["sag"];
      state.params["sag"] =
          nets::init_params<T>(state.specs["sag"], mix(cfg.init_seed, 1));
      state.params["cor"] =
          nets::init_params<T>(state.specs["cor"], mix(cfg.init_seed, 2));
      seed_background_bias(state.params["sag"], nets::kImageOut);
      seed_background_bias(state.params["cor"], nets::kImageOut);
      state.optim["sag"] = Adam<T>(cfg.opt.beta1, cfg.opt.beta2, cfg.opt.epsilon);
      state.optim["cor"] = Adam<T>(cfg.opt.beta1, cfg.opt.beta2, cfg.opt.epsilon);
    }
  }

  std::ofstream metrics;
  if (!cfg.run_dir.empty()) {
    const fs::path mpath = fs::path(cfg.run_dir) / "metrics.txt";
    const bool fresh = !fs::exists(mpath);
    metrics.open(mpath, std::ios::app);
    if (fresh) {
      const auto now = std::chrono::system_clock::to_time_t(
          std::chrono::system_clock::now());
      metrics << "# spinelab training log (" << state.kind << ")\n";
      metrics << "# started " << now << "\n";
      metrics << metrics_header();
    }
  }

  std::unique_ptr<nets::Executor<T>> exec_btr, exec_sag, exec_cor;
  if (state.kind == "btrfly") {
    exec_btr = std::make_unique<nets::Executor<T>>(state.specs.at("btrfly"));
  } else {
    exec_sag = std::make_unique<nets::Executor<T>>(state.specs.at("sag"));
    exec_cor = std::make_unique<nets::Executor<T>>(state.specs.at("cor"));
  }

  const int64_t n_max = cfg.opt.max_iterations;
  while (state.iteration < n_max) {
    const int64_t iter = state.iteration;
    const double lr = lr_schedule(iter, cfg.opt);
    const auto picks =
        draw_batch<T>(state.data_rng, data.train, cfg.opt.batch_size);
    const uint64_t dropout_seed = state.dropout_rng.next_u64();

    std::vector<const ScanData<T>*> scans;
    std::vector<const Tensor<T>*> sag_imgs, cor_imgs;
    for (const auto& p : picks) {
      const ScanData<T>& s = data.train[static_cast<size_t>(p.scan)];
      scans.push_back(&s);
      sag_imgs.push_back(&s.sag.train_mips[static_cast<size_t>(p.aug)]);
      cor_imgs.push_back(&s.cor.train_mips[static_cast<size_t>(p.aug)]);
    }

    IterationRecord rec;
    rec.iteration = iter + 1;
    rec.lr = lr;

    if (state.kind == "btrfly") {
      std::map<std::string, Tensor<T>> in;
      in[nets::kSagittalPort] = stack_images<T>(sag_imgs);
      in[nets::kCoronalPort] = stack_images<T>(cor_imgs);
      auto out = exec_btr->forward(in, state.params.at("btrfly"), true,
                                   dropout_seed);
      Tensor<T> gsag(out.at(nets::kSagittalOut).shape());
      Tensor<T> gcor(out.at(nets::kCoronalOut).shape());
      const ViewLossTerms lsag = batch_view_loss<T>(
          out.at(nets::kSagittalOut), scans, true, &gsag);
      const ViewLossTerms lcor = batch_view_loss<T>(
          out.at(nets::kCoronalOut), scans, false, &gcor);
      rec.loss_sag = lsag.total;
      rec.loss_cor = lcor.total;
      rec.task_loss = btrfly_total_loss(lsag, lcor);
      if (!std::isfinite(rec.task_loss))
        abort_diverged(state, cfg.run_dir, iter);
      nets::NetworkParams<T> grads;
      std::map<std::string, Tensor<T>> og;
      og[nets::kSagittalOut] = std::move(gsag);
      og[nets::kCoronalOut] = std::move(gcor);
      exec_btr->backward(og, state.params.at("btrfly"), grads);
      state.optim.at("btrfly").step(state.params.at("btrfly"), grads, lr);
    } else {
      auto out_sag = exec_sag->forward(
          {{nets::kImagePort, stack_images<T>(sag_imgs)}},
          state.params.at("sag"), true, dropout_seed);
      auto out_cor = exec_cor->forward(
          {{nets::kImagePort, stack_images<T>(cor_imgs)}},
          state.params.at("cor"), true, mix(dropout_seed, 2));
      Tensor<T> gsag(out_sag.at(nets::kImageOut).shape());
      Tensor<T> gcor(out_cor.at(nets::kImageOut).shape());
      const ViewLossTerms lsag =
          batch_view_loss<T>(out_sag.at(nets::kImageOut), scans, true, &gsag);
      const ViewLossTerms lcor =
          batch_view_loss<T>(out_cor.at(nets::kImageOut), scans, false, &gcor);
      rec.loss_sag = lsag.total;
      rec.loss_cor = lcor.total;
      rec.task_loss = lsag.total + lcor.total;
      if (!std::isfinite(rec.task_loss))
        abort_diverged(state, cfg.run_dir, iter);
      nets::NetworkParams<T> grads_sag, grads_cor;
      std::map<std::string, Tensor<T>> og_sag, og_cor;
      og_sag[nets::kImageOut] = std::move(gsag);
      og_cor[nets::kImageOut] = std::move(gcor);
      exec_sag->backward(og_sag, state.params.at("sag"), grads_sag);
      exec_cor->backward(og_cor, state.params.at("cor"), grads_cor);
      state.optim.at("sag").step(state.params.at("sag"), grads_sag, lr);
      state.optim.at("cor").step(state.params.at("cor"), grads_cor, lr);
    }

    state.iteration = iter + 1;
    if (history) history->push_back(rec);
    if (metrics.is_open() && (rec.iteration % cfg.log_interval == 0 ||
                              rec.iteration == n_max)) {
      append_metrics(metrics, rec);
    }

    if (cfg.val_interval > 0 && !data.val.empty() &&
        (rec.iteration % cfg.val_interval == 0 || rec.iteration == n_max)) {
      const double vloss = validation_loss(data, state);
      if (metrics.is_open()) {
        metrics.precision(17);
        metrics << "# val " << rec.iteration << " " << vloss << "\n";
      }
      if (vloss < state.best_val_loss) {
        state.best_val_loss = vloss;
        state.best_val_iteration = rec.iteration;
        if (!cfg.run_dir.empty())
          state.save((fs::path(cfg.run_dir) / "best").string());
      }
    }
    if (cfg.checkpoint_interval > 0 && !cfg.run_dir.empty() &&
        rec.iteration % cfg.checkpoint_interval == 0 &&
        rec.iteration != n_max) {
      state.save((fs::path(cfg.run_dir) /
                  ("ckpt_" + std::to_string(rec.iteration)))
                     .string());
    }
  }

  if (!cfg.run_dir.empty())
    state.save((fs::path(cfg.run_dir) / "final").string());
  return state;
}

template <typename T>
TrainState<T> train_adversarial(const LoadedDataset<T>& data,
                                const nets::BtrflyConfig& btrfly_cfg,
                                const nets::DiscriminatorConfig& disc_cfg,
                                const TrainConfig& cfg,
                                const AdversarialConfig& adv,
                                std::vector<IterationRecord>* history,
                                TrainState<T>* resume_from) {
  cfg.opt.validate();
  adv.validate();
  if (data.train.empty()) throw ConfigError("no training scans");
  if (!cfg.run_dir.empty()) fs::create_directories(cfg.run_dir);

  TrainState<T> state;
  if (resume_from) {
    state = std::move(*resume_from);
  } else {
    state.kind = "btrfly-pe";
    state.data_rng = Rng(cfg.opt.seed);
    state.dropout_rng = Rng(mix(cfg.opt.seed, 0x5EEDu));
    state.specs["btrfly"] = nets::btrfly_spec(btrfly_cfg);
    state.params["btrfly"] =
        nets::init_params<T>(state.specs["btrfly"], cfg.init_seed);
    seed_background_bias(state.params["btrfly"], nets::kSagittalOut);
    seed_background_bias(state.params["btrfly"], nets::kCoronalOut);
    state.optim["btrfly"] =
        Adam<T>(cfg.opt.beta1, cfg.opt.beta2, cfg.opt.epsilon);
    // Both discriminators learn from scratch alongside the generator.
    state.specs["disc_sag"] = nets::discriminator_spec(disc_cfg);
    state.specs["disc_cor"] = state.specs["disc_sag"];
    state.params["disc_sag"] =
        nets::init_params<T>(state.specs["disc_sag"], mix(cfg.init_seed, 11));
    state.params["disc_cor"] =
        nets::init_params<T>(state.specs["disc_cor"], mix(cfg.init_seed, 12));
    state.optim["disc_sag"] =
        Adam<T>(cfg.opt.beta1, cfg.opt.beta2, cfg.opt.epsilon);
    state.optim["disc_cor"] =
        Adam<T>(cfg.opt.beta1, cfg.opt.beta2, cfg.opt.epsilon);
  }

  std::ofstream metrics;
  if (!cfg.run_dir.empty()) {
    const fs::path mpath = fs::path(cfg.run_dir) / "metrics.txt";
    const bool fresh = !fs::exists(mpath);
    metrics.open(mpath, std::ios::app);
    if (fresh) {
      const auto now = std::chrono::system_clock::to_time_t(
          std::chrono::system_clock::now());
      metrics << "# spinelab training log (btrfly-pe)\n";
      metrics << "# started " << now << "\n";
      metrics << metrics_header();
    }
  }

  nets::Executor<T> gexec(state.specs.at("btrfly"));
  nets::Executor<T> dexec_sag(state.specs.at("disc_sag"));
  nets::Executor<T> dexec_cor(state.specs.at("disc_cor"));

  const int64_t n_max = cfg.opt.max_iterations;
  while (state.iteration < n_max) {
    const int64_t iter = state.iteration;
    const double lr = lr_schedule(iter, cfg.opt);
    const auto picks =
        draw_batch<T>(state.data_rng, data.train, cfg.opt.batch_size);
    const uint64_t dropout_seed = state.dropout_rng.next_u64();
    const int64_t n = cfg.opt.batch_size;
    const double inv_n = 1.0 / static_cast<double>(n);

    std::vector<const ScanData<T>*> scans;
    std::vector<const Tensor<T>*> sag_imgs, cor_imgs;
    for (const auto& p : picks) {
      const ScanData<T>& s = data.train[static_cast<size_t>(p.scan)];
      scans.push_back(&s);
      sag_imgs.push_back(&s.sag.train_mips[static_cast<size_t>(p.aug)]);
      cor_imgs.push_back(&s.cor.train_mips[static_cast<size_t>(p.aug)]);
    }

    // (1) Generator forward on both views.
    std::map<std::string, Tensor<T>> in;
    in[nets::kSagittalPort] = stack_images<T>(sag_imgs);
    in[nets::kCoronalPort] = stack_images<T>(cor_imgs);
    auto gout =
        gexec.forward(in, state.params.at("btrfly"), true, dropout_seed);

    IterationRecord rec;
    rec.iteration = iter + 1;
    rec.lr = lr;

    // (2) Discriminator updates on (real, detached generated) stacks.
    auto update_disc = [&](bool sagittal) {
      nets::Executor<T>& dexec = sagittal ? dexec_sag : dexec_cor;
      const std::string dname = sagittal ? "disc_sag" : "disc_cor";
      const std::string out_port =
          sagittal ? nets::kSagittalOut : nets::kCoronalOut;
      nets::NetworkParams<T>& dparams = state.params.at(dname);

      const Tensor<T> real = stack_gt<T>(scans, sagittal);
      const Tensor<T> gen = lift_batch(gout.at(out_port));  // detached copy

      double mean_e_real = 0.0, mean_e_gen = 0.0;
      for (int step = 0; step < adv.discriminator_steps; ++step) {
        nets::NetworkParams<T> dgrads;
        // Real term pushes E(real) down.
        DiscriminatorPass<T> real_pass(dexec, dparams, real, adv.energy_norm);
        real_pass.backward(std::vector<double>(static_cast<size_t>(n), inv_n),
                           &dgrads);
        // Hinge pushes E(generated) up to the margin; subgradient at
        // E == m is 0.
        DiscriminatorPass<T> gen_pass(dexec, dparams, gen, adv.energy_norm);
        std::vector<double> hinge(static_cast<size_t>(n), 0.0);
        for (int64_t i = 0; i < n; ++i) {
          if (gen_pass.energies()[static_cast<size_t>(i)] < adv.margin)
            hinge[static_cast<size_t>(i)] = -inv_n;
        }
        gen_pass.backward(hinge, &dgrads);
        state.optim.at(dname).step(dparams, dgrads, lr);
        mean_e_real = real_pass.mean_energy();
        mean_e_gen = gen_pass.mean_energy();
      }
      if (sagittal) {
        rec.e_real_sag = mean_e_real;
        rec.e_gen_sag = mean_e_gen;
      } else {
        rec.e_real_cor = mean_e_real;
        rec.e_gen_cor = mean_e_gen;
      }
    };
    update_disc(true);
    update_disc(false);

    // (3) Generator update: task loss plus weighted generated energies
    // through the (frozen) updated discriminators.
    Tensor<T> gsag(gout.at(nets::kSagittalOut).shape());
    Tensor<T> gcor(gout.at(nets::kCoronalOut).shape());
    const ViewLossTerms lsag =
        batch_view_loss<T>(gout.at(nets::kSagittalOut), scans, true, &gsag);
    const ViewLossTerms lcor =
        batch_view_loss<T>(gout.at(nets::kCoronalOut), scans, false, &gcor);
    rec.loss_sag = lsag.total;
    rec.loss_cor = lcor.total;
    rec.task_loss = btrfly_total_loss(lsag, lcor);
    if (!std::isfinite(rec.task_loss)) abort_diverged(state, cfg.run_dir, iter);

    if (adv.adversarial_weight > 0.0) {
      auto add_adv_grad = [&](bool sagittal, Tensor<T>& gview) {
        nets::Executor<T>& dexec = sagittal ? dexec_sag : dexec_cor;
        const std::string dname = sagittal ? "disc_sag" : "disc_cor";
        nets::NetworkParams<T>& dparams = state.params.at(dname);
        const std::string out_port =
            sagittal ? nets::kSagittalOut : nets::kCoronalOut;
        const Tensor<T> gen = lift_batch(gout.at(out_port));
        DiscriminatorPass<T> pass(dexec, dparams, gen, adv.energy_norm);
        // D stays frozen here; only the input gradient flows back into G.
        const Tensor<T> gin = pass.backward(
            std::vector<double>(static_cast<size_t>(n),
                                adv.adversarial_weight * inv_n),
            nullptr, /*want_input_grads=*/true);
        for (int64_t i = 0; i < gview.numel(); ++i) gview[i] += gin[i];
      };
      add_adv_grad(true, gsag);
      add_adv_grad(false, gcor);
    }

    nets::NetworkParams<T> ggrads;
    std::map<std::string, Tensor<T>> og;
    og[nets::kSagittalOut] = std::move(gsag);
    og[nets::kCoronalOut] = std::move(gcor);
    gexec.backward(og, state.params.at("btrfly"), ggrads);
    state.optim.at("btrfly").step(state.params.at("btrfly"), ggrads, lr);

    state.iteration = iter + 1;
    if (history) history->push_back(rec);
    if (metrics.is_open() && (rec.iteration % cfg.log_interval == 0 ||
                              rec.iteration == n_max)) {
      append_metrics(metrics, rec);
    }

    if (cfg.val_interval > 0 && !data.val.empty() &&
        (rec.iteration % cfg.val_interval == 0 || rec.iteration == n_max)) {
      const double vloss = validation_loss(data, state);
      if (metrics.is_open()) {
        metrics.precision(17);
        metrics << "# val " << rec.iteration << " " << vloss << "\n";
      }
      if (vloss < state.best_val_loss) {
        state.best_val_loss = vloss;
        state.best_val_iteration = rec.iteration;
        if (!cfg.run_dir.empty())
          state.save((fs::path(cfg.run_dir) / "best").string());
      }
    }
    if (cfg.checkpoint_interval > 0 && !cfg.run_dir.empty() &&
        rec.iteration % cfg.checkpoint_interval == 0 &&
        rec.iteration != n_max) {
      state.save((fs::path(cfg.run_dir) /
                  ("ckpt_" + std::to_string(rec.iteration)))
                     .string());
    }
  }

  if (!cfg.run_dir.empty())
    state.save((fs::path(cfg.run_dir) / "final").string());
  return state;
}

template <typename T>
std::vector<eval::ScanPrediction> predict_split(
    const std::vector<ScanData<T>>& scans, TrainState<T>& state) {
  std::vector<eval::ScanPrediction> out;
  infer::Generator<T> gen =
      state.kind == "singleview"
          ? infer::Generator<T>::singleview_pair(
                state.specs.at("sag"), state.params.at("sag"),
                state.specs.at("cor"), state.params.at("cor"))
          : infer::Generator<T>::btrfly(state.specs.at("btrfly"),
                                        state.params.at("btrfly"));
  for (const auto& scan : scans) {
    prep::ProjectionImage sag_img, cor_img;
    sag_img.view = View::kSagittal;
    sag_img.spacing = scan.sag.spacing;
    sag_img.data = scan.sag.full_mip.template cast<double>();
    cor_img.view = View::kCoronal;
    cor_img.spacing = scan.cor.spacing;
    cor_img.data = scan.cor.full_mip.template cast<double>();
    auto [sag_pred, cor_pred] = gen.predict(sag_img, cor_img);
    eval::ScanPrediction sp;
    sp.scan_id = scan.id;
    sp.sag = std::move(sag_pred);
    sp.cor = std::move(cor_pred);
    sp.gt = scan.gt_centroids;
    out.push_back(std::move(sp));
  }
  return out;
}

double select_threshold(const std::vector<eval::ScanPrediction>& val_preds,
                        const std::vector<double>& grid,
                        std::vector<eval::PrPoint>* curve_out) {
  if (val_preds.empty())
    throw ConfigError("threshold selection needs a validation set");
  const auto curve = eval::pr_sweep(val_preds, grid);
  if (curve_out) *curve_out = curve;
  bool any_pred = false;
  double best_t = grid.front();
  double best_f1 = -1.0;
  for (const auto& p : curve) {
    if (p.total_predicted > 0) any_pred = true;
    if (p.f1 > best_f1) {  // strict: ties keep the smaller threshold
      best_f1 = p.f1;
      best_t = p.threshold;
    }
  }
  if (!any_pred) {
    std::cerr << "warning: no threshold in the grid yields any prediction; "
                 "returning 0\n";
    return 0.0;
  }
  return best_t;
}

template struct LoadedDataset<float>;
template struct LoadedDataset<double>;
template struct TrainState<float>;
template struct TrainState<double>;
template class DiscriminatorPass<float>;
template class DiscriminatorPass<double>;
template double validation_loss<float>(const LoadedDataset<float>&,
                                       TrainState<float>&);
template double validation_loss<double>(const LoadedDataset<double>&,
                                        TrainState<double>&);
template TrainState<float> train_plain<float>(
    const LoadedDataset<float>&, PlainKind, const nets::BtrflyConfig&,
    const nets::SingleViewConfig&, const TrainConfig&,
    std::vector<IterationRecord>*, TrainState<float>*);
template TrainState<double> train_plain<double>(
    const LoadedDataset<double>&, PlainKind, const nets::BtrflyConfig&,
    const nets::SingleViewConfig&, const TrainConfig&,
    std::vector<IterationRecord>*, TrainState<double>*);
template TrainState<float> train_adversarial<float>(
    const LoadedDataset<float>&, const nets::BtrflyConfig&,
    const nets::DiscriminatorConfig&, const TrainConfig&,
    const AdversarialConfig&, std::vector<IterationRecord>*,
    TrainState<float>*);
template TrainState<double> train_adversarial<double>(
    const LoadedDataset<double>&, const nets::BtrflyConfig&,
    const nets::DiscriminatorConfig&, const TrainConfig&,
    const AdversarialConfig&, std::vector<IterationRecord>*,
    TrainState<double>*);
template std::vector<eval::ScanPrediction> predict_split<float>(
    const std::vector<ScanData<float>>&, TrainState<float>&);
template std::vector<eval::ScanPrediction> predict_split<double>(
    const std::vector<ScanData<double>>&, TrainState<double>&);

}  // namespace spinelab::train
