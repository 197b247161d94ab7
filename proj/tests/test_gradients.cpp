#include <doctest.h>

#include "fd_check.hpp"
#include "spinelab/train/loop.hpp"
#include "spinelab/train/losses.hpp"

using namespace fdcheck;
using namespace spinelab;

TEST_CASE("conv2d gradients (plain, dilated, strided)") {
  auto run = [](nets::LayerSpec l, std::vector<int64_t> shape, uint64_t seed) {
    const auto spec = single_layer_spec(std::move(l));
    const auto r = check_network_gradients(spec, {{"in0", shape}}, seed, false);
    CHECK(r.ok());
  };
  run(conv2d_layer(3, 2, 3, 1, 1), {2, 3, 5, 4}, 1);
  run(conv2d_layer(2, 3, 3, 2, 1), {1, 2, 7, 6}, 2);
  run(conv2d_layer(2, 2, 3, 1, 2), {1, 2, 8, 7}, 3);
}

TEST_CASE("conv3d gradients (direct and strided im2col paths)") {
  auto run = [](nets::LayerSpec l, std::vector<int64_t> shape, uint64_t seed) {
    const auto spec = single_layer_spec(std::move(l));
    const auto r = check_network_gradients(spec, {{"in0", shape}}, seed, false);
    CHECK(r.ok());
  };
  run(conv3d_layer(2, 2, 3, {1, 1, 1}, {1, 1, 1}), {1, 2, 4, 5, 4}, 4);
  run(conv3d_layer(1, 2, 5, {1, 2, 2}, {1, 1, 1}), {1, 1, 5, 8, 8}, 5);
  run(conv3d_layer(2, 1, 3, {1, 1, 1}, {1, 2, 2}), {1, 2, 4, 6, 6}, 6);
}

TEST_CASE("avg pool gradients") {
  nets::LayerSpec pool2;
  pool2.kind = nets::LayerKind::kAvgPool;
  pool2.window = {2, 2};
  CHECK(check_network_gradients(single_layer_spec(pool2),
                                {{"in0", {2, 2, 6, 4}}}, 7, false)
            .ok());
  nets::LayerSpec pool3;
  pool3.kind = nets::LayerKind::kAvgPool;
  pool3.window = {1, 2, 2};
  CHECK(check_network_gradients(single_layer_spec(pool3),
                                {{"in0", {1, 2, 3, 4, 6}}}, 8, false)
            .ok());
}

TEST_CASE("upsample gradients") {
  nets::LayerSpec up2;
  up2.kind = nets::LayerKind::kUpsample;
  up2.window = {2, 2};
  CHECK(check_network_gradients(single_layer_spec(up2),
                                {{"in0", {1, 3, 3, 4}}}, 9, false)
            .ok());
  nets::LayerSpec up3;
  up3.kind = nets::LayerKind::kUpsample;
  up3.window = {1, 2, 2};
  CHECK(check_network_gradients(single_layer_spec(up3),
                                {{"in0", {1, 1, 4, 3, 2}}}, 10, false)
            .ok());
}

TEST_CASE("concat gradients") {
  nets::LayerSpec cat;
  cat.kind = nets::LayerKind::kConcat;
  CHECK(check_network_gradients(
            single_layer_spec(cat, 2),
            {{"in0", {1, 2, 4, 4}}, {"in1", {1, 3, 4, 4}}}, 11, false)
            .ok());
}

TEST_CASE("batch norm gradients in train mode") {
  nets::LayerSpec bn;
  bn.kind = nets::LayerKind::kBatchNorm;
  bn.channels = 2;
  CHECK(check_network_gradients(single_layer_spec(bn),
                                {{"in0", {3, 2, 4, 3}}}, 12, true)
            .ok());
}

TEST_CASE("dropout gradients with a fixed mask") {
  nets::LayerSpec drop;
  drop.kind = nets::LayerKind::kDropout;
  drop.rate = 0.3;
  CHECK(check_network_gradients(single_layer_spec(drop),
                                {{"in0", {2, 2, 4, 4}}}, 13, true)
            .ok());
}

TEST_CASE("relu gradients away from the kink") {
  nets::LayerSpec relu;
  relu.kind = nets::LayerKind::kRelu;
  CHECK(check_network_gradients(single_layer_spec(relu),
                                {{"in0", {2, 2, 5, 5}}}, 14, false)
            .ok());
}

namespace {

/// Direct FD of a scalar double-valued functional over a parameter store.
template <typename Loss>
FdReport fd_over_params(nets::NetworkParams<double>& params,
                        nets::NetworkParams<double>& analytic, Loss&& loss) {
  FdReport report;
  const double atol = noise_floor(loss());
  for (auto& [layer, arrays] : analytic.store()) {
    for (auto& [name, g] : arrays) {
      Tensor<double>& p = params.at(layer, name);
      for (int64_t i = 0; i < g.numel(); ++i) {
        const double orig = p[i];
        p[i] = orig + kStep;
        const double lp = loss();
        p[i] = orig - kStep;
        const double lm = loss();
        p[i] = orig;
        const double numeric = (lp - lm) / (2.0 * kStep);
        ++report.checked;
        report.worst_abs_gap =
            std::max(report.worst_abs_gap, std::abs(g[i] - numeric));
        if (!close(g[i], numeric, atol)) ++report.failed;
      }
    }
  }
  return report;
}

nets::NetworkSpec tiny_autoencoder() {
  nets::NetworkSpec spec;
  nets::LayerSpec in;
  in.id = nets::kStackPort;
  in.kind = nets::LayerKind::kInput;
  spec.layers.push_back(in);
  nets::LayerSpec c1 = conv3d_layer(1, 2, 3, {1, 1, 1}, {1, 1, 1});
  c1.id = "enc";
  c1.inputs = {nets::kStackPort};
  spec.layers.push_back(c1);
  nets::LayerSpec r;
  r.id = "enc_relu";
  r.kind = nets::LayerKind::kRelu;
  r.inputs = {"enc"};
  spec.layers.push_back(r);
  nets::LayerSpec c2 = conv3d_layer(2, 1, 3, {1, 1, 1}, {1, 1, 1});
  c2.id = nets::kReconstructionOut;
  c2.inputs = {"enc_relu"};
  spec.layers.push_back(c2);
  spec.input_ports = {nets::kStackPort};
  spec.output_ports = {nets::kReconstructionOut};
  return spec;
}

}  // namespace

TEST_CASE("eq.1 total loss gradient matches finite differences") {
  Rng rng(20);
  for (int trial = 0; trial < 3; ++trial) {
    const int64_t C = 5, H = 4, W = 3;
    Tensor<double> gt({C, H, W}), pred({C, H, W}), wmap({H, W});
    for (int64_t i = 0; i < gt.numel(); ++i) gt[i] = rng.uniform();
    for (int64_t i = 0; i < pred.numel(); ++i) pred[i] = rng.normal();
    for (int64_t i = 0; i < wmap.numel(); ++i) wmap[i] = 0.2 + rng.uniform();

    Tensor<double> grad(pred.shape());
    train::btrfly_view_loss(gt, pred, wmap, &grad, 1.0);

    FdReport report;
    for (int64_t i = 0; i < pred.numel(); ++i) {
      const double orig = pred[i];
      pred[i] = orig + kStep;
      const double lp = train::btrfly_view_loss(gt, pred, wmap).total;
      pred[i] = orig - kStep;
      const double lm = train::btrfly_view_loss(gt, pred, wmap).total;
      pred[i] = orig;
      const double numeric = (lp - lm) / (2.0 * kStep);
      ++report.checked;
      if (!close(grad[i], numeric,
                 noise_floor(train::btrfly_view_loss(gt, pred, wmap).total)))
        ++report.failed;
    }
    CHECK(report.ok());
  }
}

TEST_CASE("eq.2 margin loss gradient w.r.t. discriminator parameters") {
  const nets::NetworkSpec spec = tiny_autoencoder();
  Rng rng(21);
  for (int trial = 0; trial < 4; ++trial) {
    auto params = nets::init_params<double>(spec, rng.next_u64());
    nets::Executor<double> exec(spec);
    Tensor<double> real({1, 1, 4, 5, 4}), gen({1, 1, 4, 5, 4});
    for (int64_t i = 0; i < real.numel(); ++i) real[i] = rng.uniform();
    for (int64_t i = 0; i < gen.numel(); ++i) gen[i] = rng.uniform();

    // Pick the margin to exercise both hinge branches well away from the
    // kink.
    const double e_gen0 =
        train::DiscriminatorPass<double>(exec, params, gen,
                                         nets::EnergyNorm::kMean)
            .mean_energy();
    const double margin = (trial % 2 == 0) ? e_gen0 * 1.7 + 0.05
                                           : std::max(e_gen0 * 0.5, 1e-3);

    // Analytic assembly, exactly as the training loop applies it.
    nets::NetworkParams<double> grads;
    {
      train::DiscriminatorPass<double> rp(exec, params, real,
                                          nets::EnergyNorm::kMean);
      rp.backward({1.0}, &grads);
      train::DiscriminatorPass<double> gp(exec, params, gen,
                                          nets::EnergyNorm::kMean);
      gp.backward({gp.energies()[0] < margin ? -1.0 : 0.0}, &grads);
    }

    auto loss = [&] {
      train::DiscriminatorPass<double> rp(exec, params, real,
                                          nets::EnergyNorm::kMean);
      train::DiscriminatorPass<double> gp(exec, params, gen,
                                          nets::EnergyNorm::kMean);
      return train::discriminator_loss(rp.energies()[0], gp.energies()[0],
                                       margin);
    };
    CHECK(fd_over_params(params, grads, loss).ok());
  }
}

TEST_CASE("eq.3 generator loss gradient w.r.t. generator parameters") {
  nets::BtrflyConfig gcfg;
  gcfg.arm_levels = 2;
  gcfg.base_width = 2;
  gcfg.output_channels = 4;
  gcfg.fused_convs = 1;
  gcfg.fusion_depth = 1;
  gcfg.dropout_rate = 0.2;
  const nets::NetworkSpec gspec = nets::btrfly_spec(gcfg);
  const nets::NetworkSpec dspec = tiny_autoencoder();
  const double alpha = 0.7;

  Rng rng(22);
  int done = 0;
  for (int attempt = 0; attempt < 60 && done < 2; ++attempt) {
    auto gparams = nets::init_params<double>(gspec, rng.next_u64());
    auto dparams_sag = nets::init_params<double>(dspec, rng.next_u64());
    auto dparams_cor = nets::init_params<double>(dspec, rng.next_u64());
    const uint64_t dropout_seed = rng.next_u64();

    const int64_t H = 8, W = 8;
    std::map<std::string, Tensor<double>> in;
    in[nets::kSagittalPort] = Tensor<double>({1, 1, H, W});
    in[nets::kCoronalPort] = Tensor<double>({1, 1, H, W});
    for (auto& [port, t] : in)
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();

    Tensor<double> gt_sag({4, H, W}), gt_cor({4, H, W}), wmap({H, W});
    for (int64_t i = 0; i < gt_sag.numel(); ++i) gt_sag[i] = rng.uniform();
    for (int64_t i = 0; i < gt_cor.numel(); ++i) gt_cor[i] = rng.uniform();
    for (int64_t i = 0; i < wmap.numel(); ++i) wmap[i] = 0.5 + rng.uniform();

    nets::Executor<double> gexec(gspec);
    nets::Executor<double> dexec_sag(dspec);
    nets::Executor<double> dexec_cor(dspec);

    // Reject instances whose relu pre-activations sit close enough to the
    // kink for the finite differences to cross it.
    {
      auto probe = gexec.forward(in, gparams, true, dropout_seed);
      Tensor<double> psag({1, 1, 4, H, W}), pcor({1, 1, 4, H, W});
      const Tensor<double>& os = probe.at(nets::kSagittalOut);
      const Tensor<double>& oc = probe.at(nets::kCoronalOut);
      std::copy(os.data(), os.data() + os.numel(), psag.data());
      std::copy(oc.data(), oc.data() + oc.numel(), pcor.data());
      dexec_sag.forward({{nets::kStackPort, psag}}, dparams_sag, false);
      dexec_cor.forward({{nets::kStackPort, pcor}}, dparams_cor, false);
      const double margin = std::min({min_relu_margin(gexec, gspec),
                                      min_relu_margin(dexec_sag, dspec),
                                      min_relu_margin(dexec_cor, dspec)});
      if (margin < 1e-4) continue;
    }
    ++done;

    // (1, C, H, W) batch-of-one output -> (1, 1, C, H, W) stack volume /
    // (C, H, W) plain stack.
    auto lift = [](const Tensor<double>& s) {
      Tensor<double> out({1, 1, s.dim(1), s.dim(2), s.dim(3)});
      std::copy(s.data(), s.data() + s.numel(), out.data());
      return out;
    };
    auto squeeze = [](const Tensor<double>& b) {
      Tensor<double> out({b.dim(1), b.dim(2), b.dim(3)});
      std::copy(b.data(), b.data() + b.numel(), out.data());
      return out;
    };

    auto loss = [&] {
      auto out = gexec.forward(in, gparams, true, dropout_seed);
      const Tensor<double> pred_sag = squeeze(out.at(nets::kSagittalOut));
      const Tensor<double> pred_cor = squeeze(out.at(nets::kCoronalOut));
      double total = 0.0;
      const auto t_sag = train::btrfly_view_loss(gt_sag, pred_sag, wmap);
      const auto t_cor = train::btrfly_view_loss(gt_cor, pred_cor, wmap);
      train::DiscriminatorPass<double> ps(dexec_sag, dparams_sag,
                                          lift(out.at(nets::kSagittalOut)),
                                          nets::EnergyNorm::kMean);
      train::DiscriminatorPass<double> pc(dexec_cor, dparams_cor,
                                          lift(out.at(nets::kCoronalOut)),
                                          nets::EnergyNorm::kMean);
      total += train::generator_loss(ps.energies()[0], t_sag.total, alpha);
      total += train::generator_loss(pc.energies()[0], t_cor.total, alpha);
      return total;
    };

    // Analytic: task gradient plus the energy gradient through each frozen
    // discriminator, then one generator backward.
    auto gout = gexec.forward(in, gparams, true, dropout_seed);
    Tensor<double> gsag(gout.at(nets::kSagittalOut).shape());
    Tensor<double> gcor(gout.at(nets::kCoronalOut).shape());
    {
      Tensor<double> task_sag({4, H, W}), task_cor({4, H, W});
      train::btrfly_view_loss(gt_sag, squeeze(gout.at(nets::kSagittalOut)),
                              wmap, &task_sag, 1.0);
      train::btrfly_view_loss(gt_cor, squeeze(gout.at(nets::kCoronalOut)),
                              wmap, &task_cor, 1.0);
      std::copy(task_sag.data(), task_sag.data() + task_sag.numel(),
                gsag.data());
      std::copy(task_cor.data(), task_cor.data() + task_cor.numel(),
                gcor.data());
      train::DiscriminatorPass<double> ps(dexec_sag, dparams_sag,
                                          lift(gout.at(nets::kSagittalOut)),
                                          nets::EnergyNorm::kMean);
      const Tensor<double> gin_sag = ps.backward({alpha}, nullptr, true);
      for (int64_t i = 0; i < gsag.numel(); ++i) gsag[i] += gin_sag[i];
      train::DiscriminatorPass<double> pc(dexec_cor, dparams_cor,
                                          lift(gout.at(nets::kCoronalOut)),
                                          nets::EnergyNorm::kMean);
      const Tensor<double> gin_cor = pc.backward({alpha}, nullptr, true);
      for (int64_t i = 0; i < gcor.numel(); ++i) gcor[i] += gin_cor[i];
    }
    nets::NetworkParams<double> ggrads;
    std::map<std::string, Tensor<double>> og;
    og[nets::kSagittalOut] = std::move(gsag);
    og[nets::kCoronalOut] = std::move(gcor);
    gexec.backward(og, gparams, ggrads);

    const FdReport report = fd_over_params(gparams, ggrads, loss);
    CHECK(report.checked > 500);
    CHECK(report.failed == 0);
  }
  CHECK(done == 2);  // kink-free instances were found
}
