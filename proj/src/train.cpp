#include "train.hpp"

#include <filesystem>

namespace cmnas {

namespace {

AdamConfig w_adam_config(const SearchSchedule& s) {
  AdamConfig c;
  c.lr = s.lr;
  c.beta1 = s.beta1;
  c.beta2 = s.beta2;
  c.weight_decay = s.weight_decay;
  return c;
}

AdamConfig alpha_adam_config(const SearchSchedule& s) {
  AdamConfig c;
  c.lr = s.alpha_lr;
  c.beta1 = s.beta1;
  c.beta2 = s.beta2;
  c.weight_decay = s.alpha_weight_decay;
  return c;
}

void add_losses(StepLosses& acc, const StepLosses& x) {
  acc.cls += x.cls;
  acc.triplet += x.triplet;
  acc.cmmd += x.cmmd;
  acc.cc += x.cc;
  acc.total += x.total;
}

StepLosses mean_losses(const StepLosses& acc, int n) {
  double inv = n > 0 ? 1.0 / n : 0.0;
  return {acc.cls * inv, acc.triplet * inv, acc.cmmd * inv, acc.cc * inv, acc.total * inv};
}

std::vector<double> share_probs(Network& net) {
  std::vector<double> out;
  for (const auto& a : arch_params(net))
    out.push_back(arch_probs_pair(a.tensor.values()[0], a.tensor.values()[1]).second);
  return out;
}

// Resumes net/opts/master from hooks.checkpoint_path when it exists.
// Returns the epoch to start at.
std::int64_t maybe_resume(const RunHooks& hooks, Network& net, Adam& w_opt, Adam* alpha_opt,
                          Rng& master, const std::string& expected_arch) {
  if (hooks.checkpoint_path.empty() || !std::filesystem::exists(hooks.checkpoint_path))
    return 0;
  Checkpoint c = load_checkpoint(hooks.checkpoint_path);
  if (c.config_text != hooks.config_text)
    throw Error("resume: checkpoint " + hooks.checkpoint_path +
                " was written by a different configuration");
  if (c.arch != expected_arch)
    throw Error("resume: checkpoint architecture '" + c.arch + "' does not match '" +
                expected_arch + "'");
  restore_network(c, net);
  restore_optimizer(c.w_opt, w_opt);
  if (alpha_opt) restore_optimizer(c.alpha_opt, *alpha_opt);
  master.deserialize(c.rng_state);
  return c.epoch;
}

void maybe_save(const RunHooks& hooks, Network& net, const Adam& w_opt, const Adam* alpha_opt,
                std::int64_t next_epoch, const std::string& arch, const Rng& master) {
  if (hooks.checkpoint_path.empty()) return;
  Checkpoint c = make_checkpoint(net, &w_opt, alpha_opt, next_epoch, arch, hooks.config_text,
                                 master.serialize());
  save_checkpoint(hooks.checkpoint_path, c);
}

}  // namespace

SearchResult run_search(const Dataset& data, BackboneConfig cfg, const SearchSchedule& sched,
                        const LossConfig& losses, int P, int K, double train_ratio,
                        std::uint64_t seed, const RunHooks& hooks) {
  if (cfg.norm_mode != NormMode::Searchable)
    throw Error("run_search: the backbone must be in searchable mode");
  validate_schedule(sched);
  validate_loss_config(losses);

  auto [wside, aside] = split_identities(data, train_ratio, sub_seed(seed, "search-split"));
  cfg.num_classes = wside.num_identities();
  cfg.input_resolution = data.cfg.resolution;

  Rng build(sub_seed(seed, "build"));
  SearchResult res;
  res.net = build_backbone(cfg, build);
  Adam w_opt(weight_params(res.net), w_adam_config(sched));
  Adam alpha_opt(arch_params(res.net), alpha_adam_config(sched));

  Rng master(sub_seed(seed, "epochs"));
  std::int64_t start = maybe_resume(hooks, res.net, w_opt, &alpha_opt, master, "searching");
  std::int64_t stop = sched.epochs;
  if (hooks.epoch_limit > 0) stop = std::min<std::int64_t>(stop, start + hooks.epoch_limit);

  for (std::int64_t e = start; e < stop; ++e) {
    w_opt.set_lr(lr_at_epoch(sched, static_cast<int>(e)));
    PKSampler ws(wside, P, K, master.next());
    PKSampler as(aside, P, K, master.next());
    int steps = ws.batches_per_epoch();
    StepLosses wsum, asum;
    for (int s = 0; s < steps; ++s) {
      ModalityBatch tb = ws.next();
      ModalityBatch vb = as.next();
      auto [tl, vl] = bilevel_step(res.net, w_opt, alpha_opt, tb, vb, losses);
      add_losses(wsum, tl);
      add_losses(asum, vl);
    }
    EpochLog row;
    row.epoch = static_cast<int>(e);
    row.train = mean_losses(wsum, steps);
    row.val = mean_losses(asum, steps);
    row.p_share = share_probs(res.net);
    res.log.push_back(std::move(row));
    maybe_save(hooks, res.net, w_opt, &alpha_opt, e + 1, "searching", master);
  }

  // Zero-epoch runs still leave a checkpoint so downstream commands can
  // always load the run's final state from disk.
  if (!hooks.checkpoint_path.empty() && !std::filesystem::exists(hooks.checkpoint_path))
    maybe_save(hooks, res.net, w_opt, &alpha_opt, start, "searching", master);

  res.bitstring = discretize(arch_params(res.net));
  res.completed = stop == sched.epochs;
  return res;
}

TrainResult run_train(const Dataset& data, BackboneConfig cfg, const SearchSchedule& sched,
                      const LossConfig& losses, int P, int K, std::uint64_t seed,
                      const std::string& arch_label, const RunHooks& hooks) {
  if (cfg.norm_mode == NormMode::Searchable)
    throw Error("run_train: searchable backbones are trained by run_search");
  validate_schedule(sched);
  validate_loss_config(losses);

  cfg.num_classes = data.num_identities();
  cfg.input_resolution = data.cfg.resolution;

  Rng build(sub_seed(seed, "build"));
  TrainResult res;
  res.net = build_backbone(cfg, build);
  Adam w_opt(weight_params(res.net), w_adam_config(sched));

  Rng master(sub_seed(seed, "epochs"));
  std::int64_t start = maybe_resume(hooks, res.net, w_opt, nullptr, master, arch_label);
  std::int64_t stop = sched.epochs;
  if (hooks.epoch_limit > 0) stop = std::min<std::int64_t>(stop, start + hooks.epoch_limit);

  for (std::int64_t e = start; e < stop; ++e) {
    w_opt.set_lr(lr_at_epoch(sched, static_cast<int>(e)));
    PKSampler ws(data, P, K, master.next());
    int steps = ws.batches_per_epoch();
    StepLosses sum;
    for (int s = 0; s < steps; ++s) {
      ModalityBatch b = ws.next();
      add_losses(sum, train_step(res.net, w_opt, b, losses));
    }
    EpochLog row;
    row.epoch = static_cast<int>(e);
    row.train = mean_losses(sum, steps);
    res.log.push_back(std::move(row));
    maybe_save(hooks, res.net, w_opt, nullptr, e + 1, arch_label, master);
  }

  if (!hooks.checkpoint_path.empty() && !std::filesystem::exists(hooks.checkpoint_path))
    maybe_save(hooks, res.net, w_opt, nullptr, start, arch_label, master);

  res.completed = stop == sched.epochs;
  return res;
}

}  // namespace cmnas
