#pragma once

// Epoch loops: the bi-level architecture search and plain training of fixed
// architectures, both with checkpoint/resume at epoch boundaries.

#include <string>
#include <vector>

#include "data.hpp"
#include "search.hpp"

namespace cmnas {

struct EpochLog {
  int epoch = 0;
  StepLosses train, val;        // means over the epoch's steps; val used by search only
  std::vector<double> p_share;  // per searchable site, share-branch probability
};

/// Optional persistence and early-exit knobs shared by both loops.
struct RunHooks {
  std::string checkpoint_path;  // empty disables checkpointing and resume
  std::string config_text;      // stored in checkpoints; resume requires equality
  int epoch_limit = 0;          // > 0: run at most this many epochs, then return
};

struct SearchResult {
  std::string bitstring;
  std::vector<EpochLog> log;  // rows for the epochs this call executed
  Network net;
  bool completed = true;  // false when epoch_limit stopped the run early
};

struct TrainResult {
  Network net;
  std::vector<EpochLog> log;
  bool completed = true;
};

/// Bi-level search. Splits data by identity (train_ratio for the w side, the
/// rest for the alpha side), then alternates w and alpha steps every batch.
/// cfg must be Searchable; its num_classes and input_resolution are taken
/// from the data. If hooks name an existing checkpoint, the run resumes from
/// it bit-exactly; each finished epoch overwrites the checkpoint.
SearchResult run_search(const Dataset& data, BackboneConfig cfg, const SearchSchedule& sched,
                        const LossConfig& losses, int P, int K, double train_ratio,
                        std::uint64_t seed, const RunHooks& hooks = {});

/// Plain training on the whole dataset for retrained, baseline, and manual
/// scheme networks. cfg must not be Searchable (no mixing arithmetic on the
/// trained path); num_classes and input_resolution are taken from the data.
/// alpha_* schedule fields are ignored. arch_label is stored in checkpoints.
TrainResult run_train(const Dataset& data, BackboneConfig cfg, const SearchSchedule& sched,
                      const LossConfig& losses, int P, int K, std::uint64_t seed,
                      const std::string& arch_label = "none", const RunHooks& hooks = {});

}  // namespace cmnas
