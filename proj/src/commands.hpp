#pragma once

// Command implementations behind the CLI verbs. Each validates its inputs
// first, writes a resolved-config provenance file into output_dir, runs, and
// writes its artifacts. Errors are thrown (ConfigError/IoError/Error).

#include "config.hpp"
#include "eval.hpp"
#include "train.hpp"

namespace cmnas {

/// Phase 1: bi-level search. Writes arch.txt, search_log.csv, search.ckpt.
void cmd_search(const RunConfig& rc);
/// Phase 2: trains a fixed architecture chosen by retrain.scheme /
/// retrain.arch_file. Writes train_log.csv, retrain.ckpt.
void cmd_retrain(const RunConfig& rc);
/// Evaluates eval.checkpoint on the configured dataset and protocols.
/// Writes eval.csv with one section per direction.
void cmd_eval(const RunConfig& rc);
/// Trains and evaluates every enumerated manual scheme. Writes sweep.csv.
void cmd_sweep(const RunConfig& rc);
/// Writes the annotated bitstring of export.checkpoint to arch_export.txt.
void cmd_export_arch(const RunConfig& rc);

/// Rebuilds the exact network a checkpoint was written from, using the
/// resolved.* keys in its stored config text, and restores all state.
Network net_from_checkpoint(const Checkpoint& ck, BackboneConfig* cfg_out = nullptr);

}  // namespace cmnas
