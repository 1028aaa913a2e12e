#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hica/adamw.hpp"
#include "hica/hierarchy.hpp"
#include "hica/metrics.hpp"
#include "hica/model.hpp"

namespace hica {

struct TrainConfig {
  // Desk-scale default. The reference setup trains a far larger model at
  // 1e-5; that value is selectable through the config file (see README).
  double learning_rate = 1e-3;
  int max_epochs = 30;
  int batch_size = 1;  // > 1 accumulates gradients before the step
  double p_drop = 0.1;
  uint64_t seed = 7;
  double weight_decay = 0.0;
  int patience = 5;
  double class_weight_max = 100.0;
  bool reorder_augment = true;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_report_accuracy = -1.0;  // -1 when the dataset has no val split
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_accuracy = -1.0;
  uint64_t rng_state = 0;
};

// Teacher-forcing loop: per epoch, augment + shuffle the gold-transcript
// samples, run featurize/align/route/loss/backward/adamw per sample
// (featurizers are frozen by construction - they own no parameters),
// validate autoregressively, early-stop on patience, and restore the
// best-validation parameters at the end.
TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg);

struct EvalOptions {
  std::optional<Split> split;  // nullopt = every report in the dataset
  MetricsOptions metrics;
  int threads = 1;  // report-level fan-out; result is order-deterministic
};

struct EvalResult {
  MetricsReport metrics;
  std::vector<PredictedReport> predictions;
};

// Autoregressive evaluation; gold answers are never fed as history.
EvalResult evaluate(Model& model, const Dataset& ds, const EvalOptions& opts = {});

// Binary checkpoint: magic "HICA", u32 version, dims header, named
// little-endian f64 arrays, train config, rng state, metrics history.
// Round-trips bitwise; load rejects magic/version mismatches.
void save_checkpoint(const std::string& path, Model& model, const TrainConfig& cfg,
                     const TrainResult& result);

struct Checkpoint {
  Model model;
  TrainConfig train_config;
  TrainResult result;
};

Checkpoint load_checkpoint(const std::string& path);

std::string history_to_json(const TrainResult& result);

}  // namespace hica
