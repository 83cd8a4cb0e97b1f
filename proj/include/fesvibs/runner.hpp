#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fesvibs/checkpoint.hpp"
#include "fesvibs/config.hpp"
#include "fesvibs/data.hpp"
#include "fesvibs/metrics.hpp"
#include "fesvibs/protocol.hpp"
#include "fesvibs/transport.hpp"

namespace fesvibs {

struct RoundPlan {
  int round = 1;
  bool unify = false;
  std::vector<int> participants;
  std::vector<std::vector<std::vector<int>>> batches;  // [client][step][idx]
};

RoundPlan make_round_plan(int round, const ExperimentConfig& cfg,
                          const std::vector<std::size_t>& shard_sizes);

// Split-variant evaluation path: sampling variants read features from the
// deepest sampled block (l = S); cls variants use the final cls token.
double evaluate_split(const HeadParams& head, const TailParams& tail,
                      const BodyParams& body, const ProjectionParams& proj,
                      Variant variant, const ModelConfig& cfg,
                      const Dataset& test_set, std::size_t eval_batch = 256);

double evaluate_local(const ModelParams& params, const ModelConfig& cfg,
                      const Dataset& test_set, std::size_t eval_batch = 256);

// Drives every client of one round over the transport (the server pump runs
// concurrently): full local epoch per client in id order, params upload and
// RoundEnd, then the round barrier and optional unified-parameter adoption.
// Any failure rolls the clients back to round-start parameters and
// rethrows.
MetricsRecord run_round(const RoundPlan& plan,
                        std::vector<SplitClient>& clients,
                        const std::vector<Dataset>& shards,
                        std::vector<Endpoint*> endpoints);

struct ExperimentResult {
  std::vector<MetricsRecord> records;
  std::vector<double> final_per_client;
  double final_mean = 0;
  double final_std = 0;
  // Pixel-space nearest-centroid baseline on the same train/test split
  // (synthetic runs only).
  std::optional<double> centroid_baseline;
  Checkpoint checkpoint;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Writes metrics.csv, summary.json, final.fsvc (and learning_curve.svg when
// requested) under `dir`; returns the created paths.
std::vector<std::string> write_outputs(const ExperimentResult& result,
                                       const ExperimentConfig& cfg,
                                       const std::string& dir,
                                       bool emit_plots);

}  // namespace fesvibs
