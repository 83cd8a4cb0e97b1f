#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fesvibs/data.hpp"
#include "fesvibs/model.hpp"
#include "fesvibs/optim.hpp"
#include "fesvibs/privacy.hpp"
#include "fesvibs/protocol.hpp"

namespace fesvibs {

enum class TransportKind { kInProcess, kStream };

enum class DataSource { kSynthetic, kContainer };

struct SeedGroup {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t sampling = 3;
  std::uint64_t noise = 4;
};

struct ExperimentConfig {
  Variant variant = Variant::kFeSViBS;
  ModelConfig model;

  // [experiment]
  std::size_t rounds = 50;
  std::size_t unify_period = 2;
  std::size_t batch_size = 32;
  std::size_t eval_every = 1;  // evaluation also always runs at round R
  TransportKind transport = TransportKind::kInProcess;
  BodyAvgMode body_avg = BodyAvgMode::kIncludeRoundStart;
  bool independent_init = false;  // SViBS/SLViT/Local may opt out of the
                                  // server's common initialization
  bool weighted_fedavg = true;    // N_c weighting for the FedAvgMono baseline

  // [data]
  DataSource source = DataSource::kSynthetic;
  std::size_t train_samples = 1200;
  std::size_t test_samples = 400;
  double noise_sigma = 0.35;
  PartitionMode partition_mode = PartitionMode::kDirichlet;
  double alpha = 0.5;
  std::size_t n_clients = 6;
  std::string train_container;      // kContainer
  std::string test_container;       // kContainer
  std::string natural_index_file;   // kNatural

  AdamSettings optimizer;
  DpConfig dp;
  SeedGroup seeds;

  std::string out_dir = "out";
  bool emit_plots = false;

  // All violations at once; empty means valid.
  std::vector<std::string> check() const;
  void validate() const;  // throws ConfigError listing every failure

  // Canonical key=value serialization; hashing it identifies the effective
  // configuration regardless of file formatting.
  std::string canonical() const;
  std::uint32_t config_hash() const;
};

// Flat INI-style document: [section] headers, key = value lines, '#'
// comments. Unknown sections or keys are errors.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

std::string transport_name(TransportKind t);
TransportKind parse_transport(const std::string& s);

}  // namespace fesvibs
