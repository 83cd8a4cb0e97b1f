#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fesvibs/data.hpp"
#include "fesvibs/model.hpp"
#include "fesvibs/optim.hpp"
#include "fesvibs/privacy.hpp"
#include "fesvibs/wire.hpp"

namespace fesvibs {

// Protocol family:
//   Local      - each client trains its own full stack, no communication
//   SLViT      - U-shaped split learning over the cls-token path
//   FeSTA      - SLViT plus unifying rounds (head/tail FedAvg)
//   SViBS      - split learning with server-side block sampling and the
//                projection network, no federation
//   FeSViBS    - SViBS plus unifying rounds
//   FedAvgMono - full local stack, everything FedAvg'd every round
enum class Variant { kLocal, kSLViT, kFeSTA, kSViBS, kFeSViBS, kFedAvgMono };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);

inline bool variant_has_unify(Variant v) {
  return v == Variant::kFeSTA || v == Variant::kFeSViBS ||
         v == Variant::kFedAvgMono;
}
inline bool variant_samples_blocks(Variant v) {
  return v == Variant::kSViBS || v == Variant::kFeSViBS;
}
inline bool variant_is_split(Variant v) {
  return v == Variant::kSLViT || v == Variant::kFeSTA ||
         v == Variant::kSViBS || v == Variant::kFeSViBS;
}

// How blocks deeper than a client's sampled l enter the round-end body
// average: contribute the round-start value (default) or drop out of the
// mean entirely.
enum class BodyAvgMode { kIncludeRoundStart, kUpdatersOnly };

// Uniform block choice on {1..limit}.
std::uint32_t sample_block(Rng& rng, std::size_t limit, std::size_t blocks);

// Gradient capture hook for equivalence tests.
using GradCapture = std::map<std::string, std::vector<double>>;

// ---------------------------------------------------------------------------
// Client engine: owns theta_c / psi_c and drives one staged exchange per
// batch. Labels never leave this object.

class SplitClient {
 public:
  SplitClient(int id, const ModelConfig& cfg, Variant variant,
              HeadParams head, TailParams tail, const AdamSettings& opt,
              DpConfig dp, std::uint64_t noise_seed);

  // Round lifecycle: snapshot for rollback, then per batch the staged
  // sequence begin_batch -> on_token_down -> on_head_grad.
  void begin_round(std::uint32_t round);
  void abort_round();

  wire::Message begin_batch(std::uint32_t round, std::uint32_t batch,
                            const TrainBatch& data);
  wire::Message on_token_down(const wire::Message& m);
  void on_head_grad(const wire::Message& m);

  wire::Message make_params_upload(std::uint32_t round) const;
  void adopt_unified(const wire::Message& m);

  double last_loss() const { return last_loss_; }
  // Block the server sampled for this client's current round; -1 on
  // cls-path variants.
  int last_sampled_block() const { return last_sampled_block_; }
  int id() const { return id_; }
  const HeadParams& head() const { return head_; }
  const TailParams& tail() const { return tail_; }
  HeadParams& head() { return head_; }
  TailParams& tail() { return tail_; }

  GradCapture* grad_capture = nullptr;

 private:
  enum class Phase { kIdle, kAwaitToken, kAwaitHeadGrad };

  void expect(Phase phase, const char* what) const;

  int id_;
  ModelConfig cfg_;
  Variant variant_;
  HeadParams head_;
  TailParams tail_;
  AdamOptimizer head_opt_, tail_opt_;
  DpConfig dp_;
  Rng noise_rng_;

  Phase phase_ = Phase::kIdle;
  std::uint32_t round_ = 0, batch_ = 0;
  Tensor pending_h_;  // head output graph, kept for gradient injection
  std::vector<int> pending_labels_;
  double last_loss_ = 0;
  int last_sampled_block_ = -1;

  std::vector<std::vector<double>> round_start_params_;
  std::vector<AdamSlot> round_start_head_slots_, round_start_tail_slots_;
};

// ---------------------------------------------------------------------------
// Server engine: owns the body and projection network, samples blocks,
// accumulates per-client body updates from the shared round-start body and
// averages them at round end. pi is stepped immediately after every client
// batch, so within a round later clients see a fresher projection.

class SplitServer {
 public:
  SplitServer(const ModelConfig& cfg, Variant variant, BodyParams body,
              ProjectionParams proj, const AdamSettings& opt,
              std::uint64_t sampling_seed,
              BodyAvgMode avg_mode = BodyAvgMode::kIncludeRoundStart);

  void begin_round(std::uint32_t round, const std::vector<int>& participants);
  // Handles SmashedUpload and TailGradUp (returning the token / head-grad
  // reply), RoundEnd and client UnifyBroadcast uploads (returning nothing).
  std::optional<wire::Message> handle(const wire::Message& m);
  bool round_complete() const;
  void finish_round();
  void abort_round();
  // Round acknowledgement per client: UnifyBroadcast on unifying rounds
  // (after all clients uploaded), RoundEnd otherwise.
  wire::Message make_round_ack(int client, bool unify) const;

  int sampled_block_for(int client) const;  // -1 when not sampling
  const BodyParams& body() const { return body_; }
  const ProjectionParams& projection() const { return proj_; }
  BodyParams& body() { return body_; }
  ProjectionParams& projection() { return proj_; }

  // Test hooks.
  std::optional<std::uint32_t> forced_block;
  bool freeze_projection = false;
  GradCapture* grad_capture = nullptr;

 private:
  struct ClientScratch {
    std::uint32_t sampled_block = 0;  // 0 until drawn (cls path keeps 0)
    BodyParams body;                  // evolves from the round-start body
    std::unique_ptr<AdamOptimizer> body_opt;  // fresh per round
    Tensor h_leaf;  // upload leaf, target of d loss / d h
    Tensor b_out;   // token output graph, kept for backward
    std::uint32_t next_batch = 0;
    bool in_flight = false;  // between SmashedUpload and TailGradUp
    bool ended = false;
    std::vector<Tensor> uploaded_head, uploaded_tail;
    bool uploaded_params = false;
  };

  ClientScratch& scratch_for(std::uint32_t client);
  std::vector<Tensor> touched_body_tensors(const ClientScratch& s) const;

  ModelConfig cfg_;
  Variant variant_;
  BodyParams body_;
  ProjectionParams proj_;
  AdamSettings opt_;
  std::unique_ptr<AdamOptimizer> proj_opt_;  // persistent across rounds
  Rng sample_rng_;
  BodyAvgMode avg_mode_;

  std::uint32_t round_ = 0;
  bool round_open_ = false;
  std::vector<int> participants_;
  std::map<std::uint32_t, ClientScratch> scratch_;
  BodyParams round_start_body_;
  std::vector<std::vector<double>> round_start_proj_;
  std::vector<AdamSlot> round_start_proj_slots_;
  std::vector<Tensor> unified_head_, unified_tail_;
};

// ---------------------------------------------------------------------------
// Aggregation primitives

// Unweighted FedAvg of per-client parameter lists; every list must have
// identical shapes. Weighted form used by the classical FedAvg baseline.
std::vector<std::vector<double>> average_tensor_lists(
    const std::vector<std::vector<Tensor>>& lists,
    const std::vector<double>* weights = nullptr);

void unify_heads_tails(const std::vector<std::vector<Tensor>>& heads,
                       const std::vector<std::vector<Tensor>>& tails,
                       std::vector<Tensor>& mean_head,
                       std::vector<Tensor>& mean_tail);

struct ClientBodyUpdate {
  const BodyParams* body = nullptr;
  std::uint32_t prefix_len = 0;  // blocks 0..prefix_len-1 were updated
  bool cls_path = false;         // full depth plus the cls token
};

// Round-end body rule: for every tensor, clients that touched it contribute
// their post-update value and the rest contribute the round-start value
// (kIncludeRoundStart) or are excluded from the mean (kUpdatersOnly).
void average_body(BodyParams& target, const BodyParams& round_start,
                  const std::vector<ClientBodyUpdate>& updates,
                  BodyAvgMode mode);

// ---------------------------------------------------------------------------
// Local full-stack trainer (Local and FedAvgMono variants): head -> all L
// blocks -> projection -> tail as one graph.

class LocalTrainer {
 public:
  LocalTrainer(int id, const ModelConfig& cfg, ModelParams params,
               const AdamSettings& opt);

  double train_batch(const TrainBatch& data);
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  int id() const { return id_; }

 private:
  int id_;
  ModelConfig cfg_;
  ModelParams params_;
  AdamOptimizer opt_;
};

}  // namespace fesvibs
