#include "fesvibs/protocol.hpp"

#include <algorithm>

#include "fesvibs/ops.hpp"

namespace fesvibs {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kLocal: return "local";
    case Variant::kSLViT: return "slvit";
    case Variant::kFeSTA: return "festa";
    case Variant::kSViBS: return "svibs";
    case Variant::kFeSViBS: return "fesvibs";
    case Variant::kFedAvgMono: return "fedavg";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "local") return Variant::kLocal;
  if (s == "slvit") return Variant::kSLViT;
  if (s == "festa") return Variant::kFeSTA;
  if (s == "svibs") return Variant::kSViBS;
  if (s == "fesvibs") return Variant::kFeSViBS;
  if (s == "fedavg") return Variant::kFedAvgMono;
  throw ValidationError("unknown variant '" + s +
                        "' (expected local|slvit|festa|svibs|fesvibs|fedavg)");
}

std::uint32_t sample_block(Rng& rng, std::size_t limit, std::size_t blocks) {
  if (limit < 1) throw ValidationError("sample_block: limit must be >= 1");
  if (limit > blocks)
    throw ConfigError("sample_block: limit " + std::to_string(limit) +
                      " exceeds block count " + std::to_string(blocks));
  std::uniform_int_distribution<std::uint32_t> dist(
      1, static_cast<std::uint32_t>(limit));
  return dist(rng);
}

namespace {

void capture_grads(GradCapture* cap, const std::vector<NamedTensor>& named) {
  if (!cap) return;
  for (const auto& nt : named) {
    if (nt.tensor.has_grad()) (*cap)[nt.name] = nt.tensor.grad_copy();
  }
}

std::vector<std::vector<double>> snapshot_values(
    const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void restore_values(std::vector<Tensor>& ts,
                    const std::vector<std::vector<double>>& vals) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    auto dst = ts[i].mutable_data();
    std::copy(vals[i].begin(), vals[i].end(), dst.begin());
    ts[i].zero_grad();
  }
}

}  // namespace

// --- SplitClient -------------------------------------------------------------

SplitClient::SplitClient(int id, const ModelConfig& cfg, Variant variant,
                         HeadParams head, TailParams tail,
                         const AdamSettings& opt, DpConfig dp,
                         std::uint64_t noise_seed)
    : id_(id),
      cfg_(cfg),
      variant_(variant),
      head_(std::move(head)),
      tail_(std::move(tail)),
      head_opt_(opt, head_.tensors()),
      tail_opt_(opt, tail_.tensors()),
      dp_(dp),
      noise_rng_(make_rng(noise_seed)) {
  dp_.validate();
}

void SplitClient::expect(Phase phase, const char* what) const {
  if (phase_ != phase)
    throw ProtocolError("client " + std::to_string(id_) +
                        ": out-of-order message (" + what + ")");
}

void SplitClient::begin_round(std::uint32_t round) {
  expect(Phase::kIdle, "begin_round during an open batch");
  round_ = round;
  auto head_ts = head_.tensors();
  auto tail_ts = tail_.tensors();
  round_start_params_ = snapshot_values(head_ts);
  auto tail_vals = snapshot_values(tail_ts);
  round_start_params_.insert(round_start_params_.end(), tail_vals.begin(),
                             tail_vals.end());
  round_start_head_slots_ = head_opt_.snapshot_slots();
  round_start_tail_slots_ = tail_opt_.snapshot_slots();
}

void SplitClient::abort_round() {
  auto head_ts = head_.tensors();
  auto tail_ts = tail_.tensors();
  if (round_start_params_.size() != head_ts.size() + tail_ts.size())
    throw ProtocolError("client abort without a round snapshot");
  std::vector<std::vector<double>> head_vals(
      round_start_params_.begin(),
      round_start_params_.begin() + static_cast<long>(head_ts.size()));
  std::vector<std::vector<double>> tail_vals(
      round_start_params_.begin() + static_cast<long>(head_ts.size()),
      round_start_params_.end());
  restore_values(head_ts, head_vals);
  restore_values(tail_ts, tail_vals);
  head_opt_.restore_slots(round_start_head_slots_);
  tail_opt_.restore_slots(round_start_tail_slots_);
  phase_ = Phase::kIdle;
  pending_h_ = Tensor();
  pending_labels_.clear();
}

wire::Message SplitClient::begin_batch(std::uint32_t round,
                                       std::uint32_t batch,
                                       const TrainBatch& data) {
  expect(Phase::kIdle, "begin_batch");
  round_ = round;
  batch_ = batch;
  pending_labels_ = data.labels;
  pending_h_ = head_forward(head_, data.images, cfg_);

  Tensor upload;
  if (dp_.enabled) {
    upload = clip_and_noise(pending_h_, dp_, noise_rng_);
  } else {
    upload = pending_h_.detached();
  }
  phase_ = Phase::kAwaitToken;
  wire::SmashedUpload m;
  m.client = static_cast<std::uint32_t>(id_);
  m.round = round;
  m.batch = batch;
  m.h = upload;
  return m;
}

wire::Message SplitClient::on_token_down(const wire::Message& m) {
  expect(Phase::kAwaitToken, "token download");
  const Tensor* token = nullptr;
  std::uint32_t round = 0, batch = 0;
  if (const auto* p = std::get_if<wire::PseudoTokenDown>(&m)) {
    if (!variant_samples_blocks(variant_))
      throw ProtocolError("client: pseudo token on a cls-path variant");
    token = &p->b;
    round = p->round;
    batch = p->batch;
    last_sampled_block_ = static_cast<int>(p->sampled_block);
  } else if (const auto* c = std::get_if<wire::ClsTokenDown>(&m)) {
    if (variant_samples_blocks(variant_))
      throw ProtocolError("client: cls token on a sampling variant");
    token = &c->b;
    round = c->round;
    batch = c->batch;
  } else {
    throw ProtocolError(std::string("client: expected token download, got ") +
                        wire::message_type_name(m));
  }
  if (round != round_ || batch != batch_)
    throw ProtocolError("client: token for round " + std::to_string(round) +
                        " batch " + std::to_string(batch) +
                        ", expected round " + std::to_string(round_) +
                        " batch " + std::to_string(batch_));

  Tensor b_leaf = token->detached(/*requires_grad=*/true);
  Tensor logits = tail_forward(tail_, b_leaf);
  Tensor loss = cross_entropy(logits, pending_labels_);
  last_loss_ = loss.item();
  backward(loss);
  capture_grads(grad_capture, tail_.named("tail."));

  phase_ = Phase::kAwaitHeadGrad;
  wire::TailGradUp up;
  up.client = static_cast<std::uint32_t>(id_);
  up.round = round_;
  up.batch = batch_;
  up.grad = Tensor::from_data(b_leaf.shape(), b_leaf.grad_copy());
  return up;
}

void SplitClient::on_head_grad(const wire::Message& m) {
  expect(Phase::kAwaitHeadGrad, "head gradient");
  const auto* g = std::get_if<wire::HeadGradDown>(&m);
  if (!g)
    throw ProtocolError(std::string("client: expected head gradient, got ") +
                        wire::message_type_name(m));
  if (g->round != round_ || g->batch != batch_)
    throw ProtocolError("client: head gradient for wrong round/batch");
  if (g->grad.shape() != pending_h_.shape())
    throw DimensionError("client: head gradient " +
                         shape_str(g->grad.shape()) +
                         " does not match smashed shape " +
                         shape_str(pending_h_.shape()));

  backward(pending_h_,
           std::vector<double>(g->grad.data().begin(), g->grad.data().end()));
  capture_grads(grad_capture, head_.named("head."));

  head_opt_.step();
  tail_opt_.step();
  pending_h_ = Tensor();
  pending_labels_.clear();
  phase_ = Phase::kIdle;
}

wire::Message SplitClient::make_params_upload(std::uint32_t round) const {
  wire::UnifyBroadcast m;
  m.client = static_cast<std::uint32_t>(id_);
  m.round = round;
  for (const auto& t : head_.tensors()) m.head.push_back(t.detached());
  for (const auto& t : tail_.tensors()) m.tail.push_back(t.detached());
  return m;
}

void SplitClient::adopt_unified(const wire::Message& m) {
  const auto* u = std::get_if<wire::UnifyBroadcast>(&m);
  if (!u)
    throw ProtocolError(std::string("client: expected unify broadcast, got ") +
                        wire::message_type_name(m));
  auto head_ts = head_.tensors();
  auto tail_ts = tail_.tensors();
  if (u->head.size() != head_ts.size() || u->tail.size() != tail_ts.size())
    throw ProtocolError("client: unify broadcast group size mismatch");
  for (std::size_t i = 0; i < head_ts.size(); ++i) {
    if (u->head[i].shape() != head_ts[i].shape())
      throw ProtocolError("client: unified head parameter shape divergence");
    auto dst = head_ts[i].mutable_data();
    std::copy(u->head[i].data().begin(), u->head[i].data().end(), dst.begin());
  }
  for (std::size_t i = 0; i < tail_ts.size(); ++i) {
    if (u->tail[i].shape() != tail_ts[i].shape())
      throw ProtocolError("client: unified tail parameter shape divergence");
    auto dst = tail_ts[i].mutable_data();
    std::copy(u->tail[i].data().begin(), u->tail[i].data().end(), dst.begin());
  }
}

// --- SplitServer --------------------------------------------------------------

SplitServer::SplitServer(const ModelConfig& cfg, Variant variant,
                         BodyParams body, ProjectionParams proj,
                         const AdamSettings& opt, std::uint64_t sampling_seed,
                         BodyAvgMode avg_mode)
    : cfg_(cfg),
      variant_(variant),
      body_(std::move(body)),
      proj_(std::move(proj)),
      opt_(opt),
      sample_rng_(make_rng(sampling_seed)),
      avg_mode_(avg_mode) {
  if (!variant_is_split(variant_))
    throw ValidationError("split server: variant " + variant_name(variant_) +
                          " has no server role");
  proj_opt_ = std::make_unique<AdamOptimizer>(opt_, proj_.tensors());
}

void SplitServer::begin_round(std::uint32_t round,
                              const std::vector<int>& participants) {
  if (round_open_) throw ProtocolError("server: previous round still open");
  round_ = round;
  round_open_ = true;
  participants_ = participants;
  scratch_.clear();
  round_start_body_ = body_.clone();
  round_start_proj_ = snapshot_values(proj_.tensors());
  round_start_proj_slots_ = proj_opt_->snapshot_slots();
  unified_head_.clear();
  unified_tail_.clear();
}

SplitServer::ClientScratch& SplitServer::scratch_for(std::uint32_t client) {
  if (std::find(participants_.begin(), participants_.end(),
                static_cast<int>(client)) == participants_.end())
    throw ProtocolError("server: message from unknown client " +
                        std::to_string(client));
  auto it = scratch_.find(client);
  if (it != scratch_.end()) return it->second;

  ClientScratch s;
  if (variant_samples_blocks(variant_)) {
    s.sampled_block = forced_block
                          ? *forced_block
                          : sample_block(sample_rng_, cfg_.sample_limit,
                                         cfg_.blocks);
  }
  s.body = round_start_body_.clone();
  // Touched tensors only: blocks at or below the sampled depth, plus the
  // positional table, plus the cls token on the cls path. Fresh optimizer
  // state per round (local-update semantics of the round-end average).
  std::vector<Tensor> touched;
  const std::size_t depth =
      variant_samples_blocks(variant_) ? s.sampled_block : cfg_.blocks;
  for (std::size_t i = 0; i < depth; ++i) {
    auto ts = s.body.blocks[i].tensors();
    touched.insert(touched.end(), ts.begin(), ts.end());
  }
  if (!variant_samples_blocks(variant_)) touched.push_back(s.body.cls);
  if (cfg_.trainable_pos_embed) touched.push_back(s.body.pos);
  s.body_opt = std::make_unique<AdamOptimizer>(opt_, std::move(touched));
  return scratch_.emplace(client, std::move(s)).first->second;
}

std::optional<wire::Message> SplitServer::handle(const wire::Message& m) {
  if (!round_open_) throw ProtocolError("server: no round in progress");

  if (const auto* up = std::get_if<wire::SmashedUpload>(&m)) {
    auto& s = scratch_for(up->client);
    if (s.ended)
      throw ProtocolError("server: upload after RoundEnd from client " +
                          std::to_string(up->client));
    if (s.in_flight)
      throw ProtocolError("server: smashed upload while a batch is open");
    if (up->round != round_ || up->batch != s.next_batch)
      throw ProtocolError(
          "server: upload (round " + std::to_string(up->round) + ", batch " +
          std::to_string(up->batch) + ") violates monotone order, expected "
          "(round " + std::to_string(round_) + ", batch " +
          std::to_string(s.next_batch) + ")");

    s.h_leaf = up->h.detached(/*requires_grad=*/true);
    if (variant_samples_blocks(variant_)) {
      Tensor z = body_prefix_forward(s.body, s.h_leaf, s.sampled_block, cfg_);
      s.b_out = projection_forward(proj_, z, cfg_);
      s.in_flight = true;
      wire::PseudoTokenDown down;
      down.client = up->client;
      down.round = up->round;
      down.batch = up->batch;
      down.sampled_block = s.sampled_block;
      down.b = s.b_out.detached();
      return down;
    }
    s.b_out = body_full_cls_forward(s.body, s.h_leaf, cfg_);
    s.in_flight = true;
    wire::ClsTokenDown down;
    down.client = up->client;
    down.round = up->round;
    down.batch = up->batch;
    down.b = s.b_out.detached();
    return down;
  }

  if (const auto* tg = std::get_if<wire::TailGradUp>(&m)) {
    auto& s = scratch_for(tg->client);
    if (!s.in_flight)
      throw ProtocolError("server: tail gradient without a pending forward");
    if (tg->round != round_ || tg->batch != s.next_batch)
      throw ProtocolError("server: tail gradient for wrong round/batch");
    if (tg->grad.shape() != s.b_out.shape())
      throw DimensionError("server: tail gradient " +
                           shape_str(tg->grad.shape()) +
                           " does not match token shape " +
                           shape_str(s.b_out.shape()));

    backward(s.b_out, std::vector<double>(tg->grad.data().begin(),
                                          tg->grad.data().end()));
    if (grad_capture) {
      capture_grads(grad_capture, proj_.named("proj."));
      capture_grads(grad_capture, s.body.named("body."));
    }
    if (!freeze_projection) proj_opt_->step();
    for (auto& t : proj_.tensors()) t.zero_grad();
    s.body_opt->step();

    wire::HeadGradDown down;
    down.client = tg->client;
    down.round = tg->round;
    down.batch = tg->batch;
    down.grad = Tensor::from_data(s.h_leaf.shape(), s.h_leaf.grad_copy());
    s.h_leaf = Tensor();
    s.b_out = Tensor();
    s.in_flight = false;
    s.next_batch += 1;
    return down;
  }

  if (const auto* re = std::get_if<wire::RoundEnd>(&m)) {
    auto& s = scratch_for(re->client);
    if (s.in_flight)
      throw ProtocolError("server: RoundEnd with a batch in flight");
    if (re->round != round_)
      throw ProtocolError("server: RoundEnd for wrong round");
    s.ended = true;
    return std::nullopt;
  }

  if (const auto* ub = std::get_if<wire::UnifyBroadcast>(&m)) {
    auto& s = scratch_for(ub->client);
    s.uploaded_head = ub->head;
    s.uploaded_tail = ub->tail;
    s.uploaded_params = true;
    return std::nullopt;
  }

  throw ProtocolError(std::string("server: unexpected message ") +
                      wire::message_type_name(m));
}

bool SplitServer::round_complete() const {
  for (int c : participants_) {
    auto it = scratch_.find(static_cast<std::uint32_t>(c));
    if (it == scratch_.end() || !it->second.ended) return false;
  }
  return true;
}

void SplitServer::finish_round() {
  if (!round_open_) throw ProtocolError("server: no round to finish");
  if (!round_complete())
    throw ProtocolError("server: finish_round before all clients ended");

  std::vector<ClientBodyUpdate> updates;
  updates.reserve(participants_.size());
  for (int c : participants_) {
    const auto& s = scratch_.at(static_cast<std::uint32_t>(c));
    ClientBodyUpdate u;
    u.body = &s.body;
    if (variant_samples_blocks(variant_)) {
      u.prefix_len = s.sampled_block;
      u.cls_path = false;
    } else {
      u.prefix_len = static_cast<std::uint32_t>(cfg_.blocks);
      u.cls_path = true;
    }
    updates.push_back(u);
  }
  average_body(body_, round_start_body_, updates, avg_mode_);

  // FedAvg of uploaded heads/tails when every participant reported.
  bool all_uploaded = !participants_.empty();
  for (int c : participants_)
    all_uploaded =
        all_uploaded && scratch_.at(static_cast<std::uint32_t>(c)).uploaded_params;
  if (all_uploaded) {
    std::vector<std::vector<Tensor>> heads, tails;
    for (int c : participants_) {
      const auto& s = scratch_.at(static_cast<std::uint32_t>(c));
      heads.push_back(s.uploaded_head);
      tails.push_back(s.uploaded_tail);
    }
    unify_heads_tails(heads, tails, unified_head_, unified_tail_);
  }
  round_open_ = false;
}

void SplitServer::abort_round() {
  auto proj_ts = proj_.tensors();
  if (round_start_proj_.size() == proj_ts.size()) {
    restore_values(proj_ts, round_start_proj_);
    proj_opt_->restore_slots(round_start_proj_slots_);
  }
  if (round_start_body_.blocks.size() == body_.blocks.size()) {
    auto src = round_start_body_.tensors();
    auto dst = body_.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      auto d = dst[i].mutable_data();
      std::copy(src[i].data().begin(), src[i].data().end(), d.begin());
      dst[i].zero_grad();
    }
  }
  scratch_.clear();
  round_open_ = false;
}

wire::Message SplitServer::make_round_ack(int client, bool unify) const {
  if (unify) {
    if (unified_head_.empty() && unified_tail_.empty())
      throw ProtocolError("server: unify ack requested without uploads");
    wire::UnifyBroadcast m;
    m.client = 0;
    m.round = round_;
    m.head = unified_head_;
    m.tail = unified_tail_;
    return m;
  }
  wire::RoundEnd m;
  m.client = static_cast<std::uint32_t>(client);
  m.round = round_;
  return m;
}

int SplitServer::sampled_block_for(int client) const {
  if (!variant_samples_blocks(variant_)) return -1;
  auto it = scratch_.find(static_cast<std::uint32_t>(client));
  if (it == scratch_.end()) return -1;
  return static_cast<int>(it->second.sampled_block);
}

// --- aggregation ---------------------------------------------------------------

std::vector<std::vector<double>> average_tensor_lists(
    const std::vector<std::vector<Tensor>>& lists,
    const std::vector<double>* weights) {
  if (lists.empty())
    throw ProtocolError("average: no parameter lists provided");
  const std::size_t n_tensors = lists[0].size();
  double wsum = 0;
  if (weights) {
    if (weights->size() != lists.size())
      throw ProtocolError("average: weight count mismatch");
    for (double w : *weights) wsum += w;
    if (!(wsum > 0)) throw ProtocolError("average: weights must sum > 0");
  }
  std::vector<std::vector<double>> out(n_tensors);
  for (std::size_t t = 0; t < n_tensors; ++t) {
    const auto& shape = lists[0][t].shape();
    out[t].assign(lists[0][t].size(), 0.0);
    for (std::size_t c = 0; c < lists.size(); ++c) {
      if (lists[c].size() != n_tensors || lists[c][t].shape() != shape)
        throw ProtocolError("average: parameter shape divergence at tensor " +
                            std::to_string(t));
      const double w =
          weights ? (*weights)[c] / wsum : 1.0 / static_cast<double>(lists.size());
      auto src = lists[c][t].data();
      for (std::size_t i = 0; i < src.size(); ++i) out[t][i] += w * src[i];
    }
  }
  return out;
}

void unify_heads_tails(const std::vector<std::vector<Tensor>>& heads,
                       const std::vector<std::vector<Tensor>>& tails,
                       std::vector<Tensor>& mean_head,
                       std::vector<Tensor>& mean_tail) {
  auto h = average_tensor_lists(heads);
  auto t = average_tensor_lists(tails);
  mean_head.clear();
  mean_tail.clear();
  for (std::size_t i = 0; i < h.size(); ++i)
    mean_head.push_back(
        Tensor::from_data(heads[0][i].shape(), std::move(h[i])));
  for (std::size_t i = 0; i < t.size(); ++i)
    mean_tail.push_back(
        Tensor::from_data(tails[0][i].shape(), std::move(t[i])));
}

void average_body(BodyParams& target, const BodyParams& round_start,
                  const std::vector<ClientBodyUpdate>& updates,
                  BodyAvgMode mode) {
  if (updates.empty())
    throw ProtocolError("average_body: no client updates");
  const std::size_t blocks = round_start.blocks.size();
  const std::size_t per_block = round_start.blocks[0].tensors().size();
  const std::size_t total = blocks * per_block + 2;  // + cls + pos

  auto start_ts = round_start.tensors();
  auto target_ts = target.tensors();
  const double n = static_cast<double>(updates.size());

  for (std::size_t t = 0; t < total; ++t) {
    // Tensor t belongs to block t / per_block, or is cls (total-2) /
    // pos (total-1).
    auto touched = [&](const ClientBodyUpdate& u) {
      if (t == total - 1) return true;  // pos: updated on both paths
      if (t == total - 2) return u.cls_path;
      return t / per_block < u.prefix_len;
    };
    std::vector<double> acc(start_ts[t].size(), 0.0);
    std::size_t m = 0;
    for (const auto& u : updates) {
      if (u.body->blocks.size() != blocks)
        throw ProtocolError("average_body: body depth divergence");
      auto uts = u.body->tensors();
      if (uts[t].shape() != start_ts[t].shape())
        throw ProtocolError("average_body: shape divergence");
      const auto src = touched(u) ? uts[t].data() : start_ts[t].data();
      if (touched(u)) ++m;
      if (mode == BodyAvgMode::kUpdatersOnly && !touched(u)) continue;
      for (std::size_t i = 0; i < src.size(); ++i) acc[i] += src[i];
    }
    auto dst = target_ts[t].mutable_data();
    if (mode == BodyAvgMode::kUpdatersOnly) {
      if (m == 0) {
        std::copy(start_ts[t].data().begin(), start_ts[t].data().end(),
                  dst.begin());
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i)
          dst[i] = acc[i] / static_cast<double>(m);
      }
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = acc[i] / n;
    }
    target_ts[t].zero_grad();
  }
}

// --- LocalTrainer ----------------------------------------------------------------

LocalTrainer::LocalTrainer(int id, const ModelConfig& cfg, ModelParams params,
                           const AdamSettings& opt)
    : id_(id), cfg_(cfg), params_(std::move(params)),
      opt_(opt, params_.tensors()) {}

double LocalTrainer::train_batch(const TrainBatch& data) {
  Tensor h = head_forward(params_.head, data.images, cfg_);
  Tensor z = body_prefix_forward(params_.body, h, cfg_.blocks, cfg_);
  Tensor b = projection_forward(params_.proj, z, cfg_);
  Tensor logits = tail_forward(params_.tail, b);
  Tensor loss = cross_entropy(logits, data.labels);
  backward(loss);
  opt_.step();
  return loss.item();
}

}  // namespace fesvibs
