#include "fesvibs/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fesvibs/log.hpp"
#include "fesvibs/ops.hpp"

#ifndef FESVIBS_BUILD_ID
#define FESVIBS_BUILD_ID "unknown"
#endif

namespace fesvibs {

namespace {

std::uint64_t client_data_seed(const ExperimentConfig& cfg, int client) {
  return derive_seed(cfg.seeds.data, 0xC11E27, static_cast<std::uint64_t>(client));
}

}  // namespace

RoundPlan make_round_plan(int round, const ExperimentConfig& cfg,
                          const std::vector<std::size_t>& shard_sizes) {
  RoundPlan plan;
  plan.round = round;
  plan.unify = variant_has_unify(cfg.variant) &&
               (cfg.variant == Variant::kFedAvgMono ||
                (cfg.unify_period > 0 &&
                 static_cast<std::size_t>(round) % cfg.unify_period == 0));
  for (std::size_t c = 0; c < shard_sizes.size(); ++c) {
    plan.participants.push_back(static_cast<int>(c));
    plan.batches.push_back(batch_indices(shard_sizes[c], cfg.batch_size,
                                         client_data_seed(cfg, static_cast<int>(c)),
                                         static_cast<std::uint64_t>(round)));
  }
  return plan;
}

namespace {

std::vector<int> predict(const std::function<Tensor(const Tensor&)>& forward,
                         const Dataset& test_set, std::size_t eval_batch) {
  NoGradGuard no_grad;
  std::vector<int> pred;
  pred.reserve(test_set.size());
  for (std::size_t pos = 0; pos < test_set.size(); pos += eval_batch) {
    std::vector<int> idx;
    for (std::size_t i = pos; i < std::min(test_set.size(), pos + eval_batch);
         ++i)
      idx.push_back(static_cast<int>(i));
    TrainBatch batch = gather_batch(test_set, idx);
    Tensor logits = forward(batch.images);
    const std::size_t k = logits.dim(1);
    auto lv = logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (lv[i * k + j] > lv[i * k + best]) best = j;
      pred.push_back(static_cast<int>(best));
    }
  }
  return pred;
}

}  // namespace

double evaluate_split(const HeadParams& head, const TailParams& tail,
                      const BodyParams& body, const ProjectionParams& proj,
                      Variant variant, const ModelConfig& cfg,
                      const Dataset& test_set, std::size_t eval_batch) {
  auto forward = [&](const Tensor& images) {
    Tensor h = head_forward(head, images, cfg);
    Tensor b;
    if (variant_samples_blocks(variant)) {
      Tensor z = body_prefix_forward(body, h, cfg.sample_limit, cfg);
      b = projection_forward(proj, z, cfg);
    } else {
      b = body_full_cls_forward(body, h, cfg);
    }
    return tail_forward(tail, b);
  };
  auto pred = predict(forward, test_set, eval_batch);
  return balanced_accuracy(test_set.labels, pred, test_set.classes);
}

double evaluate_local(const ModelParams& params, const ModelConfig& cfg,
                      const Dataset& test_set, std::size_t eval_batch) {
  auto forward = [&](const Tensor& images) {
    Tensor h = head_forward(params.head, images, cfg);
    Tensor z = body_prefix_forward(params.body, h, cfg.blocks, cfg);
    Tensor b = projection_forward(params.proj, z, cfg);
    return tail_forward(params.tail, b);
  };
  auto pred = predict(forward, test_set, eval_batch);
  return balanced_accuracy(test_set.labels, pred, test_set.classes);
}

MetricsRecord run_round(const RoundPlan& plan,
                        std::vector<SplitClient>& clients,
                        const std::vector<Dataset>& shards,
                        std::vector<Endpoint*> endpoints) {
  MetricsRecord record;
  record.round = plan.round;
  record.train_loss.assign(clients.size(), 0.0);
  record.sampled_block.assign(clients.size(), -1);

  for (int c : plan.participants)
    clients[static_cast<std::size_t>(c)].begin_round(
        static_cast<std::uint32_t>(plan.round));
  try {
    for (int c : plan.participants) {
      auto& client = clients[static_cast<std::size_t>(c)];
      Endpoint* ep = endpoints[static_cast<std::size_t>(c)];
      const auto& schedule = plan.batches[static_cast<std::size_t>(c)];
      double loss_sum = 0;
      for (std::size_t bi = 0; bi < schedule.size(); ++bi) {
        TrainBatch batch =
            gather_batch(shards[static_cast<std::size_t>(c)], schedule[bi]);
        ep->send(client.begin_batch(static_cast<std::uint32_t>(plan.round),
                                    static_cast<std::uint32_t>(bi), batch));
        wire::Message down = ep->receive();
        ep->send(client.on_token_down(down));
        wire::Message head_grad = ep->receive();
        client.on_head_grad(head_grad);
        loss_sum += client.last_loss();
      }
      record.train_loss[static_cast<std::size_t>(c)] =
          schedule.empty() ? 0.0
                           : loss_sum / static_cast<double>(schedule.size());
      record.sampled_block[static_cast<std::size_t>(c)] =
          client.last_sampled_block();
      if (plan.unify)
        ep->send(client.make_params_upload(
            static_cast<std::uint32_t>(plan.round)));
      wire::RoundEnd done;
      done.client = static_cast<std::uint32_t>(c);
      done.round = static_cast<std::uint32_t>(plan.round);
      ep->send(done);
    }
    // Round barrier: the server acknowledges only after every client's
    // RoundEnd has been folded into the body average.
    for (int c : plan.participants) {
      wire::Message ack = endpoints[static_cast<std::size_t>(c)]->receive();
      if (plan.unify)
        clients[static_cast<std::size_t>(c)].adopt_unified(ack);
      else if (!std::holds_alternative<wire::RoundEnd>(ack))
        throw ProtocolError(std::string("client: expected RoundEnd ack, got ") +
                            wire::message_type_name(ack));
    }
  } catch (...) {
    for (int c : plan.participants)
      clients[static_cast<std::size_t>(c)].abort_round();
    throw;
  }
  return record;
}

namespace {

struct PreparedData {
  Dataset train;
  Dataset test;
  std::vector<Dataset> shards;
};

std::vector<std::vector<int>> read_natural_indices(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("natural partition: cannot open " + path);
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ls(line);
    std::vector<int> idx;
    int v;
    while (ls >> v) idx.push_back(v);
    out.push_back(std::move(idx));
  }
  return out;
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  if (cfg.source == DataSource::kSynthetic) {
    d.train = generate_synthetic(cfg.model.classes, cfg.train_samples,
                                 cfg.model.image_channels,
                                 cfg.model.image_height, cfg.model.image_width,
                                 cfg.noise_sigma, cfg.seeds.data);
    d.test = generate_synthetic(cfg.model.classes, cfg.test_samples,
                                cfg.model.image_channels,
                                cfg.model.image_height, cfg.model.image_width,
                                cfg.noise_sigma,
                                derive_seed(cfg.seeds.data, 0x7E57));
  } else {
    d.train = load_container(cfg.train_container);
    d.test = load_container(cfg.test_container);
    if (d.train.classes != cfg.model.classes ||
        d.train.images.dim(1) != cfg.model.image_channels ||
        d.train.images.dim(2) != cfg.model.image_height ||
        d.train.images.dim(3) != cfg.model.image_width)
      throw ConfigError("container shape/classes do not match model config");
  }
  PartitionSpec spec;
  spec.mode = cfg.partition_mode;
  spec.n_clients = cfg.n_clients;
  spec.alpha = cfg.alpha;
  spec.seed = cfg.seeds.data;
  if (cfg.partition_mode == PartitionMode::kNatural)
    spec.natural_indices = read_natural_indices(cfg.natural_index_file);
  d.shards = partition(d.train, spec);
  return d;
}

bool eval_this_round(const ExperimentConfig& cfg, int round) {
  return static_cast<std::size_t>(round) % cfg.eval_every == 0 ||
         round == static_cast<int>(cfg.rounds);
}

Checkpoint assemble_split_checkpoint(const ExperimentConfig& cfg,
                                     const std::vector<SplitClient>& clients,
                                     const BodyParams& body,
                                     const ProjectionParams& proj) {
  Checkpoint ckpt;
  ckpt.variant = cfg.variant;
  ckpt.model = cfg.model;
  ckpt.n_clients = clients.size();
  for (const auto& client : clients) {
    const std::string p = "client" + std::to_string(client.id()) + ".";
    for (auto& nt : client.head().named(p + "head.")) ckpt.tensors.push_back(nt);
    for (auto& nt : client.tail().named(p + "tail.")) ckpt.tensors.push_back(nt);
  }
  for (auto& nt : body.named("server.body.")) ckpt.tensors.push_back(nt);
  for (auto& nt : proj.named("server.proj.")) ckpt.tensors.push_back(nt);
  return ckpt;
}

Checkpoint assemble_local_checkpoint(const ExperimentConfig& cfg,
                                     const std::vector<LocalTrainer>& trainers) {
  Checkpoint ckpt;
  ckpt.variant = cfg.variant;
  ckpt.model = cfg.model;
  ckpt.n_clients = trainers.size();
  for (const auto& t : trainers) {
    const std::string p = "client" + std::to_string(t.id()) + ".";
    for (auto& nt : t.params().named(p)) ckpt.tensors.push_back(nt);
  }
  return ckpt;
}

ExperimentResult run_local_family(const ExperimentConfig& cfg,
                                  const PreparedData& data) {
  std::vector<LocalTrainer> trainers;
  std::vector<double> shard_weights;
  for (std::size_t c = 0; c < cfg.n_clients; ++c) {
    ModelParams params =
        cfg.independent_init
            ? init_params(cfg.model,
                          derive_seed(cfg.seeds.init, 0xC0 + c))
            : init_params(cfg.model, cfg.seeds.init).clone();
    trainers.emplace_back(static_cast<int>(c), cfg.model, std::move(params),
                          cfg.optimizer);
    shard_weights.push_back(static_cast<double>(data.shards[c].size()));
  }

  ExperimentResult result;
  for (int r = 1; r <= static_cast<int>(cfg.rounds); ++r) {
    MetricsRecord record;
    record.round = r;
    record.train_loss.assign(cfg.n_clients, 0.0);
    record.sampled_block.assign(cfg.n_clients, -1);
    for (std::size_t c = 0; c < cfg.n_clients; ++c) {
      auto schedule =
          batch_indices(data.shards[c].size(), cfg.batch_size,
                        client_data_seed(cfg, static_cast<int>(c)),
                        static_cast<std::uint64_t>(r));
      double loss_sum = 0;
      for (const auto& idx : schedule)
        loss_sum += trainers[c].train_batch(gather_batch(data.shards[c], idx));
      record.train_loss[c] =
          schedule.empty() ? 0.0
                           : loss_sum / static_cast<double>(schedule.size());
    }

    if (cfg.variant == Variant::kFedAvgMono) {
      std::vector<std::vector<Tensor>> lists;
      for (auto& t : trainers) lists.push_back(t.params().tensors());
      auto mean = average_tensor_lists(
          lists, cfg.weighted_fedavg ? &shard_weights : nullptr);
      for (auto& t : trainers) {
        auto ts = t.params().tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) {
          auto dst = ts[i].mutable_data();
          std::copy(mean[i].begin(), mean[i].end(), dst.begin());
        }
      }
    }

    if (eval_this_round(cfg, r)) {
      for (std::size_t c = 0; c < cfg.n_clients; ++c)
        record.balanced_acc.push_back(
            evaluate_local(trainers[c].params(), cfg.model, data.test));
    }
    record.finalize_accuracy();
    result.records.push_back(std::move(record));
    log::info("round " + std::to_string(r) + "/" +
              std::to_string(cfg.rounds) + " done (" + variant_name(cfg.variant) +
              ")");
  }

  // Final (or initial, when rounds == 0) evaluation for the summary.
  result.final_per_client.clear();
  for (std::size_t c = 0; c < cfg.n_clients; ++c)
    result.final_per_client.push_back(
        evaluate_local(trainers[c].params(), cfg.model, data.test));
  result.checkpoint = assemble_local_checkpoint(cfg, trainers);
  return result;
}

ExperimentResult run_split_family(const ExperimentConfig& cfg,
                                  const PreparedData& data) {
  ModelParams server_init = init_params(cfg.model, cfg.seeds.init);
  std::vector<SplitClient> clients;
  clients.reserve(cfg.n_clients);
  for (std::size_t c = 0; c < cfg.n_clients; ++c) {
    HeadParams head =
        cfg.independent_init
            ? init_head(cfg.model, derive_seed(cfg.seeds.init, 0xA0 + c))
            : server_init.head.clone();
    TailParams tail =
        cfg.independent_init
            ? init_tail(cfg.model, derive_seed(cfg.seeds.init, 0xB0 + c))
            : server_init.tail.clone();
    clients.emplace_back(static_cast<int>(c), cfg.model, cfg.variant,
                         std::move(head), std::move(tail), cfg.optimizer,
                         cfg.dp, derive_seed(cfg.seeds.noise, c));
  }
  SplitServer server(cfg.model, cfg.variant, server_init.body.clone(),
                     server_init.proj.clone(), cfg.optimizer,
                     cfg.seeds.sampling, cfg.body_avg);

  // Transport: one endpoint pair per client; the server pump owns its side.
  std::vector<std::unique_ptr<Endpoint>> client_eps, server_eps;
  std::unique_ptr<StreamListener> listener;
  if (cfg.transport == TransportKind::kStream) {
    listener = std::make_unique<StreamListener>(0);
    for (std::size_t c = 0; c < cfg.n_clients; ++c) {
      // Sequential connect/accept keeps the accept order equal to the
      // client order.
      client_eps.push_back(stream_connect("127.0.0.1", listener->port()));
      server_eps.push_back(listener->accept());
    }
  } else {
    for (std::size_t c = 0; c < cfg.n_clients; ++c) {
      auto [a, b] = channel_pair();
      client_eps.push_back(std::move(a));
      server_eps.push_back(std::move(b));
    }
  }

  std::vector<std::size_t> shard_sizes;
  for (const auto& s : data.shards) shard_sizes.push_back(s.size());

  std::exception_ptr server_error;
  std::thread server_thread([&] {
    try {
      for (int r = 1; r <= static_cast<int>(cfg.rounds); ++r) {
        RoundPlan plan = make_round_plan(r, cfg, shard_sizes);
        server.begin_round(static_cast<std::uint32_t>(r), plan.participants);
        try {
          // Pinned service order: client 0's whole schedule, then client 1,
          // ... so projection updates land in a deterministic order.
          for (int c : plan.participants) {
            Endpoint* ep = server_eps[static_cast<std::size_t>(c)].get();
            for (;;) {
              wire::Message m = ep->receive();
              const bool is_round_end =
                  std::holds_alternative<wire::RoundEnd>(m);
              auto reply = server.handle(m);
              if (reply) ep->send(*reply);
              if (is_round_end) break;
            }
          }
          server.finish_round();
        } catch (...) {
          server.abort_round();
          throw;
        }
        for (int c : plan.participants)
          server_eps[static_cast<std::size_t>(c)]->send(
              server.make_round_ack(c, plan.unify));
      }
    } catch (...) {
      server_error = std::current_exception();
      for (auto& ep : server_eps) ep->close();
    }
  });

  ExperimentResult result;
  std::exception_ptr client_error;
  try {
    std::vector<Endpoint*> eps;
    for (auto& ep : client_eps) eps.push_back(ep.get());
    for (int r = 1; r <= static_cast<int>(cfg.rounds); ++r) {
      RoundPlan plan = make_round_plan(r, cfg, shard_sizes);
      MetricsRecord record = run_round(plan, clients, data.shards, eps);
      if (eval_this_round(cfg, r)) {
        for (const auto& client : clients)
          record.balanced_acc.push_back(
              evaluate_split(client.head(), client.tail(), server.body(),
                             server.projection(), cfg.variant, cfg.model,
                             data.test));
      }
      record.finalize_accuracy();
      result.records.push_back(std::move(record));
      log::info("round " + std::to_string(r) + "/" +
                std::to_string(cfg.rounds) + " done (" +
                variant_name(cfg.variant) + ")");
    }
  } catch (...) {
    client_error = std::current_exception();
    for (auto& ep : client_eps) ep->close();
  }
  server_thread.join();
  if (server_error) std::rethrow_exception(server_error);
  if (client_error) std::rethrow_exception(client_error);

  for (const auto& client : clients)
    result.final_per_client.push_back(
        evaluate_split(client.head(), client.tail(), server.body(),
                       server.projection(), cfg.variant, cfg.model,
                       data.test));
  result.checkpoint =
      assemble_split_checkpoint(cfg, clients, server.body(),
                                server.projection());
  return result;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  PreparedData data = prepare_data(cfg);

  ExperimentResult result = variant_is_split(cfg.variant)
                                ? run_split_family(cfg, data)
                                : run_local_family(cfg, data);

  double mean = 0;
  for (double a : result.final_per_client) mean += a;
  mean /= static_cast<double>(result.final_per_client.size());
  double var = 0;
  for (double a : result.final_per_client) var += (a - mean) * (a - mean);
  var /= static_cast<double>(result.final_per_client.size());
  result.final_mean = mean;
  result.final_std = std::sqrt(var);

  if (cfg.source == DataSource::kSynthetic) {
    auto pred = nearest_centroid_predict(data.train, data.test);
    result.centroid_baseline =
        balanced_accuracy(data.test.labels, pred, data.test.classes);
  }
  return result;
}

std::vector<std::string> write_outputs(const ExperimentResult& result,
                                       const ExperimentConfig& cfg,
                                       const std::string& dir,
                                       bool emit_plots) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output dir " + dir + ": " + ec.message());

  std::vector<std::string> created;
  auto write_file = [&](const std::string& name, const std::string& content) {
    const std::string path = (fs::path(dir) / name).string();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << content;
    if (!f) throw IoError("short write to " + path);
    created.push_back(path);
  };

  write_file("metrics.csv", metrics_csv(result.records));

  nlohmann::json summary;
  summary["schema_version"] = 1;
  summary["build_id"] = FESVIBS_BUILD_ID;
  {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&tt, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    summary["generated_at"] = buf;
  }
  {
    nlohmann::json conf = nlohmann::json::object();
    std::istringstream is(cfg.canonical());
    std::string line;
    while (std::getline(is, line)) {
      auto eq = line.find('=');
      if (eq != std::string::npos)
        conf[line.substr(0, eq)] = line.substr(eq + 1);
    }
    summary["config"] = conf;
  }
  {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", cfg.config_hash());
    summary["config_hash"] = buf;
  }
  summary["rounds"] = cfg.rounds;
  summary["variant"] = variant_name(cfg.variant);
  summary["final"] = {
      {"per_client", result.final_per_client},
      {"mean", result.final_mean},
      {"std", result.final_std},
  };
  if (result.centroid_baseline)
    summary["centroid_baseline"] = *result.centroid_baseline;
  else
    summary["centroid_baseline"] = nullptr;
  write_file("summary.json", summary.dump(2) + "\n");

  {
    const std::string path = (fs::path(dir) / "final.fsvc").string();
    save_checkpoint(result.checkpoint, path);
    created.push_back(path);
  }
  if (emit_plots)
    write_file("learning_curve.svg", learning_curve_svg(result.records));
  return created;
}

}  // namespace fesvibs
