#include "fesvibs/config.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fesvibs {

std::string transport_name(TransportKind t) {
  return t == TransportKind::kInProcess ? "inproc" : "stream";
}

TransportKind parse_transport(const std::string& s) {
  if (s == "inproc") return TransportKind::kInProcess;
  if (s == "stream") return TransportKind::kStream;
  throw ValidationError("unknown transport '" + s +
                        "' (expected inproc|stream)");
}

std::vector<std::string> ExperimentConfig::check() const {
  std::vector<std::string> bad = model.check();
  if (rounds > 1000000) bad.push_back("rounds is implausibly large");
  if (unify_period < 1) bad.push_back("unify_period must be >= 1");
  if (batch_size < 1) bad.push_back("batch_size must be >= 1");
  if (eval_every < 1) bad.push_back("eval_every must be >= 1");
  if (n_clients < 1) bad.push_back("n_clients must be >= 1");
  if (source == DataSource::kSynthetic) {
    if (model.classes < 2)
      bad.push_back("synthetic data needs at least 2 classes");
    if (train_samples < n_clients)
      bad.push_back("train_samples must cover every client");
    if (test_samples < 1) bad.push_back("test_samples must be >= 1");
    if (noise_sigma < 0) bad.push_back("noise_sigma must be >= 0");
  } else {
    if (train_container.empty())
      bad.push_back("container source needs data.train_container");
    if (test_container.empty())
      bad.push_back("container source needs data.test_container");
  }
  if (independent_init && variant_has_unify(variant))
    bad.push_back("variant " + variant_name(variant) +
                  " requires a common server initialization");
  if (partition_mode == PartitionMode::kDirichlet && !(alpha > 0))
    bad.push_back("dirichlet partition needs alpha > 0");
  if (partition_mode == PartitionMode::kNatural && natural_index_file.empty())
    bad.push_back("natural partition needs data.natural_index_file");
  if (!(optimizer.lr > 0)) bad.push_back("optimizer lr must be > 0");
  if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 ||
      optimizer.beta2 >= 1)
    bad.push_back("optimizer betas must lie in [0,1)");
  if (!(optimizer.eps > 0)) bad.push_back("optimizer eps must be > 0");
  if (dp.enabled) {
    if (!(dp.epsilon > 0)) bad.push_back("dp epsilon must be > 0");
    if (!(dp.delta > 0) || !(dp.delta < 1))
      bad.push_back("dp delta must lie in (0,1)");
    if (!(dp.clip_norm > 0)) bad.push_back("dp clip_norm must be > 0");
  }
  if (out_dir.empty()) bad.push_back("output dir must not be empty");
  return bad;
}

void ExperimentConfig::validate() const {
  auto bad = check();
  if (bad.empty()) return;
  std::string msg = "invalid experiment config:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw ConfigError(msg);
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string partition_name(PartitionMode m) {
  switch (m) {
    case PartitionMode::kIid: return "iid";
    case PartitionMode::kDirichlet: return "dirichlet";
    case PartitionMode::kNatural: return "natural";
  }
  return "?";
}

PartitionMode parse_partition(const std::string& s) {
  if (s == "iid") return PartitionMode::kIid;
  if (s == "dirichlet") return PartitionMode::kDirichlet;
  if (s == "natural") return PartitionMode::kNatural;
  throw ValidationError("unknown partition mode '" + s + "'");
}

}  // namespace

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  os << "experiment.variant=" << variant_name(variant) << "\n"
     << "experiment.rounds=" << rounds << "\n"
     << "experiment.unify_period=" << unify_period << "\n"
     << "experiment.batch_size=" << batch_size << "\n"
     << "experiment.eval_every=" << eval_every << "\n"
     << "experiment.transport=" << transport_name(transport) << "\n"
     << "experiment.body_avg="
     << (body_avg == BodyAvgMode::kIncludeRoundStart ? "round_start"
                                                     : "updaters_only")
     << "\n"
     << "experiment.independent_init=" << (independent_init ? 1 : 0) << "\n"
     << "experiment.weighted_fedavg=" << (weighted_fedavg ? 1 : 0) << "\n"
     << "model.blocks=" << model.blocks << "\n"
     << "model.dim=" << model.dim << "\n"
     << "model.heads=" << model.heads << "\n"
     << "model.patch=" << model.patch << "\n"
     << "model.image_channels=" << model.image_channels << "\n"
     << "model.image_height=" << model.image_height << "\n"
     << "model.image_width=" << model.image_width << "\n"
     << "model.classes=" << model.classes << "\n"
     << "model.sample_limit=" << model.sample_limit << "\n"
     << "model.mlp_ratio=" << fmt_double(model.mlp_ratio) << "\n"
     << "model.head_channels=" << model.head_channels << "\n"
     << "model.trainable_pos_embed=" << (model.trainable_pos_embed ? 1 : 0)
     << "\n"
     << "model.proj_skip="
     << (model.proj_skip == SkipReducer::kMean ? "mean" : "sum") << "\n"
     << "data.source="
     << (source == DataSource::kSynthetic ? "synthetic" : "container") << "\n"
     << "data.train_samples=" << train_samples << "\n"
     << "data.test_samples=" << test_samples << "\n"
     << "data.noise_sigma=" << fmt_double(noise_sigma) << "\n"
     << "data.partition=" << partition_name(partition_mode) << "\n"
     << "data.alpha=" << fmt_double(alpha) << "\n"
     << "data.n_clients=" << n_clients << "\n"
     << "data.train_container=" << train_container << "\n"
     << "data.test_container=" << test_container << "\n"
     << "data.natural_index_file=" << natural_index_file << "\n"
     << "optim.lr=" << fmt_double(optimizer.lr) << "\n"
     << "optim.beta1=" << fmt_double(optimizer.beta1) << "\n"
     << "optim.beta2=" << fmt_double(optimizer.beta2) << "\n"
     << "optim.eps=" << fmt_double(optimizer.eps) << "\n"
     << "dp.enabled=" << (dp.enabled ? 1 : 0) << "\n"
     << "dp.epsilon=" << fmt_double(dp.epsilon) << "\n"
     << "dp.delta=" << fmt_double(dp.delta) << "\n"
     << "dp.clip_norm=" << fmt_double(dp.clip_norm) << "\n"
     << "seeds.data=" << seeds.data << "\n"
     << "seeds.init=" << seeds.init << "\n"
     << "seeds.sampling=" << seeds.sampling << "\n"
     << "seeds.noise=" << seeds.noise << "\n";
  return os.str();
}

std::uint32_t ExperimentConfig::config_hash() const {
  const std::string c = canonical();
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(c.data()),
              static_cast<uInt>(c.size())));
}

// --- parsing -----------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

struct ParsedFile {
  // section -> key -> value, plus line numbers for diagnostics
  std::map<std::string, std::map<std::string, std::string>> values;
};

ParsedFile parse_ini(const std::string& text,
                     std::vector<std::string>& errors) {
  ParsedFile out;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        errors.push_back("line " + std::to_string(lineno) +
                         ": malformed section header");
        continue;
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(lineno) +
                       ": expected key = value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) {
      errors.push_back("line " + std::to_string(lineno) +
                       ": key outside any [section]");
      continue;
    }
    if (out.values[section].count(key)) {
      errors.push_back("line " + std::to_string(lineno) + ": duplicate key " +
                       section + "." + key);
      continue;
    }
    out.values[section][key] = value;
  }
  return out;
}

class Binder {
 public:
  Binder(ParsedFile file, std::vector<std::string>& errors)
      : file_(std::move(file)), errors_(errors) {}

  template <typename F>
  void bind(const std::string& section, const std::string& key, F&& apply) {
    auto sit = file_.values.find(section);
    if (sit == file_.values.end()) return;
    auto kit = sit->second.find(key);
    if (kit == sit->second.end()) return;
    consumed_[section].insert(key);
    try {
      apply(kit->second);
    } catch (const std::exception& e) {
      errors_.push_back(section + "." + key + ": " + e.what());
    }
  }

  void report_unknown() {
    for (const auto& [section, kv] : file_.values) {
      if (!known_sections_.count(section)) {
        errors_.push_back("unknown section [" + section + "]");
        continue;
      }
      for (const auto& [key, value] : kv) {
        (void)value;
        if (!consumed_[section].count(key))
          errors_.push_back("unknown key " + section + "." + key);
      }
    }
  }

  void known_section(const std::string& s) { known_sections_.insert(s); }

 private:
  ParsedFile file_;
  std::vector<std::string>& errors_;
  std::map<std::string, std::set<std::string>> consumed_;
  std::set<std::string> known_sections_;
};

std::size_t to_size(const std::string& v) {
  std::size_t pos = 0;
  const long long n = std::stoll(v, &pos);
  if (pos != v.size() || n < 0) throw ValidationError("expected a non-negative integer");
  return static_cast<std::size_t>(n);
}

std::uint64_t to_u64(const std::string& v) {
  std::size_t pos = 0;
  const unsigned long long n = std::stoull(v, &pos);
  if (pos != v.size()) throw ValidationError("expected an unsigned integer");
  return static_cast<std::uint64_t>(n);
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  const double d = std::stod(v, &pos);
  if (pos != v.size()) throw ValidationError("expected a number");
  return d;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("expected a boolean");
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  std::vector<std::string> errors;
  Binder b(parse_ini(text, errors), errors);
  ExperimentConfig cfg;

  b.known_section("experiment");
  b.bind("experiment", "variant",
         [&](const std::string& v) { cfg.variant = parse_variant(v); });
  b.bind("experiment", "rounds",
         [&](const std::string& v) { cfg.rounds = to_size(v); });
  b.bind("experiment", "unify_period",
         [&](const std::string& v) { cfg.unify_period = to_size(v); });
  b.bind("experiment", "batch_size",
         [&](const std::string& v) { cfg.batch_size = to_size(v); });
  b.bind("experiment", "eval_every",
         [&](const std::string& v) { cfg.eval_every = to_size(v); });
  b.bind("experiment", "transport",
         [&](const std::string& v) { cfg.transport = parse_transport(v); });
  b.bind("experiment", "body_avg", [&](const std::string& v) {
    if (v == "round_start")
      cfg.body_avg = BodyAvgMode::kIncludeRoundStart;
    else if (v == "updaters_only")
      cfg.body_avg = BodyAvgMode::kUpdatersOnly;
    else
      throw ValidationError("expected round_start|updaters_only");
  });
  b.bind("experiment", "independent_init",
         [&](const std::string& v) { cfg.independent_init = to_bool(v); });
  b.bind("experiment", "weighted_fedavg",
         [&](const std::string& v) { cfg.weighted_fedavg = to_bool(v); });

  b.known_section("model");
  b.bind("model", "blocks",
         [&](const std::string& v) { cfg.model.blocks = to_size(v); });
  b.bind("model", "dim",
         [&](const std::string& v) { cfg.model.dim = to_size(v); });
  b.bind("model", "heads",
         [&](const std::string& v) { cfg.model.heads = to_size(v); });
  b.bind("model", "patch",
         [&](const std::string& v) { cfg.model.patch = to_size(v); });
  b.bind("model", "image_channels",
         [&](const std::string& v) { cfg.model.image_channels = to_size(v); });
  b.bind("model", "image_height",
         [&](const std::string& v) { cfg.model.image_height = to_size(v); });
  b.bind("model", "image_width",
         [&](const std::string& v) { cfg.model.image_width = to_size(v); });
  b.bind("model", "classes",
         [&](const std::string& v) { cfg.model.classes = to_size(v); });
  b.bind("model", "sample_limit",
         [&](const std::string& v) { cfg.model.sample_limit = to_size(v); });
  b.bind("model", "mlp_ratio",
         [&](const std::string& v) { cfg.model.mlp_ratio = to_double(v); });
  b.bind("model", "head_channels",
         [&](const std::string& v) { cfg.model.head_channels = to_size(v); });
  b.bind("model", "trainable_pos_embed", [&](const std::string& v) {
    cfg.model.trainable_pos_embed = to_bool(v);
  });
  b.bind("model", "proj_skip", [&](const std::string& v) {
    if (v == "mean")
      cfg.model.proj_skip = SkipReducer::kMean;
    else if (v == "sum")
      cfg.model.proj_skip = SkipReducer::kSum;
    else
      throw ValidationError("expected mean|sum");
  });

  b.known_section("data");
  b.bind("data", "source", [&](const std::string& v) {
    if (v == "synthetic")
      cfg.source = DataSource::kSynthetic;
    else if (v == "container")
      cfg.source = DataSource::kContainer;
    else
      throw ValidationError("expected synthetic|container");
  });
  b.bind("data", "train_samples",
         [&](const std::string& v) { cfg.train_samples = to_size(v); });
  b.bind("data", "test_samples",
         [&](const std::string& v) { cfg.test_samples = to_size(v); });
  b.bind("data", "noise_sigma",
         [&](const std::string& v) { cfg.noise_sigma = to_double(v); });
  b.bind("data", "partition", [&](const std::string& v) {
    cfg.partition_mode = parse_partition(v);
  });
  b.bind("data", "alpha",
         [&](const std::string& v) { cfg.alpha = to_double(v); });
  b.bind("data", "n_clients",
         [&](const std::string& v) { cfg.n_clients = to_size(v); });
  b.bind("data", "train_container",
         [&](const std::string& v) { cfg.train_container = v; });
  b.bind("data", "test_container",
         [&](const std::string& v) { cfg.test_container = v; });
  b.bind("data", "natural_index_file",
         [&](const std::string& v) { cfg.natural_index_file = v; });

  b.known_section("optim");
  b.bind("optim", "lr",
         [&](const std::string& v) { cfg.optimizer.lr = to_double(v); });
  b.bind("optim", "beta1",
         [&](const std::string& v) { cfg.optimizer.beta1 = to_double(v); });
  b.bind("optim", "beta2",
         [&](const std::string& v) { cfg.optimizer.beta2 = to_double(v); });
  b.bind("optim", "eps",
         [&](const std::string& v) { cfg.optimizer.eps = to_double(v); });

  b.known_section("dp");
  b.bind("dp", "enabled",
         [&](const std::string& v) { cfg.dp.enabled = to_bool(v); });
  b.bind("dp", "epsilon",
         [&](const std::string& v) { cfg.dp.epsilon = to_double(v); });
  b.bind("dp", "delta",
         [&](const std::string& v) { cfg.dp.delta = to_double(v); });
  b.bind("dp", "clip_norm",
         [&](const std::string& v) { cfg.dp.clip_norm = to_double(v); });

  b.known_section("seeds");
  b.bind("seeds", "data",
         [&](const std::string& v) { cfg.seeds.data = to_u64(v); });
  b.bind("seeds", "init",
         [&](const std::string& v) { cfg.seeds.init = to_u64(v); });
  b.bind("seeds", "sampling",
         [&](const std::string& v) { cfg.seeds.sampling = to_u64(v); });
  b.bind("seeds", "noise",
         [&](const std::string& v) { cfg.seeds.noise = to_u64(v); });

  b.known_section("output");
  b.bind("output", "dir", [&](const std::string& v) { cfg.out_dir = v; });
  b.bind("output", "emit_plots",
         [&](const std::string& v) { cfg.emit_plots = to_bool(v); });

  b.report_unknown();
  if (!errors.empty()) {
    std::string msg = "config errors:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace fesvibs
