#include "fesvibs/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "fesvibs/rng.hpp"

namespace fesvibs {

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4)
    throw ValidationError("dataset: images must be [N,C,H,W]");
  if (images.dim(0) != labels.size())
    throw ValidationError("dataset: image/label count mismatch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw ValidationError("dataset: label " + std::to_string(y) +
                            " out of range [0," + std::to_string(classes) +
                            ")");
  }
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t px = c * h * w;
  std::vector<double> data(indices.size() * px);
  std::vector<int> lab(indices.size());
  auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t idx = static_cast<std::size_t>(indices[i]);
    if (idx >= size())
      throw ValidationError("dataset subset: index " + std::to_string(idx) +
                            " out of range");
    std::copy(src.begin() + idx * px, src.begin() + (idx + 1) * px,
              data.begin() + i * px);
    lab[i] = labels[idx];
  }
  Dataset out;
  out.images = Tensor::from_data({indices.size(), c, h, w}, std::move(data));
  out.labels = std::move(lab);
  out.classes = classes;
  return out;
}

Dataset generate_synthetic(std::size_t classes, std::size_t n,
                           std::size_t channels, std::size_t height,
                           std::size_t width, double noise_sigma,
                           std::uint64_t seed) {
  if (classes < 2) throw ValidationError("generate_synthetic: need K >= 2");
  if (channels == 0 || height == 0 || width == 0)
    throw ValidationError("generate_synthetic: empty image shape");

  // Balanced labels (counts differ by at most one), shuffled.
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i)
    labels[i] = static_cast<int>(i % classes);
  Rng label_rng = make_rng(derive_seed(seed, 0xDA7A));
  std::shuffle(labels.begin(), labels.end(), label_rng);

  Rng noise_rng = make_rng(derive_seed(seed, 0x0135E));
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t px = channels * height * width;
  std::vector<double> data(n * px);
  const double scale = static_cast<double>(std::max(height, width));
  for (std::size_t i = 0; i < n; ++i) {
    const int k = labels[i];
    const double angle = M_PI * static_cast<double>(k) / classes;
    const double freq = 1.0 + static_cast<double>(k % 3);
    const double phase = 2.0 * M_PI * static_cast<double>(k) / classes;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const double u = (ca * x + sa * y) / scale;
          double v = 0.5 + 0.5 * std::cos(2.0 * M_PI * freq * u + phase +
                                          0.7 * static_cast<double>(c));
          if (noise_sigma > 0) v += noise_sigma * noise(noise_rng);
          v = std::clamp(v, 0.0, 1.0);
          // Quantize to f32 so that container round-trips are exact.
          data[(i * channels + c) * height * width + y * width + x] =
              static_cast<double>(static_cast<float>(v));
        }
      }
    }
  }

  Dataset out;
  out.images = Tensor::from_data({n, channels, height, width}, std::move(data));
  out.labels = std::move(labels);
  out.classes = classes;
  out.validate();
  return out;
}

namespace {

std::vector<Dataset> split_by_indices(
    const Dataset& data, const std::vector<std::vector<int>>& shards) {
  std::vector<Dataset> out;
  out.reserve(shards.size());
  for (const auto& idx : shards) out.push_back(data.subset(idx));
  return out;
}

void check_cover(const std::vector<std::vector<int>>& shards, std::size_t n) {
  std::vector<char> seen(n, 0);
  std::size_t total = 0;
  for (const auto& shard : shards) {
    for (int i : shard) {
      if (i < 0 || static_cast<std::size_t>(i) >= n || seen[i])
        throw ValidationError(
            "partition: shards must be disjoint and within range");
      seen[i] = 1;
      ++total;
    }
  }
  if (total != n)
    throw ValidationError("partition: shards do not cover the dataset");
}

}  // namespace

std::vector<Dataset> partition(const Dataset& data, const PartitionSpec& spec) {
  data.validate();
  const std::size_t n = data.size();
  if (spec.n_clients == 0)
    throw ValidationError("partition: n_clients must be >= 1");
  if (n < spec.n_clients)
    throw ValidationError("partition: fewer samples than clients");

  if (spec.mode == PartitionMode::kNatural) {
    if (spec.natural_indices.size() != spec.n_clients)
      throw ValidationError("partition: natural mode needs one index list "
                            "per client");
    check_cover(spec.natural_indices, n);
    return split_by_indices(data, spec.natural_indices);
  }

  if (spec.mode == PartitionMode::kIid) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(derive_seed(spec.seed, 0x11D));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> shards(spec.n_clients);
    const std::size_t base = n / spec.n_clients, extra = n % spec.n_clients;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < spec.n_clients; ++c) {
      const std::size_t take = base + (c < extra ? 1 : 0);
      shards[c].assign(order.begin() + pos, order.begin() + pos + take);
      pos += take;
    }
    check_cover(shards, n);
    return split_by_indices(data, shards);
  }

  // Dirichlet label skew.
  if (!(spec.alpha > 0))
    throw ValidationError("partition: dirichlet alpha must be > 0");
  std::vector<std::vector<int>> by_class(data.classes);
  for (std::size_t i = 0; i < n; ++i)
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(
        static_cast<int>(i));

  Rng rng = make_rng(derive_seed(spec.seed, 0xD112));
  std::gamma_distribution<double> gamma(spec.alpha, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::vector<int>> shards(spec.n_clients);
    for (auto& cls : by_class) {
      if (cls.empty()) continue;
      std::vector<int> idx = cls;
      std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<double> w(spec.n_clients);
      double sum = 0;
      for (auto& v : w) {
        v = gamma(rng);
        sum += v;
      }
      if (sum <= 0) sum = 1;
      // Cumulative-proportion boundaries keep every sample assigned.
      std::size_t start = 0;
      double acc = 0;
      for (std::size_t c = 0; c < spec.n_clients; ++c) {
        acc += w[c] / sum;
        std::size_t end =
            c + 1 == spec.n_clients
                ? idx.size()
                : std::min(idx.size(),
                           static_cast<std::size_t>(
                               std::llround(acc * static_cast<double>(
                                                      idx.size()))));
        for (std::size_t i = start; i < end; ++i) shards[c].push_back(idx[i]);
        start = std::max(start, end);
      }
    }
    bool ok = true;
    for (const auto& shard : shards) ok = ok && !shard.empty();
    if (ok) {
      check_cover(shards, n);
      return split_by_indices(data, shards);
    }
  }
  throw ValidationError(
      "partition: dirichlet draw left an empty client shard after 100 "
      "attempts; increase alpha or sample count");
}

// --- container --------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'F', 'S', 'V', 'B', '1'};
constexpr std::uint8_t kDtypeF32 = 0;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u32(out, bits);
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(static_cast<std::uint16_t>(p[0]) |
                                    (static_cast<std::uint16_t>(p[1]) << 8));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = get_u32(p);
  float v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data),
              static_cast<uInt>(len)));
}

}  // namespace

std::vector<std::uint8_t> serialize_container(const Dataset& data) {
  data.validate();
  if (data.classes > std::numeric_limits<std::uint16_t>::max())
    throw ValidationError("container: too many classes for u16 labels");
  const std::size_t n = data.size();
  const std::size_t c = data.images.dim(1), h = data.images.dim(2),
                    w = data.images.dim(3);
  std::vector<std::uint8_t> out;
  out.reserve(5 + 21 + n * c * h * w * 4 + n * 2 + 4);
  out.insert(out.end(), kMagic, kMagic + 5);
  put_u32(out, static_cast<std::uint32_t>(data.classes));
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(c));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  out.push_back(kDtypeF32);
  for (double v : data.images.data()) put_f32(out, static_cast<float>(v));
  for (int y : data.labels) put_u16(out, static_cast<std::uint16_t>(y));
  put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

Dataset deserialize_container(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t kHeader = 5 + 20 + 1;
  if (bytes.size() < kHeader + 4)
    throw ContainerError(ContainerErrc::kTruncated,
                         "container: file shorter than header");
  if (std::memcmp(bytes.data(), kMagic, 5) != 0)
    throw ContainerError(ContainerErrc::kBadMagic, "container: bad magic");
  const std::uint32_t k = get_u32(bytes.data() + 5);
  const std::uint32_t n = get_u32(bytes.data() + 9);
  const std::uint32_t c = get_u32(bytes.data() + 13);
  const std::uint32_t h = get_u32(bytes.data() + 17);
  const std::uint32_t w = get_u32(bytes.data() + 21);
  const std::uint8_t dtype = bytes[25];
  if (dtype != kDtypeF32)
    throw ContainerError(ContainerErrc::kBadHeader,
                         "container: unsupported dtype tag " +
                             std::to_string(dtype));
  const std::size_t px =
      static_cast<std::size_t>(n) * c * h * w;
  const std::size_t expect = kHeader + px * 4 + n * 2 + 4;
  if (bytes.size() != expect)
    throw ContainerError(
        ContainerErrc::kTruncated,
        "container: declared N=" + std::to_string(n) + " implies " +
            std::to_string(expect) + " bytes, file has " +
            std::to_string(bytes.size()));
  const std::uint32_t stored_crc = get_u32(bytes.data() + bytes.size() - 4);
  const std::uint32_t actual_crc = crc32_of(bytes.data(), bytes.size() - 4);
  if (stored_crc != actual_crc)
    throw ContainerError(ContainerErrc::kCrcMismatch,
                         "container: crc mismatch");

  std::vector<double> data(px);
  const std::uint8_t* p = bytes.data() + kHeader;
  for (std::size_t i = 0; i < px; ++i)
    data[i] = static_cast<double>(get_f32(p + i * 4));
  std::vector<int> labels(n);
  const std::uint8_t* lp = p + px * 4;
  for (std::size_t i = 0; i < n; ++i)
    labels[i] = static_cast<int>(get_u16(lp + i * 2));

  Dataset out;
  out.images = Tensor::from_data({n, c, h, w}, std::move(data));
  out.labels = std::move(labels);
  out.classes = k;
  out.validate();
  return out;
}

void save_container(const Dataset& data, const std::string& path) {
  auto bytes = serialize_container(data);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("container: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("container: short write to " + path);
}

Dataset load_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("container: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_container(bytes);
}

// --- batching ---------------------------------------------------------------

std::vector<std::vector<int>> batch_indices(std::size_t n,
                                            std::size_t batch_size,
                                            std::uint64_t seed,
                                            std::uint64_t epoch) {
  if (batch_size == 0)
    throw ValidationError("batch_indices: batch_size must be >= 1");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(derive_seed(seed, 0xBA7C, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (std::size_t pos = 0; pos < n; pos += batch_size) {
    const std::size_t end = std::min(n, pos + batch_size);
    batches.emplace_back(order.begin() + pos, order.begin() + end);
  }
  return batches;
}

TrainBatch gather_batch(const Dataset& data, const std::vector<int>& indices) {
  Dataset sub = data.subset(indices);
  return {sub.images, sub.labels};
}

std::vector<int> nearest_centroid_predict(const Dataset& train,
                                          const Dataset& eval_set) {
  train.validate();
  eval_set.validate();
  const std::size_t px = train.images.size() / std::max<std::size_t>(
                                                   train.size(), 1);
  std::vector<std::vector<double>> centroids(train.classes,
                                             std::vector<double>(px, 0.0));
  std::vector<std::size_t> counts(train.classes, 0);
  auto tv = train.images.data();
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto& ctr = centroids[static_cast<std::size_t>(train.labels[i])];
    for (std::size_t j = 0; j < px; ++j) ctr[j] += tv[i * px + j];
    counts[static_cast<std::size_t>(train.labels[i])] += 1;
  }
  for (std::size_t k = 0; k < train.classes; ++k) {
    if (counts[k] == 0) continue;
    for (auto& v : centroids[k]) v /= static_cast<double>(counts[k]);
  }

  std::vector<int> pred(eval_set.size());
  auto ev = eval_set.images.data();
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (std::size_t k = 0; k < train.classes; ++k) {
      if (counts[k] == 0) continue;
      double d = 0;
      for (std::size_t j = 0; j < px; ++j) {
        const double diff = ev[i * px + j] - centroids[k][j];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_k = static_cast<int>(k);
      }
    }
    pred[i] = best_k;
  }
  return pred;
}

}  // namespace fesvibs
