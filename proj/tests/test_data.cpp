#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>

#include "fesvibs/data.hpp"
#include "fesvibs/metrics.hpp"
#include "test_util.hpp"

using namespace fesvibs;

namespace {

std::string to_hex(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  char buf[3];
  for (auto b : bytes) {
    std::snprintf(buf, sizeof(buf), "%02x", b);
    out += buf;
  }
  return out;
}

std::vector<std::size_t> class_histogram(const Dataset& d) {
  std::vector<std::size_t> h(d.classes, 0);
  for (int y : d.labels) ++h[static_cast<std::size_t>(y)];
  return h;
}

}  // namespace

TEST_CASE("noiseless synthetic data is nearest-template separable") {
  Dataset d = generate_synthetic(4, 40, 1, 16, 16, 0.0, 5);
  auto pred = nearest_centroid_predict(d, d);
  CHECK(pred == d.labels);
}

TEST_CASE("synthetic generation is deterministic per seed") {
  Dataset a = generate_synthetic(3, 30, 1, 8, 8, 0.2, 11);
  Dataset b = generate_synthetic(3, 30, 1, 8, 8, 0.2, 11);
  Dataset c = generate_synthetic(3, 30, 1, 8, 8, 0.2, 12);
  CHECK(serialize_container(a) == serialize_container(b));
  CHECK(serialize_container(a) != serialize_container(c));
}

TEST_CASE("synthetic pixels stay in [0,1] and labels stay balanced") {
  Dataset d = generate_synthetic(3, 32, 1, 8, 8, 0.5, 3);
  for (double v : d.images.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  auto hist = class_histogram(d);
  const auto [lo, hi] = std::minmax_element(hist.begin(), hist.end());
  CHECK(*hi - *lo <= 1);
  CHECK_THROWS_AS(generate_synthetic(1, 10, 1, 8, 8, 0.0, 0),
                  ValidationError);
}

TEST_CASE("nearest-centroid oracle on the noisy benchmark") {
  Dataset train = generate_synthetic(4, 800, 1, 16, 16, 0.5, 21);
  Dataset test = generate_synthetic(4, 200, 1, 16, 16, 0.5, 22);
  auto pred = nearest_centroid_predict(train, test);
  const double acc = balanced_accuracy(test.labels, pred, 4);
  CHECK(acc >= 0.25);
  CHECK(acc <= 1.0);
}

TEST_CASE("iid partition splits evenly") {
  Dataset d = generate_synthetic(2, 10, 1, 4, 4, 0.1, 7);
  PartitionSpec spec;
  spec.mode = PartitionMode::kIid;
  spec.n_clients = 2;
  spec.seed = 3;
  auto shards = partition(d, spec);
  REQUIRE(shards.size() == 2);
  CHECK(shards[0].size() == 5);
  CHECK(shards[1].size() == 5);
}

TEST_CASE("partition conserves the label multiset") {
  Dataset d = generate_synthetic(4, 120, 1, 8, 8, 0.3, 7);
  PartitionSpec spec;
  spec.mode = PartitionMode::kDirichlet;
  spec.n_clients = 6;
  spec.alpha = 0.5;
  spec.seed = 7;
  auto shards = partition(d, spec);
  REQUIRE(shards.size() == 6);

  auto global = class_histogram(d);
  std::vector<std::size_t> merged(d.classes, 0);
  std::size_t total = 0;
  for (const auto& s : shards) {
    auto h = class_histogram(s);
    for (std::size_t k = 0; k < d.classes; ++k) merged[k] += h[k];
    total += s.size();
  }
  CHECK(total == d.size());
  CHECK(merged == global);
}

TEST_CASE("dirichlet with huge alpha approaches iid class proportions") {
  Dataset d = generate_synthetic(4, 400, 1, 4, 4, 0.1, 9);
  PartitionSpec spec;
  spec.mode = PartitionMode::kDirichlet;
  spec.n_clients = 4;
  spec.alpha = 1e6;
  spec.seed = 5;
  auto shards = partition(d, spec);
  for (const auto& s : shards) {
    auto h = class_histogram(s);
    for (std::size_t k = 0; k < d.classes; ++k) {
      // 100 per class over 4 clients: concentration keeps shares near 25.
      CHECK(h[k] >= 20);
      CHECK(h[k] <= 30);
    }
  }
}

TEST_CASE("dirichlet gives up after 100 empty-shard redraws") {
  Dataset d = generate_synthetic(2, 8, 1, 4, 4, 0.1, 13);
  PartitionSpec spec;
  spec.mode = PartitionMode::kDirichlet;
  spec.n_clients = 8;
  spec.alpha = 1e-4;
  spec.seed = 1;
  CHECK_THROWS_AS(partition(d, spec), ValidationError);
}

TEST_CASE("natural partition uses caller index lists and must cover") {
  Dataset d = generate_synthetic(2, 6, 1, 4, 4, 0.1, 17);
  PartitionSpec spec;
  spec.mode = PartitionMode::kNatural;
  spec.n_clients = 2;
  spec.natural_indices = {{0, 2, 4}, {1, 3, 5}};
  auto shards = partition(d, spec);
  CHECK(shards[0].size() == 3);
  CHECK(shards[0].labels[0] == d.labels[0]);

  spec.natural_indices = {{0, 1}, {1, 2}};  // overlap
  CHECK_THROWS_AS(partition(d, spec), ValidationError);
  spec.natural_indices = {{0, 1}, {2, 3}};  // does not cover
  CHECK_THROWS_AS(partition(d, spec), ValidationError);
}

TEST_CASE("container round-trip is bitwise") {
  Dataset d = generate_synthetic(3, 20, 2, 6, 6, 0.4, 19);
  const std::string path = "test_container_roundtrip.fsvb";
  save_container(d, path);
  Dataset back = load_container(path);
  CHECK(serialize_container(back) == serialize_container(d));
  CHECK(back.labels == d.labels);
  std::filesystem::remove(path);
}

TEST_CASE("container corruption is rejected with distinct errors") {
  Dataset d = generate_synthetic(2, 4, 1, 4, 4, 0.2, 23);
  auto bytes = serialize_container(d);

  auto flipped = bytes;
  flipped[40] ^= 0x01;  // payload byte
  CHECK_THROWS_AS(deserialize_container(flipped), ContainerError);
  try {
    deserialize_container(flipped);
  } catch (const ContainerError& e) {
    CHECK(e.code() == ContainerErrc::kCrcMismatch);
  }

  auto truncated = bytes;
  truncated.resize(truncated.size() - 9);
  try {
    deserialize_container(truncated);
    FAIL("expected truncation error");
  } catch (const ContainerError& e) {
    CHECK(e.code() == ContainerErrc::kTruncated);
  }

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    deserialize_container(bad_magic);
    FAIL("expected magic error");
  } catch (const ContainerError& e) {
    CHECK(e.code() == ContainerErrc::kBadMagic);
  }

  // Header N inconsistent with the file size: bump N and refresh nothing
  // else, so the size check fires before any CRC work.
  auto bad_n = bytes;
  bad_n[9] ^= 0x02;
  try {
    deserialize_container(bad_n);
    FAIL("expected truncation error");
  } catch (const ContainerError& e) {
    CHECK(e.code() == ContainerErrc::kTruncated);
  }
}

TEST_CASE("container golden bytes are stable") {
  std::vector<double> px;
  for (int i = 0; i < 8; ++i)
    px.push_back(static_cast<double>(static_cast<float>(i / 8.0)));
  Dataset d;
  d.images = Tensor::from_data({2, 1, 2, 2}, px);
  d.labels = {0, 1};
  d.classes = 2;
  CHECK(to_hex(serialize_container(d)) ==
        "46535642310200000002000000010000000200000002000000000000000000000"
        "03e0000803e0000c03e0000003f0000203f0000403f0000603f00000100f2120e"
        "aa");
}

TEST_CASE("batch_indices keeps the partial batch and covers every index") {
  auto batches = batch_indices(10, 3, 42, 0);
  REQUIRE(batches.size() == 4);
  CHECK(batches[0].size() == 3);
  CHECK(batches[3].size() == 1);

  std::vector<int> seen;
  for (const auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
  std::sort(seen.begin(), seen.end());
  std::vector<int> expect(10);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(seen == expect);

  CHECK(batch_indices(10, 3, 42, 0) == batches);
  CHECK(batch_indices(10, 3, 42, 1) != batches);
  CHECK_THROWS_AS(batch_indices(10, 0, 1, 0), ValidationError);
}
