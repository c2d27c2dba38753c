#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>

#include "dflsim/checkpoint.hpp"
#include "dflsim/data.hpp"
#include "dflsim/random.hpp"
#include "support.hpp"

using namespace dflsim;

namespace {

std::vector<double> uniform_targets(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> t(n);
  for (double& v : t) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("render_line puts a horizontal line through the center at angle zero") {
  const auto img = render_line(8, 8, 0.0);
  // Rows 3 and 4 straddle the center line at distance 0.5.
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(img[3 * 8 + c] == 0.5);
    CHECK(img[4 * 8 + c] == 0.5);
    CHECK(img[0 * 8 + c] == 0.0);
  }
  const auto diag = render_line(9, 9, std::numbers::pi / 4.0);
  CHECK(diag[4 * 9 + 4] == doctest::Approx(1.0));
  CHECK(diag[0 * 9 + 8] == doctest::Approx(1.0));
  CHECK(diag[0 * 9 + 0] == 0.0);
}

TEST_CASE("linesteer targets are normalized angles") {
  const auto ds = generate_linesteer(500, 16, 16, 3);
  CHECK(ds.size() == 500);
  CHECK(ds.sample_shape() == Shape{16, 16, 1});
  for (double t : ds.targets) CHECK((t >= -1.0 && t <= 1.0));
  CHECK(*std::min_element(ds.targets.begin(), ds.targets.end()) < -0.9);
  CHECK(*std::max_element(ds.targets.begin(), ds.targets.end()) > 0.9);
  ds.validate();
  // The noise floor is sigma 0.05 around the rendered image.
  const std::vector<std::size_t> first{0};
  const auto b = ds.batch(first);
  const auto clean = render_line(16, 16, ds.targets[0] * std::numbers::pi / 4.0);
  double sq = 0.0;
  for (std::size_t p = 0; p < clean.size(); ++p) sq += std::pow(b.inputs[p] - clean[p], 2);
  CHECK(std::sqrt(sq / 256.0) == doctest::Approx(kLineNoiseStddev).epsilon(0.25));
}

TEST_CASE("linesteer is seed-deterministic") {
  const auto a = generate_linesteer(50, 12, 10, 7);
  const auto b = generate_linesteer(50, 12, 10, 7);
  CHECK(a.inputs == b.inputs);
  CHECK(a.targets == b.targets);
  CHECK_FALSE(generate_linesteer(50, 12, 10, 8).targets == a.targets);
  CHECK_THROWS_AS(generate_linesteer(5, 7, 16, 1), DataError);
  CHECK_THROWS_AS(generate_linesteer(0, 16, 16, 1), DataError);
}

TEST_CASE("uniform partition balances counts and spans the range") {
  const auto t = uniform_targets(10, 1);
  const auto plan = partition_noniid(t, 2, 0.0, 4);
  CHECK(plan.counts() == std::vector<std::size_t>{5, 5});
  for (std::size_t s = 3; s <= 11; ++s) {
    const auto p = partition_noniid(uniform_targets(1003, s), s, 0.0, s);
    const auto c = p.counts();
    CHECK(*std::max_element(c.begin(), c.end()) - *std::min_element(c.begin(), c.end()) <= 1);
  }
  const auto big = partition_noniid(uniform_targets(2000, 2), 2, 0.0, 5);
  for (const auto& shard : big.shards()) {
    double lo = 1.0, hi = -1.0;
    for (auto i : shard) {
      lo = std::min(lo, uniform_targets(2000, 2)[i]);
      hi = std::max(hi, uniform_targets(2000, 2)[i]);
    }
    CHECK(lo < -0.9);
    CHECK(hi > 0.9);
  }
}

TEST_CASE("fully skewed partition gives sorted contiguous shards") {
  const std::vector<double> t{0.9, -0.1, 0.3, -0.8, 0.5, -0.5, 0.1, -0.3, 0.7, -0.9};
  const auto plan = partition_noniid(t, 2, 1.0, 4);
  const auto shards = plan.shards();
  std::set<std::size_t> low(shards[0].begin(), shards[0].end());
  CHECK(low == std::set<std::size_t>{1, 3, 5, 7, 9});
  const auto t2 = uniform_targets(1000, 6);
  const auto p2 = partition_noniid(t2, 7, 1.0, 2);
  double prev_hi = -2.0;
  for (const auto& shard : p2.shards()) {
    double lo = 2.0, hi = -2.0;
    for (auto i : shard) {
      lo = std::min(lo, t2[i]);
      hi = std::max(hi, t2[i]);
    }
    CHECK(lo >= prev_hi);
    prev_hi = hi;
  }
}

TEST_CASE("partition covers every sample once and keeps silos nonempty") {
  for (double skew : {0.0, 0.3, 0.8, 1.0}) {
    const auto t = uniform_targets(137, 9);
    const auto plan = partition_noniid(t, 11, skew, 3);
    CHECK(plan.assignment.size() == 137);
    std::size_t total = 0;
    for (auto c : plan.counts()) {
      CHECK(c >= 1);
      total += c;
    }
    CHECK(total == 137);
    CHECK(plan.assignment == partition_noniid(t, 11, skew, 3).assignment);
  }
  const auto tight = partition_noniid(uniform_targets(11, 1), 11, 0.5, 1);
  for (auto c : tight.counts()) CHECK(c == 1);
  CHECK_THROWS_AS(partition_noniid(uniform_targets(3, 1), 4, 0.0, 1), DataError);
  CHECK_THROWS_AS(partition_noniid(uniform_targets(3, 1), 2, 1.5, 1), DataError);
}

TEST_CASE("per-silo mean shard size at desk and corpus scale") {
  const auto plan = partition_noniid(uniform_targets(39087, 1), 11, 0.0, 1);
  std::size_t total = 0;
  for (auto c : plan.counts()) {
    CHECK((c == 3553 || c == 3554));
    total += c;
  }
  CHECK(total / 11 == 3553);
}

TEST_CASE("train/test split arithmetic and partition property") {
  const auto [tr, te] = split_indices(10, 0.8, 1);
  CHECK(tr.size() == 8);
  CHECK(te.size() == 2);
  std::set<std::size_t> all(tr.begin(), tr.end());
  for (auto i : te) CHECK(all.insert(i).second);
  CHECK(all.size() == 10);
  CHECK(*all.rbegin() == 9);
  const auto [gtr, gte] = split_indices(66806, 0.8, 2);
  CHECK(gtr.size() == 53444);
  CHECK(gte.size() == 13362);
  CHECK_THROWS_AS(split_indices(1, 0.8, 1), DataError);
  CHECK_THROWS_AS(split_indices(10, 1.0, 1), DataError);
  const auto ds = generate_linesteer(20, 8, 8, 1);
  const auto split = train_test_split(ds, 0.75, 3);
  CHECK(split.train.size() == 15);
  CHECK(split.test.size() == 5);
}

TEST_CASE("external datasets round-trip and clamp angles") {
  const auto dir = testsupport::scratch_dir("external");
  const auto ds = generate_linesteer(3, 8, 9, 5);
  write_external(dir / "ok", ds);
  const auto back = load_external(dir / "ok");
  CHECK(back.inputs == ds.inputs);
  CHECK(back.targets == ds.targets);

  // One valid sample.
  write_external(dir / "one", ds.subset(std::vector<std::size_t>{1}));
  CHECK(load_external(dir / "one").size() == 1);

  // Angle 1.5 is clamped with a warning.
  {
    std::ofstream(dir / "one" / "labels.csv") << "file,angle\nsample_000000.bin,1.5\n";
    std::vector<std::string> warnings;
    const auto c = load_external(dir / "one", &warnings);
    CHECK(c.targets == std::vector<double>{1.0});
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("clamped") != std::string::npos);
  }

  auto error_of = [](const std::filesystem::path& p) {
    try {
      load_external(p);
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  std::filesystem::create_directories(dir / "nomanifest");
  CHECK(error_of(dir / "nomanifest").find("missing manifest") != std::string::npos);

  write_external(dir / "empty", ds);
  std::ofstream(dir / "empty" / "labels.csv") << "file,angle\n";
  CHECK(error_of(dir / "empty") == "no samples");

  write_external(dir / "shape", ds);
  write_f64_buffer(dir / "shape" / "sample_000001.bin", std::vector<double>(5, 0.0));
  CHECK(error_of(dir / "shape").find("shape inconsistency") != std::string::npos);

  write_external(dir / "gone", ds);
  std::filesystem::remove(dir / "gone" / "sample_000002.bin");
  CHECK(error_of(dir / "gone").find("unreadable file") != std::string::npos);
}

TEST_CASE("dataset subset and batch") {
  const auto ds = generate_linesteer(5, 8, 8, 2);
  const std::vector<std::size_t> idx{4, 0};
  const auto b = ds.batch(idx);
  CHECK(b.size() == 2);
  CHECK(b.targets[0] == ds.targets[4]);
  CHECK(std::memcmp(b.inputs.data(), ds.inputs.data() + 4 * 64, 64 * sizeof(double)) == 0);
  const std::vector<std::size_t> bad{7};
  CHECK_THROWS_AS(ds.batch(bad), DataError);
}
