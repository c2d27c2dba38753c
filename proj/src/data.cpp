#include "dflsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"

#include "dflsim/checkpoint.hpp"
#include "dflsim/random.hpp"

namespace dflsim {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError("subset of zero samples");
  const Shape sample = sample_shape();
  const std::size_t n = shape_size(sample);
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample.begin(), sample.end());
  Dataset out{Tensor(shape), {}, provenance};
  out.targets.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= size()) throw DataError(fmt::format("sample index {} out of range ({})", i, size()));
    std::copy_n(inputs.data() + i * n, n, out.inputs.data() + k * n);
    out.targets.push_back(targets[i]);
  }
  return out;
}

Batch Dataset::batch(std::span<const std::size_t> indices) const {
  Dataset d = subset(indices);
  return Batch{std::move(d.inputs), std::move(d.targets)};
}

void Dataset::validate() const {
  if (size() == 0) throw DataError("dataset has no samples");
  if (inputs.rank() < 2 || inputs.dim(0) != size()) {
    throw DataError(fmt::format("inputs {} do not match {} targets", shape_string(inputs.shape()), size()));
  }
  for (double t : targets) {
    if (!(t >= -1.0 && t <= 1.0)) throw DataError(fmt::format("target {} outside [-1, 1]", t));
  }
  if (!inputs.all_finite()) throw DataError("dataset inputs contain non-finite values");
}

Tensor render_line(std::size_t height, std::size_t width, double angle) {
  Tensor img(Shape{height, width, 1});
  const double s = std::sin(angle), c = std::cos(angle);
  for (std::size_t r = 0; r < height; ++r) {
    const double y = 0.5 * static_cast<double>(height) - (static_cast<double>(r) + 0.5);
    for (std::size_t col = 0; col < width; ++col) {
      const double x = static_cast<double>(col) + 0.5 - 0.5 * static_cast<double>(width);
      const double dist = std::abs(-s * x + c * y);
      img[r * width + col] = std::max(0.0, 1.0 - dist);
    }
  }
  return img;
}

Dataset generate_linesteer(std::size_t count, std::size_t height, std::size_t width, std::uint64_t seed) {
  if (count < 1) throw DataError("linesteer count must be >= 1");
  if (height < 8 || width < 8) throw DataError(fmt::format("linesteer images must be at least 8x8, got {}x{}", height, width));
  constexpr double quarter = std::numbers::pi / 4.0;
  Rng rng(seed);
  Dataset ds{Tensor(Shape{count, height, width, 1}), {}, fmt::format("linesteer:seed={}", seed)};
  ds.targets.reserve(count);
  const std::size_t n = height * width;
  for (std::size_t i = 0; i < count; ++i) {
    const double angle = rng.uniform(-quarter, quarter);
    const Tensor img = render_line(height, width, angle);
    double* dst = ds.inputs.data() + i * n;
    for (std::size_t p = 0; p < n; ++p) dst[p] = img[p] + rng.normal(0.0, kLineNoiseStddev);
    ds.targets.push_back(std::clamp(angle / quarter, -1.0, 1.0));
  }
  return ds;
}

std::vector<std::vector<std::size_t>> PartitionPlan::shards() const {
  std::vector<std::vector<std::size_t>> out(silos);
  for (std::size_t i = 0; i < assignment.size(); ++i) out[assignment[i]].push_back(i);
  return out;
}

std::vector<std::size_t> PartitionPlan::counts() const {
  std::vector<std::size_t> out(silos, 0);
  for (auto s : assignment) ++out[s];
  return out;
}

PartitionPlan partition_noniid(std::span<const double> targets, std::size_t silos, double skew, std::uint64_t seed) {
  const std::size_t count = targets.size();
  if (silos == 0) throw DataError("partition needs at least one silo");
  if (silos > count) throw DataError(fmt::format("cannot split {} samples over {} silos", count, silos));
  if (!(skew >= 0.0 && skew <= 1.0)) throw DataError(fmt::format("skew {} outside [0, 1]", skew));
  Rng rng(seed);

  // Balanced random: deal a shuffled order round-robin.
  std::vector<std::size_t> order = iota_indices(count);
  rng.shuffle(std::span(order));
  std::vector<std::size_t> uniform(count);
  for (std::size_t k = 0; k < count; ++k) uniform[order[k]] = k % silos;

  // Sorted shards: contiguous runs of the target order, sizes within one.
  std::vector<std::size_t> by_target = iota_indices(count);
  std::stable_sort(by_target.begin(), by_target.end(),
                   [&](std::size_t a, std::size_t b) { return targets[a] < targets[b]; });
  std::vector<std::size_t> sorted(count);
  const std::size_t base = count / silos, extra = count % silos;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < silos; ++s) {
    const std::size_t len = base + (s < extra ? 1 : 0);
    for (std::size_t k = 0; k < len; ++k) sorted[by_target[pos++]] = s;
  }

  PartitionPlan plan{silos, skew, std::vector<std::size_t>(count)};
  for (std::size_t i = 0; i < count; ++i) {
    if (skew == 0.0) {
      plan.assignment[i] = uniform[i];
    } else if (skew == 1.0) {
      plan.assignment[i] = sorted[i];
    } else {
      plan.assignment[i] = rng.bernoulli(skew) ? sorted[i] : uniform[i];
    }
  }

  // Mixing can empty a silo on tiny inputs; refill it from the largest one.
  auto counts = plan.counts();
  for (std::size_t s = 0; s < silos; ++s) {
    if (counts[s] != 0) continue;
    const auto largest = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    for (std::size_t i = 0; i < count; ++i) {
      if (plan.assignment[i] == largest) {
        plan.assignment[i] = s;
        --counts[largest];
        ++counts[s];
        break;
      }
    }
  }
  return plan;
}

PartitionPlan partition_noniid(const Dataset& ds, std::size_t silos, double skew, std::uint64_t seed) {
  return partition_noniid(ds.targets, silos, skew, seed);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count, double fraction,
                                                                           std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw DataError(fmt::format("split fraction {} outside (0, 1)", fraction));
  const auto n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(count)));
  if (n_train == 0 || n_train == count) {
    throw DataError(fmt::format("split of {} samples at {} leaves one side empty", count, fraction));
  }
  std::vector<std::size_t> order = iota_indices(count);
  Rng rng(seed);
  rng.shuffle(std::span(order));
  return {std::vector<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train)),
          std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end())};
}

Split train_test_split(const Dataset& ds, double fraction, std::uint64_t seed) {
  const auto [train, test] = split_indices(ds.size(), fraction, seed);
  return Split{ds.subset(train), ds.subset(test)};
}

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

Dataset load_external(const std::filesystem::path& dir, std::vector<std::string>* warnings) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError(fmt::format("missing manifest: {}", (dir / "manifest.json").string()));
  Shape sample;
  try {
    const auto manifest = nlohmann::json::parse(mf);
    if (manifest.value("dtype", std::string(kBufferDtype)) != kBufferDtype) {
      throw DataError("external dataset dtype must be float64_le");
    }
    sample = manifest.at("shape").get<Shape>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("bad manifest in {}: {}", dir.string(), e.what()));
  }
  if (sample.size() != 3 || shape_size(sample) == 0) {
    throw DataError(fmt::format("sample shape must be (height, width, channels), got {}", shape_string(sample)));
  }

  std::ifstream labels(dir / "labels.csv");
  if (!labels) throw DataError(fmt::format("unreadable file: {}", (dir / "labels.csv").string()));
  std::string line;
  std::vector<std::pair<std::string, double>> rows;
  std::size_t line_no = 0;
  while (std::getline(labels, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(fmt::format("labels.csv:{}: expected 'file,angle'", line_no));
    std::string file = trim(line.substr(0, comma));
    std::string angle = trim(line.substr(comma + 1));
    if (line_no == 1 && file == "file" && angle == "angle") continue;
    try {
      std::size_t used = 0;
      const double a = std::stod(angle, &used);
      if (used != angle.size()) throw std::invalid_argument(angle);
      rows.emplace_back(std::move(file), a);
    } catch (const std::exception&) {
      throw DataError(fmt::format("labels.csv:{}: bad angle '{}'", line_no, angle));
    }
  }
  if (rows.empty()) throw DataError("no samples");

  const std::size_t n = shape_size(sample);
  Shape shape{rows.size()};
  shape.insert(shape.end(), sample.begin(), sample.end());
  Dataset ds{Tensor(shape), {}, fmt::format("external:{}", dir.string())};
  std::size_t clamped = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::vector<double> values;
    try {
      values = read_f64_buffer(dir / rows[k].first);
    } catch (const FormatError& e) {
      throw DataError(fmt::format("unreadable file: {}", e.what()));
    }
    if (values.size() != n) {
      throw DataError(fmt::format("shape inconsistency: {} holds {} values, manifest shape {} needs {}", rows[k].first,
                                  values.size(), shape_string(sample), n));
    }
    std::copy(values.begin(), values.end(), ds.inputs.data() + k * n);
    double a = rows[k].second;
    if (!std::isfinite(a)) throw DataError(fmt::format("{}: non-finite angle", rows[k].first));
    if (a < -1.0 || a > 1.0) {
      const double c = std::clamp(a, -1.0, 1.0);
      const auto msg = fmt::format("{}: angle {} clamped to {}", rows[k].first, a, c);
      spdlog::warn("{}", msg);
      if (warnings) warnings->push_back(msg);
      a = c;
      ++clamped;
    }
    ds.targets.push_back(a);
  }
  ds.validate();
  return ds;
}

void write_external(const std::filesystem::path& dir, const Dataset& ds) {
  ds.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format_version", kFormatVersion}, {"dtype", kBufferDtype}, {"shape", ds.sample_shape()}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream labels(dir / "labels.csv");
  labels << "file,angle\n";
  const std::size_t n = shape_size(ds.sample_shape());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string name = fmt::format("sample_{:06}.bin", i);
    write_f64_buffer(dir / name, std::span<const double>(ds.inputs.data() + i * n, n));
    labels << name << ',' << fmt::format("{}", ds.targets[i]) << '\n';
  }
}

}  // namespace dflsim
