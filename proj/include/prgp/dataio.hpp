#ifndef PRGP_DATAIO_HPP
#define PRGP_DATAIO_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "prgp/csv.hpp"
#include "prgp/errors.hpp"
#include "prgp/rng.hpp"

namespace prgp {

/// Shortest decimal representation that round-trips the double exactly.
inline std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// FNV-1a over a byte stream; used to fingerprint source files.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct ColumnStats {
  double mean = 0.0;
  double std = 1.0;
  double to_std(double v) const { return (v - mean) / std; }
  double from_std(double s) const { return mean + s * std; }
};

/// Z-score constants per column, fitted on the training split only.
struct Standardization {
  bool fitted = false;
  ColumnStats x, t, rho, v, q;
};

struct NoiseRecord {
  bool applied = false;
  double fraction = 0.0;
  double amplitude = 0.0;  // veh per 5-min bin
  std::uint64_t seed = 0;
  std::vector<std::size_t> rows;  // perturbed sample indices
};

/// One cleaned sensor observation. Time is hours from the earliest
/// timestamp in the source file; density is derived from flow and speed.
struct TrafficSample {
  std::string station_id;
  std::int64_t timestamp = 0;  // seconds since epoch, as read
  double x = 0.0;              // milepost, miles
  double t = 0.0;              // hours from dataset start
  double q = 0.0;              // flow, veh per 5-min bin
  double v = 0.0;              // speed, mph
  double rho = 0.0;            // density, veh/mile = q*12/v
};

struct Dataset {
  std::vector<TrafficSample> samples;
  std::vector<std::uint8_t> is_train;  // empty until split() assigns rows
  Standardization stats;
  NoiseRecord noise;
  std::string source_hash;
  std::size_t dropped_rows = 0;
  double train_fraction = 0.0;
  std::uint64_t split_seed = 0;

  bool has_split() const { return is_train.size() == samples.size() && !samples.empty(); }

  std::vector<std::size_t> train_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < is_train.size(); ++i)
      if (is_train[i]) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> test_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < is_train.size(); ++i)
      if (!is_train[i]) out.push_back(i);
    return out;
  }
};

inline constexpr const char* kSensorCsvHeader =
    "station_id,timestamp_utc,milepost,flow_veh_per_5min,speed_mph";

/// Parse a sensor CSV. Rows with nonpositive speed, negative flow, or empty
/// fields are dropped and counted; structurally broken rows are errors.
inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open CSV file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());

  Dataset ds;
  ds.source_hash = fnv1a_hex(bytes);

  std::stringstream ss(bytes);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(ss, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!have_header) {
      if (line != kSensorCsvHeader)
        throw ConfigError(path + ": header mismatch, expected '" +
                          std::string(kSensorCsvHeader) + "'");
      have_header = true;
      continue;
    }
    const auto fields = csv_split(line);
    if (fields.size() != 5)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected 5 fields, got " + std::to_string(fields.size()));
    bool missing = false;
    for (const auto& f : fields)
      if (f.empty()) missing = true;
    if (missing) {
      ++ds.dropped_rows;
      continue;
    }
    const std::string ctx = path + ":" + std::to_string(lineno);
    TrafficSample s;
    s.station_id = fields[0];
    s.timestamp = static_cast<std::int64_t>(csv_to_double(fields[1], ctx));
    s.x = csv_to_double(fields[2], ctx);
    s.q = csv_to_double(fields[3], ctx);
    s.v = csv_to_double(fields[4], ctx);
    if (s.v <= 0.0 || s.q < 0.0) {
      ++ds.dropped_rows;
      continue;
    }
    s.rho = s.q * 12.0 / s.v;
    ds.samples.push_back(std::move(s));
  }
  if (!have_header) throw ConfigError("empty CSV file: " + path);
  if (ds.samples.empty())
    throw ConfigError(path + ": no usable rows after cleaning");

  std::int64_t t0 = std::numeric_limits<std::int64_t>::max();
  for (const auto& s : ds.samples) t0 = std::min(t0, s.timestamp);
  for (auto& s : ds.samples)
    s.t = static_cast<double>(s.timestamp - t0) / 3600.0;
  return ds;
}

/// Seeded shuffle split; assignment is recorded per row in original order.
inline Dataset split(Dataset ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train fraction must lie in (0, 1)");
  const std::size_t n = ds.samples.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[rng.below(i)]);
  const auto n_train =
      static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  ds.is_train.assign(n, 0);
  for (std::size_t k = 0; k < std::min(n_train, n); ++k) ds.is_train[perm[k]] = 1;
  ds.train_fraction = train_fraction;
  ds.split_seed = seed;
  return ds;
}

/// Corrupt a seeded subset of training rows: q <- max(0, q + U(-A, A)),
/// density re-derived. Test rows are never touched.
inline Dataset inject_noise(Dataset ds, double fraction, double amplitude,
                            std::uint64_t seed) {
  if (!ds.has_split())
    throw ConfigError("inject_noise requires a split dataset");
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw ConfigError("noise fraction must lie in [0, 1]");
  if (amplitude < 0.0) throw ConfigError("noise amplitude must be >= 0");

  auto train = ds.train_indices();
  Rng rng(seed);
  for (std::size_t i = train.size(); i > 1; --i)
    std::swap(train[i - 1], train[rng.below(i)]);
  const auto n_hit = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(train.size())));
  std::vector<std::size_t> hit(train.begin(),
                               train.begin() + std::min(n_hit, train.size()));
  std::sort(hit.begin(), hit.end());

  for (std::size_t idx : hit) {
    auto& s = ds.samples[idx];
    s.q = std::max(0.0, s.q + rng.uniform(-amplitude, amplitude));
    s.rho = s.q * 12.0 / s.v;
  }
  ds.noise.applied = true;
  ds.noise.fraction = fraction;
  ds.noise.amplitude = amplitude;
  ds.noise.seed = seed;
  ds.noise.rows = std::move(hit);
  return ds;
}

namespace detail {
inline ColumnStats fit_column(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  if (var <= 0.0)
    throw ConfigError("standardize: zero-variance column");
  return {mean, std::sqrt(var)};
}
}  // namespace detail

/// Fit z-score constants on the training split. Samples stay in physical
/// units; the constants map to and from standardized coordinates.
inline Dataset standardize(Dataset ds) {
  if (!ds.has_split())
    throw ConfigError("standardize requires a split dataset");
  const auto idx = ds.train_indices();
  if (idx.empty()) throw ConfigError("standardize: empty training split");
  std::vector<double> cx, ct, crho, cv, cq;
  for (std::size_t i : idx) {
    const auto& s = ds.samples[i];
    cx.push_back(s.x);
    ct.push_back(s.t);
    crho.push_back(s.rho);
    cv.push_back(s.v);
    cq.push_back(s.q);
  }
  ds.stats.x = detail::fit_column(cx);
  ds.stats.t = detail::fit_column(ct);
  ds.stats.rho = detail::fit_column(crho);
  ds.stats.v = detail::fit_column(cv);
  ds.stats.q = detail::fit_column(cq);
  ds.stats.fitted = true;
  return ds;
}

/// Physical-coordinate [x, t] rows for the given sample indices.
inline Eigen::MatrixXd input_matrix(const Dataset& ds,
                                    const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(idx.size()), 2);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    X(static_cast<Eigen::Index>(k), 0) = ds.samples[idx[k]].x;
    X(static_cast<Eigen::Index>(k), 1) = ds.samples[idx[k]].t;
  }
  return X;
}

enum class OutputColumn { Rho, V, Q };

inline Eigen::VectorXd output_vector(const Dataset& ds,
                                     const std::vector<std::size_t>& idx,
                                     OutputColumn col) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& s = ds.samples[idx[k]];
    y[static_cast<Eigen::Index>(k)] =
        col == OutputColumn::Rho ? s.rho : (col == OutputColumn::V ? s.v : s.q);
  }
  return y;
}

/// Axis-aligned hull of the training inputs, the default pseudo-point box.
struct DomainBox {
  double x_min = 0.0, x_max = 1.0, t_min = 0.0, t_max = 1.0;
};

inline DomainBox training_box(const Dataset& ds) {
  const auto idx = ds.train_indices();
  if (idx.empty()) throw ConfigError("training_box: empty training split");
  DomainBox b;
  b.x_min = b.x_max = ds.samples[idx[0]].x;
  b.t_min = b.t_max = ds.samples[idx[0]].t;
  for (std::size_t i : idx) {
    b.x_min = std::min(b.x_min, ds.samples[i].x);
    b.x_max = std::max(b.x_max, ds.samples[i].x);
    b.t_min = std::min(b.t_min, ds.samples[i].t);
    b.t_max = std::max(b.t_max, ds.samples[i].t);
  }
  return b;
}

/// Canonical save: sensor-schema CSV plus a JSON sidecar (<csv>.json)
/// carrying split, standardization, noise record, and source hash.
inline void save_dataset(const Dataset& ds, const std::string& csv_path) {
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw ConfigError("cannot write CSV file: " + csv_path);
  out << kSensorCsvHeader << "\n";
  for (const auto& s : ds.samples)
    out << s.station_id << "," << s.timestamp << "," << fmt_double(s.x) << ","
        << fmt_double(s.q) << "," << fmt_double(s.v) << "\n";
  out.close();

  nlohmann::json j;
  j["source_hash"] = ds.source_hash;
  j["dropped_rows"] = ds.dropped_rows;
  j["train_fraction"] = ds.train_fraction;
  j["split_seed"] = ds.split_seed;
  j["is_train"] = ds.is_train;
  j["noise"] = {{"applied", ds.noise.applied},
                {"fraction", ds.noise.fraction},
                {"amplitude", ds.noise.amplitude},
                {"seed", ds.noise.seed},
                {"rows", ds.noise.rows}};
  j["standardization"] = {{"fitted", ds.stats.fitted}};
  const auto put = [&](const char* name, const ColumnStats& c) {
    j["standardization"][name] = {{"mean", c.mean}, {"std", c.std}};
  };
  put("x", ds.stats.x);
  put("t", ds.stats.t);
  put("rho", ds.stats.rho);
  put("v", ds.stats.v);
  put("q", ds.stats.q);

  std::ofstream side(csv_path + ".json", std::ios::binary);
  if (!side) throw ConfigError("cannot write sidecar: " + csv_path + ".json");
  side << j.dump(2) << "\n";
}

/// Load a canonical save, restoring sidecar state when present.
inline Dataset load_dataset(const std::string& csv_path) {
  Dataset ds = load_csv(csv_path);
  std::ifstream side(csv_path + ".json", std::ios::binary);
  if (!side) return ds;
  nlohmann::json j;
  side >> j;
  // the sidecar points back at the raw source; the CSV we just hashed is a
  // derived artifact
  ds.source_hash = j.value("source_hash", ds.source_hash);
  ds.dropped_rows = j.value("dropped_rows", std::size_t{0});
  ds.train_fraction = j.value("train_fraction", 0.0);
  ds.split_seed = j.value("split_seed", std::uint64_t{0});
  ds.is_train = j.value("is_train", std::vector<std::uint8_t>{});
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    ds.noise.applied = n.value("applied", false);
    ds.noise.fraction = n.value("fraction", 0.0);
    ds.noise.amplitude = n.value("amplitude", 0.0);
    ds.noise.seed = n.value("seed", std::uint64_t{0});
    ds.noise.rows = n.value("rows", std::vector<std::size_t>{});
  }
  if (j.contains("standardization")) {
    const auto& st = j["standardization"];
    ds.stats.fitted = st.value("fitted", false);
    const auto get = [&](const char* name, ColumnStats& c) {
      if (st.contains(name)) {
        c.mean = st[name].value("mean", 0.0);
        c.std = st[name].value("std", 1.0);
      }
    };
    get("x", ds.stats.x);
    get("t", ds.stats.t);
    get("rho", ds.stats.rho);
    get("v", ds.stats.v);
    get("q", ds.stats.q);
  }
  return ds;
}

}  // namespace prgp

#endif  // PRGP_DATAIO_HPP
