#pragma once

// Synthetic generation, CSV ingestion, windowing, splitting, normalisation.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/series.hpp"

namespace roaddiff {

struct SyntheticConfig {
  std::size_t steps = 3000;
  TrafficKind kind = TrafficKind::speed;
  std::uint64_t seed = 0;
  double lane_bias_strength = 6.0;
  double noise_std = 1.5;
  double interval_minutes = 5.0;
  std::size_t day_steps = 288;
  double road_ar = 0.9;      // AR(1) coefficient of the shared road fluctuation
  double lane_ar = 0.7;      // AR(1) coefficient of per-lane noise
  double road_noise = 2.0;   // stationary std of the road fluctuation
};

struct SeriesPair {
  TrafficSeries lanes;
  TrafficSeries roads;
};

inline SeriesPair derive_pair(TrafficSeries lanes, const LaneNetwork& net) {
  SeriesPair p;
  p.roads.values = aggregate_lanes(lanes.values, net, lanes.kind);
  p.roads.kind = lanes.kind;
  p.roads.units = lanes.units;
  p.roads.interval_minutes = lanes.interval_minutes;
  p.roads.level = Level::road;
  lanes.level = Level::lane;
  p.lanes = std::move(lanes);
  return p;
}

// Lane value = per-road diurnal base + shared road fluctuation + persistent lane
// bias + per-lane AR(1) noise, clipped at zero. Road values are aggregated from
// the lanes, so the constraints hold exactly.
inline SeriesPair generate_synthetic(const LaneNetwork& net, const SyntheticConfig& cfg) {
  if (cfg.steps == 0) throw ConfigError("synthetic series needs at least one step");
  if (cfg.noise_std < 0.0 || cfg.lane_bias_strength < 0.0) throw ConfigError("synthetic scales must be >= 0");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t roads = net.road_count(), lanes = net.lane_count();
  const bool speed = cfg.kind == TrafficKind::speed;

  std::vector<double> phase(roads), level(roads), amp(roads);
  for (std::size_t i = 0; i < roads; ++i) {
    phase[i] = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(roads, 1)) * 0.25;
    level[i] = speed ? 55.0 + 3.0 * nd(rng) : 100.0 + 10.0 * nd(rng);
    amp[i] = speed ? 12.0 : 60.0;
  }
  std::vector<double> bias(lanes);
  for (auto& b : bias) b = cfg.lane_bias_strength * nd(rng);

  Matrix values(cfg.steps, lanes);
  std::vector<double> road_state(roads, 0.0), lane_state(lanes, 0.0);
  const double road_innov = cfg.road_noise * std::sqrt(1.0 - cfg.road_ar * cfg.road_ar);
  const double lane_innov = cfg.noise_std * std::sqrt(1.0 - cfg.lane_ar * cfg.lane_ar);
  for (std::size_t i = 0; i < roads; ++i) road_state[i] = cfg.road_noise * nd(rng);
  for (std::size_t l = 0; l < lanes; ++l) lane_state[l] = cfg.noise_std * nd(rng);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const double tod = 2.0 * M_PI * static_cast<double>(t % cfg.day_steps) / static_cast<double>(cfg.day_steps);
    if (t > 0) {
      for (std::size_t i = 0; i < roads; ++i) road_state[i] = cfg.road_ar * road_state[i] + road_innov * nd(rng);
      for (std::size_t l = 0; l < lanes; ++l) lane_state[l] = cfg.lane_ar * lane_state[l] + lane_innov * nd(rng);
    }
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t i = net.parent_road()[l];
      double base = level[i] - amp[i] * std::cos(tod + phase[i]);
      if (!speed) base = base / static_cast<double>(net.lanes_of(i));
      values(t, l) = std::max(0.0, base + road_state[i] + bias[l] + lane_state[l]);
    }
  }
  TrafficSeries ls;
  ls.values = std::move(values);
  ls.kind = cfg.kind;
  ls.units = default_units(cfg.kind);
  ls.interval_minutes = cfg.interval_minutes;
  ls.level = Level::lane;
  return derive_pair(std::move(ls), net);
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline long long parse_int(const std::string& s, const char* what, std::size_t line_no) {
  long long v = 0;
  const auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size())
    throw SchemaError(std::string("line ") + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s, std::size_t line_no) {
  double v = 0.0;
  const auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v))
    throw SchemaError("line " + std::to_string(line_no) + ": bad value '" + s + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

// Seconds since the Unix epoch for "YYYY-MM-DDTHH:MM[:SS]" (also accepts a
// space separator and a trailing Z).
inline long long parse_timestamp(const std::string& raw, std::size_t line_no) {
  const std::string s = trim(raw);
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  const int got = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d", &y, &mo, &d, &sep, &h, &mi, &sec);
  if (got < 6 || (sep != 'T' && sep != ' ') || mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 ||
      sec > 60)
    throw SchemaError("line " + std::to_string(line_no) + ": bad ISO-8601 timestamp '" + raw + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) throw SchemaError("line " + std::to_string(line_no) + ": invalid date '" + raw + "'");
  const auto days = sys_days(ymd).time_since_epoch().count();
  return static_cast<long long>(days) * 86400 + h * 3600 + mi * 60 + sec;
}

inline std::string format_timestamp(long long epoch_seconds) {
  using namespace std::chrono;
  const long long day_count = epoch_seconds >= 0 ? epoch_seconds / 86400 : (epoch_seconds - 86399) / 86400;
  const long long rem = epoch_seconds - day_count * 86400;
  const year_month_day ymd{sys_days{days{day_count}}};
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02lld:%02lld:%02lld", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), rem / 3600, (rem / 60) % 60,
                rem % 60);
  return buf;
}

struct RawRows {
  std::vector<long long> stamps;  // distinct, in file order
  std::map<long long, std::size_t> stamp_index;
  std::vector<std::vector<std::optional<double>>> cells;  // [stamp][node]
};

}  // namespace detail

struct CsvLoadResult {
  SeriesPair data;
  std::size_t gap_count = 0;
  long long start_epoch = 0;
};

// Timestamps must be non-decreasing in the file; rows of one timestamp are
// contiguous. Missing (timestamp, lane) cells take the previous observation of
// that lane (leading gaps take the first one).
inline CsvLoadResult load_lane_csv(std::istream& in, const LaneNetwork& net, TrafficKind kind,
                                   double interval_minutes = 5.0) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty CSV");
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  if (header != std::vector<std::string>{"timestamp", "road_id", "lane_id", "value"})
    throw SchemaError("CSV header must be timestamp,road_id,lane_id,value");
  detail::RawRows raw;
  std::size_t line_no = 1;
  long long last = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 4) throw SchemaError("line " + std::to_string(line_no) + ": expected 4 fields");
    const long long ts = detail::parse_timestamp(f[0], line_no);
    const long long road = detail::parse_int(f[1], "road_id", line_no);
    const long long lane = detail::parse_int(f[2], "lane_id", line_no);
    const double v = detail::parse_double(f[3], line_no);
    if (road < 0 || lane < 0 || static_cast<std::size_t>(road) >= net.road_count() ||
        static_cast<std::size_t>(lane) >= net.lanes_of(static_cast<std::size_t>(road)))
      throw SchemaError("line " + std::to_string(line_no) + ": unknown lane (" + f[1] + "," + f[2] + ")");
    if (!raw.stamps.empty() && ts < last)
      throw DataError("line " + std::to_string(line_no) + ": timestamps are not monotone");
    if (raw.stamps.empty() || ts != last) {
      raw.stamp_index[ts] = raw.stamps.size();
      raw.stamps.push_back(ts);
      raw.cells.emplace_back(net.lane_count());
      last = ts;
    }
    raw.cells.back()[net.flat_index(static_cast<std::size_t>(road), static_cast<std::size_t>(lane))] = v;
  }
  if (raw.stamps.empty()) throw DataError("CSV has no data rows");
  const long long step = static_cast<long long>(std::llround(interval_minutes * 60.0));
  if (step <= 0) throw ConfigError("interval must be positive");
  for (std::size_t k = 1; k < raw.stamps.size(); ++k)
    if ((raw.stamps[k] - raw.stamps[0]) % step != 0)
      throw DataError("timestamp " + detail::format_timestamp(raw.stamps[k]) + " is off the fixed interval grid");
  const std::size_t total = static_cast<std::size_t>((raw.stamps.back() - raw.stamps.front()) / step) + 1;

  CsvLoadResult res;
  res.start_epoch = raw.stamps.front();
  Matrix values(total, net.lane_count());
  for (std::size_t l = 0; l < net.lane_count(); ++l) {
    std::optional<double> prev;
    std::size_t leading = 0;
    for (std::size_t t = 0; t < total; ++t) {
      const long long ts = res.start_epoch + static_cast<long long>(t) * step;
      std::optional<double> cell;
      if (auto it = raw.stamp_index.find(ts); it != raw.stamp_index.end()) cell = raw.cells[it->second][l];
      if (cell) {
        if (!prev)
          for (std::size_t b = 0; b < leading; ++b) values(b, l) = *cell;
        values(t, l) = *cell;
        prev = cell;
      } else {
        ++res.gap_count;
        if (prev) values(t, l) = *prev;
        else ++leading;
      }
    }
    if (!prev) throw DataError("lane " + std::to_string(l) + " has no observations");
  }
  TrafficSeries ls;
  ls.values = std::move(values);
  ls.kind = kind;
  ls.units = default_units(kind);
  ls.interval_minutes = interval_minutes;
  ls.level = Level::lane;
  for (double v : ls.values.data)
    if (v < 0.0) throw DataError("negative " + to_string(kind) + " value in CSV");
  res.data = derive_pair(std::move(ls), net);
  return res;
}

inline CsvLoadResult load_lane_csv(const std::string& path, const LaneNetwork& net, TrafficKind kind,
                                   double interval_minutes = 5.0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return load_lane_csv(in, net, kind, interval_minutes);
}

inline void write_lane_csv(std::ostream& out, const TrafficSeries& lanes, const LaneNetwork& net,
                           long long start_epoch = 1704067200) {
  out << "timestamp,road_id,lane_id,value\n";
  const long long step = static_cast<long long>(std::llround(lanes.interval_minutes * 60.0));
  for (std::size_t t = 0; t < lanes.steps(); ++t) {
    const std::string ts = detail::format_timestamp(start_epoch + static_cast<long long>(t) * step);
    for (std::size_t l = 0; l < net.lane_count(); ++l) {
      const auto pos = net.position(l);
      out << ts << ',' << pos.road << ',' << pos.lane << ',' << detail::format_double(lanes.values(t, l)) << '\n';
    }
  }
}

inline void write_lane_csv(const std::string& path, const TrafficSeries& lanes, const LaneNetwork& net,
                           long long start_epoch = 1704067200) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  write_lane_csv(out, lanes, net, start_epoch);
}

// Road CSV: timestamp,road_id,value. No gaps allowed.
inline TrafficSeries load_road_csv(std::istream& in, std::size_t road_count, TrafficKind kind,
                                   double interval_minutes = 5.0) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty CSV");
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  if (header != std::vector<std::string>{"timestamp", "road_id", "value"})
    throw SchemaError("road CSV header must be timestamp,road_id,value");
  std::vector<long long> stamps;
  std::vector<std::vector<std::optional<double>>> cells;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw SchemaError("line " + std::to_string(line_no) + ": expected 3 fields");
    const long long ts = detail::parse_timestamp(f[0], line_no);
    const long long road = detail::parse_int(f[1], "road_id", line_no);
    if (road < 0 || static_cast<std::size_t>(road) >= road_count)
      throw SchemaError("line " + std::to_string(line_no) + ": unknown road " + f[1]);
    if (!stamps.empty() && ts < stamps.back()) throw DataError("line " + std::to_string(line_no) + ": timestamps are not monotone");
    if (stamps.empty() || ts != stamps.back()) {
      stamps.push_back(ts);
      cells.emplace_back(road_count);
    }
    cells.back()[static_cast<std::size_t>(road)] = detail::parse_double(f[2], line_no);
  }
  if (stamps.empty()) throw DataError("road CSV has no data rows");
  TrafficSeries s;
  s.values = Matrix(stamps.size(), road_count);
  for (std::size_t t = 0; t < stamps.size(); ++t)
    for (std::size_t i = 0; i < road_count; ++i) {
      if (!cells[t][i]) throw DataError("road CSV missing road " + std::to_string(i) + " at row block " + std::to_string(t));
      s.values(t, i) = *cells[t][i];
    }
  s.kind = kind;
  s.units = default_units(kind);
  s.interval_minutes = interval_minutes;
  s.level = Level::road;
  return s;
}

inline TrafficSeries load_road_csv(const std::string& path, std::size_t road_count, TrafficKind kind,
                                   double interval_minutes = 5.0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return load_road_csv(in, road_count, kind, interval_minutes);
}

inline void write_road_csv(std::ostream& out, const TrafficSeries& roads, long long start_epoch = 1704067200) {
  out << "timestamp,road_id,value\n";
  const long long step = static_cast<long long>(std::llround(roads.interval_minutes * 60.0));
  for (std::size_t t = 0; t < roads.steps(); ++t) {
    const std::string ts = detail::format_timestamp(start_epoch + static_cast<long long>(t) * step);
    for (std::size_t i = 0; i < roads.nodes(); ++i)
      out << ts << ',' << i << ',' << detail::format_double(roads.values(t, i)) << '\n';
  }
}

inline void write_road_csv(const std::string& path, const TrafficSeries& roads, long long start_epoch = 1704067200) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  write_road_csv(out, roads, start_epoch);
}

// ---------------------------------------------------------------------------
// Normalisation

struct NodeStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::string source = "train";
  std::size_t clamped = 0;  // nodes whose std was replaced by 1
};

inline NodeStats compute_stats(const Matrix& values, std::size_t begin, std::size_t end) {
  if (end <= begin || end > values.rows) throw DataError("compute_stats: empty or out-of-range block");
  NodeStats s;
  s.mean.assign(values.cols, 0.0);
  s.std.assign(values.cols, 0.0);
  const double n = static_cast<double>(end - begin);
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t c = 0; c < values.cols; ++c) s.mean[c] += values(t, c);
  for (auto& m : s.mean) m /= n;
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t c = 0; c < values.cols; ++c) {
      const double d = values(t, c) - s.mean[c];
      s.std[c] += d * d;
    }
  for (auto& v : s.std) {
    v = std::sqrt(v / n);
    if (!(v > 1e-12)) {
      v = 1.0;
      ++s.clamped;
    }
  }
  return s;
}

inline Matrix normalize(const Matrix& x, const NodeStats& s) {
  if (x.cols != s.mean.size()) throw ShapeError("normalize: node count mismatch");
  Matrix out(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t c = 0; c < x.cols; ++c) out(t, c) = (x(t, c) - s.mean[c]) / s.std[c];
  return out;
}

inline Matrix denormalize(const Matrix& z, const NodeStats& s) {
  if (z.cols != s.mean.size()) throw ShapeError("denormalize: node count mismatch");
  Matrix out(z.rows, z.cols);
  for (std::size_t t = 0; t < z.rows; ++t)
    for (std::size_t c = 0; c < z.cols; ++c) out(t, c) = z(t, c) * s.std[c] + s.mean[c];
  return out;
}

inline nlohmann::json to_json(const NodeStats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"source", s.source}, {"clamped", s.clamped}};
}
inline NodeStats node_stats_from_json(const nlohmann::json& j) {
  NodeStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  s.source = j.value("source", std::string("train"));
  s.clamped = j.value("clamped", std::size_t{0});
  return s;
}

// ---------------------------------------------------------------------------
// Windowing

enum class Split { train, val, test };
inline std::string to_string(Split s) { return s == Split::train ? "train" : s == Split::val ? "val" : "test"; }

struct Window {
  std::size_t start = 0;  // absolute timestamp index of the first step
  Matrix road;            // [T x I]
  Matrix lane;            // [T x N]
};

struct WindowedDataset {
  std::vector<Window> samples;
  std::size_t window = 0;
  Split split = Split::train;
  std::size_t block_begin = 0;
  std::size_t block_end = 0;  // exclusive
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SplitBlocks {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t total = 0;
};

inline SplitBlocks split_blocks(std::size_t total, const SplitRatios& r) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  SplitBlocks b;
  b.total = total;
  b.train_end = static_cast<std::size_t>(std::llround(r.train * static_cast<double>(total)));
  b.val_end = static_cast<std::size_t>(std::llround((r.train + r.val) * static_cast<double>(total)));
  b.val_end = std::min(b.val_end, total);
  return b;
}

inline std::size_t window_count(std::size_t length, std::size_t window, std::size_t stride) {
  if (length < window) return 0;
  return (length - window) / stride + 1;
}

// Windows fully inside [begin, end).
inline WindowedDataset make_block_windows(const SeriesPair& data, std::size_t begin, std::size_t end,
                                          std::size_t window, std::size_t stride, Split split) {
  if (window < 1) throw ConfigError("window length must be >= 1");
  if (stride < 1) throw ConfigError("window stride must be >= 1");
  WindowedDataset ds;
  ds.window = window;
  ds.split = split;
  ds.block_begin = begin;
  ds.block_end = end;
  const std::size_t count = window_count(end - begin, window, stride);
  if (count == 0)
    throw DataError(to_string(split) + " block of " + std::to_string(end - begin) + " steps is shorter than window " +
                    std::to_string(window));
  const auto& L = data.lanes.values;
  const auto& R = data.roads.values;
  ds.samples.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t s = begin + k * stride;
    Window w;
    w.start = s;
    w.road = Matrix(window, R.cols);
    w.lane = Matrix(window, L.cols);
    for (std::size_t t = 0; t < window; ++t) {
      std::copy(R.row(s + t).begin(), R.row(s + t).end(), w.road.row(t).begin());
      std::copy(L.row(s + t).begin(), L.row(s + t).end(), w.lane.row(t).begin());
    }
    ds.samples.push_back(std::move(w));
  }
  return ds;
}

struct DatasetSplits {
  WindowedDataset train, val, test;
  SplitBlocks blocks;
};

// Chronological blocks; the validation and test strides may differ from the
// training stride.
inline DatasetSplits make_windows(const SeriesPair& data, std::size_t window, std::size_t stride,
                                  const SplitRatios& ratios = {}, std::optional<std::size_t> eval_stride = {}) {
  if (data.lanes.steps() != data.roads.steps()) throw DataError("lane and road series lengths differ");
  const auto b = split_blocks(data.lanes.steps(), ratios);
  DatasetSplits out;
  out.blocks = b;
  const std::size_t es = eval_stride.value_or(stride);
  out.train = make_block_windows(data, 0, b.train_end, window, stride, Split::train);
  out.val = make_block_windows(data, b.train_end, b.val_end, window, es, Split::val);
  out.test = make_block_windows(data, b.val_end, b.total, window, es, Split::test);
  return out;
}

}  // namespace roaddiff
