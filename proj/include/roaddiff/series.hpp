#pragma once

#include <string>

#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

enum class TrafficKind { speed, flow };
enum class Level { road, lane };

inline std::string to_string(TrafficKind k) { return k == TrafficKind::speed ? "speed" : "flow"; }
inline std::string to_string(Level l) { return l == Level::road ? "road" : "lane"; }

inline TrafficKind parse_kind(const std::string& s) {
  if (s == "speed") return TrafficKind::speed;
  if (s == "flow") return TrafficKind::flow;
  throw ConfigError("unknown traffic kind '" + s + "' (expected speed or flow)");
}

inline std::string default_units(TrafficKind k) { return k == TrafficKind::speed ? "miles/hour" : "veh/5-min"; }

struct TrafficSeries {
  Matrix values;  // [T_total x nodes]
  TrafficKind kind = TrafficKind::speed;
  std::string units;
  double interval_minutes = 5.0;
  Level level = Level::lane;

  std::size_t steps() const { return values.rows; }
  std::size_t nodes() const { return values.cols; }
};

inline void require_kind(TrafficKind expected, TrafficKind actual, const char* where) {
  if (expected != actual)
    throw ContractError(std::string(where) + ": series is " + to_string(actual) + " but " + to_string(expected) +
                        " was requested");
}

// Road values implied by lane values: mean over lanes (speed) or sum (flow).
inline Matrix aggregate_lanes(const Matrix& lanes, const LaneNetwork& net, TrafficKind kind) {
  if (lanes.cols != net.lane_count()) throw ShapeError("aggregate_lanes: lane column count mismatch");
  Matrix out(lanes.rows, net.road_count());
  for (std::size_t t = 0; t < lanes.rows; ++t)
    for (std::size_t l = 0; l < lanes.cols; ++l) out(t, net.parent_road()[l]) += lanes(t, l);
  if (kind == TrafficKind::speed)
    for (std::size_t t = 0; t < out.rows; ++t)
      for (std::size_t i = 0; i < out.cols; ++i) out(t, i) /= static_cast<double>(net.lanes_of(i));
  return out;
}

// Per-lane view of a road matrix: flow divided by J_i, speed copied.
inline Matrix road_to_lane_values(const Matrix& roads, const LaneNetwork& net, TrafficKind kind) {
  if (roads.cols != net.road_count()) throw ShapeError("road_to_lane_values: road column count mismatch");
  Matrix out(roads.rows, net.lane_count());
  for (std::size_t t = 0; t < roads.rows; ++t)
    for (std::size_t l = 0; l < out.cols; ++l) {
      const std::size_t i = net.parent_road()[l];
      out(t, l) = kind == TrafficKind::flow ? roads(t, i) / static_cast<double>(net.lanes_of(i)) : roads(t, i);
    }
  return out;
}

}  // namespace roaddiff
