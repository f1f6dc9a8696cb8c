#pragma once

// Learning-free lane mapping: speed replicated, flow split equally.

#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/series.hpp"

namespace roaddiff {

inline TrafficSeries physics_infer(const TrafficSeries& road, const LaneNetwork& net, TrafficKind kind) {
  if (road.level != Level::road) throw ContractError("physics_infer: expected a road-level series");
  require_kind(kind, road.kind, "physics_infer");
  TrafficSeries out;
  out.values = road_to_lane_values(road.values, net, kind);
  out.kind = kind;
  out.units = road.units;
  out.interval_minutes = road.interval_minutes;
  out.level = Level::lane;
  return out;
}

}  // namespace roaddiff
