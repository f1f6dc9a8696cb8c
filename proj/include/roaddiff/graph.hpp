#pragma once

// Road graph, derived lane graph and the road <-> lane index mapping.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "roaddiff/errors.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

struct RoadNetwork {
  std::size_t road_count = 0;
  Matrix adjacency;                      // I x I, symmetric, zero diagonal
  std::vector<std::size_t> lane_counts;  // J_i >= 1
  std::vector<std::pair<std::size_t, std::size_t>> edges;

  std::size_t total_lanes() const {
    std::size_t n = 0;
    for (auto j : lane_counts) n += j;
    return n;
  }
  std::size_t max_lanes() const {
    std::size_t m = 0;
    for (auto j : lane_counts) m = std::max(m, j);
    return m;
  }
};

struct LanePosition {
  std::size_t road = 0;
  std::size_t lane = 0;
  friend bool operator==(const LanePosition&, const LanePosition&) = default;
};

class LaneNetwork {
 public:
  LaneNetwork() = default;
  LaneNetwork(std::vector<std::size_t> lane_counts, Matrix adjacency)
      : lane_counts_(std::move(lane_counts)), adjacency_(std::move(adjacency)) {
    offsets_.reserve(lane_counts_.size() + 1);
    offsets_.push_back(0);
    for (std::size_t i = 0; i < lane_counts_.size(); ++i) {
      for (std::size_t j = 0; j < lane_counts_[i]; ++j) {
        parent_road_.push_back(i);
        lane_in_road_.push_back(j);
      }
      offsets_.push_back(offsets_.back() + lane_counts_[i]);
    }
  }

  std::size_t lane_count() const { return parent_road_.size(); }
  std::size_t road_count() const { return lane_counts_.size(); }
  const Matrix& adjacency() const { return adjacency_; }
  const std::vector<std::size_t>& parent_road() const { return parent_road_; }
  const std::vector<std::size_t>& lane_counts() const { return lane_counts_; }
  std::size_t lanes_of(std::size_t road) const { return lane_counts_.at(road); }
  std::size_t first_lane(std::size_t road) const { return offsets_.at(road); }

  std::size_t flat_index(std::size_t road, std::size_t lane) const {
    if (road >= lane_counts_.size() || lane >= lane_counts_[road])
      throw IndexError("lane (" + std::to_string(road) + "," + std::to_string(lane) + ") does not exist");
    return offsets_[road] + lane;
  }
  LanePosition position(std::size_t flat) const {
    if (flat >= parent_road_.size()) throw IndexError("flat lane index out of range");
    return {parent_road_[flat], lane_in_road_[flat]};
  }

 private:
  std::vector<std::size_t> lane_counts_;
  Matrix adjacency_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> parent_road_;
  std::vector<std::size_t> lane_in_road_;
};

struct NormalizedAdjacency {
  Matrix matrix;
  bool self_loops = true;
};

inline RoadNetwork build_road_network(const std::vector<std::pair<long long, long long>>& edge_list,
                                      const std::vector<long long>& lane_counts) {
  if (lane_counts.empty()) throw InvalidLaneCount("road network needs at least one road");
  RoadNetwork net;
  net.road_count = lane_counts.size();
  for (std::size_t i = 0; i < lane_counts.size(); ++i) {
    if (lane_counts[i] < 1)
      throw InvalidLaneCount("road " + std::to_string(i) + " has lane count " + std::to_string(lane_counts[i]));
    net.lane_counts.push_back(static_cast<std::size_t>(lane_counts[i]));
  }
  net.adjacency = Matrix(net.road_count, net.road_count);
  const auto in_range = [&](long long v) { return v >= 0 && static_cast<std::size_t>(v) < net.road_count; };
  for (const auto& [a, b] : edge_list) {
    if (!in_range(a) || !in_range(b))
      throw IndexError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") references a missing road");
    if (a == b) throw ContractError("self-edge on road " + std::to_string(a));
    const auto u = static_cast<std::size_t>(a), v = static_cast<std::size_t>(b);
    if (net.adjacency(u, v) == 0.0) net.edges.emplace_back(std::min(u, v), std::max(u, v));
    net.adjacency(u, v) = 1.0;
    net.adjacency(v, u) = 1.0;
  }
  return net;
}

// Lateral edges join neighbouring lanes of one road; longitudinal edges join
// lane j of adjacent roads when both roads have a lane j.
inline LaneNetwork build_lane_network(const RoadNetwork& road) {
  LaneNetwork skeleton(road.lane_counts, Matrix());
  Matrix adj(skeleton.lane_count(), skeleton.lane_count());
  const auto link = [&](std::size_t a, std::size_t b) {
    adj(a, b) = 1.0;
    adj(b, a) = 1.0;
  };
  for (std::size_t i = 0; i < road.road_count; ++i) {
    for (std::size_t j = 0; j + 1 < road.lane_counts[i]; ++j)
      link(skeleton.flat_index(i, j), skeleton.flat_index(i, j + 1));
    for (std::size_t k = i + 1; k < road.road_count; ++k) {
      if (road.adjacency(i, k) == 0.0) continue;
      const std::size_t shared = std::min(road.lane_counts[i], road.lane_counts[k]);
      for (std::size_t j = 0; j < shared; ++j) link(skeleton.flat_index(i, j), skeleton.flat_index(k, j));
    }
  }
  return LaneNetwork(road.lane_counts, std::move(adj));
}

// D^{-1/2} (A + s I) D^{-1/2}, D the degree matrix of A + s I.
inline NormalizedAdjacency normalized_adjacency(const Matrix& a, bool self_loops) {
  if (a.rows != a.cols) throw ShapeError("normalized_adjacency: matrix is not square");
  const std::size_t n = a.rows;
  Matrix m = a;
  if (self_loops)
    for (std::size_t i = 0; i < n; ++i) m(i, i) += 1.0;
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += m(i, j);
    if (deg <= 0.0) throw ZeroDegree("node " + std::to_string(i) + " has zero degree");
    inv_sqrt[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) *= inv_sqrt[i] * inv_sqrt[j];
  return {std::move(m), self_loops};
}

// Attention neighbourhood: adjacency plus the node itself.
inline Matrix neighborhood_mask(const Matrix& adjacency) {
  Matrix m = adjacency;
  for (std::size_t i = 0; i < m.rows; ++i) m(i, i) = 1.0;
  for (auto& x : m.data) x = x != 0.0 ? 1.0 : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Graph description file: {"edges": [[a,b],...], "lane_counts": [...]}

inline RoadNetwork road_network_from_json(const nlohmann::json& j) {
  if (!j.contains("edges") || !j.contains("lane_counts"))
    throw SchemaError("graph description needs 'edges' and 'lane_counts'");
  std::vector<std::pair<long long, long long>> edges;
  for (const auto& e : j.at("edges")) {
    if (!e.is_array() || e.size() != 2) throw SchemaError("graph edge must be a pair of road indices");
    edges.emplace_back(e[0].get<long long>(), e[1].get<long long>());
  }
  return build_road_network(edges, j.at("lane_counts").get<std::vector<long long>>());
}

inline nlohmann::json road_network_to_json(const RoadNetwork& net) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [a, b] : net.edges) edges.push_back({a, b});
  return {{"edges", edges}, {"lane_counts", net.lane_counts}};
}

inline RoadNetwork load_road_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open graph file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("graph file " + path + ": " + e.what());
  }
  return road_network_from_json(j);
}

inline void save_road_network(const RoadNetwork& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write graph file " + path);
  out << road_network_to_json(net).dump(2) << "\n";
}

inline RoadNetwork chain_road_network(const std::vector<long long>& lane_counts) {
  std::vector<std::pair<long long, long long>> edges;
  for (std::size_t i = 0; i + 1 < lane_counts.size(); ++i)
    edges.emplace_back(static_cast<long long>(i), static_cast<long long>(i + 1));
  return build_road_network(edges, lane_counts);
}

}  // namespace roaddiff
