#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "acme/dataset.hpp"
#include "acme/energy.hpp"
#include "acme/family.hpp"

namespace acme {

// All three objectives are minimized.
struct ObjectiveTriple {
  double loss = 0.0;    // cross entropy with the reference task head attached
  double energy = 0.0;  // worst-case device energy in the cluster, joules
  double size = 0.0;    // analytic backbone parameter count

  double operator[](int l) const { return l == 0 ? loss : (l == 1 ? energy : size); }
};

// Component-wise best and worst corners over the valid candidates.
std::pair<ObjectiveTriple, ObjectiveTriple> ideal_nadir(const std::vector<ObjectiveTriple>& fs);

// Axis-aligned grid over [ideal, nadir]. Every axis is cut into the same K
// cells; K comes from the loss range and the loss granularity gamma_p, and a
// small sigma pads the ranges so cell widths stay positive even when an
// objective is constant across the menu.
struct GridSpec {
  int K = 1;
  double sigma = 1e-9;
  double gamma_p = 0.0;
  ObjectiveTriple ideal;
  ObjectiveTriple nadir;
  std::array<double, 3> r{};  // cell width per objective, (range + 2*sigma) / K

  double range(int l) const { return nadir[l] - ideal[l]; }
};

// sigma <= 0 selects the default: 1e-6 times the smallest strictly positive
// range, or 1e-9 when every objective is constant.
GridSpec make_grid(const std::vector<ObjectiveTriple>& fs, double gamma_p, double sigma = 0.0);

// 1-based cell index per objective: psi_l = ceil((f_l - ideal_l + sigma) / r_l).
// Candidates inside [ideal, nadir] land in 1..K; the ideal corner lands in
// cell 1 on every axis.
struct GridCoord {
  std::array<int, 3> psi{1, 1, 1};

  bool operator==(const GridCoord& o) const { return psi == o.psi; }
  bool operator!=(const GridCoord& o) const { return !(*this == o); }
};

GridCoord grid_coordinates(const ObjectiveTriple& f, const GridSpec& g);

// a <= b on every axis and a < b on at least one.
bool grid_dominates(const GridCoord& a, const GridCoord& b);

// One menu entry with everything the phase-1 audit wants to show about it.
struct MenuCandidate {
  WidthDepthSpec spec;
  ObjectiveTriple f;
  bool valid = true;  // false when evaluation produced a non-finite objective
  GridCoord psi;
  bool in_pfg = false;
  bool feasible = false;  // strictly under the cluster's tightest storage budget
  bool selected = false;
};

// Evaluates every manifest member for one cluster. Loss is measured on the
// shared probe set with the reference model's classifier head grafted on
// (truncated to the member's width), energy is the cluster max, size is the
// analytic count from the manifest. Members whose evaluation throws a numeric
// error are kept in the list but flagged invalid.
std::vector<MenuCandidate> evaluate_menu(const FamilyManifest& manifest, const std::string& dir,
                                         const TransformerNet& reference,
                                         const std::vector<DeviceProfile>& cluster,
                                         const Dataset& probe, int threads = 1);

// Cell (objective l, index k) with the candidates kept as best-in-cell.
struct PfgCell {
  int objective = 0;
  int k = 1;
  std::vector<std::size_t> kept;
};

struct ParetoFrontGrid {
  std::vector<std::size_t> members;  // indices into the candidate list
  std::vector<PfgCell> cells;        // provenance: which cell proposed whom
};

// Unions the per-cell optima over every occupied (objective, cell) pair, then
// drops anything grid-dominated by another valid candidate. The result equals
// the set of grid-nondominated candidates; the cells record where each member
// was proposed. Invalid candidates never enter. Duplicate specs are kept once.
ParetoFrontGrid build_pfg(const std::vector<MenuCandidate>& cands, const GridSpec& g);

// Keeps the subset of `members` whose size is strictly below the smallest
// storage budget in the cluster. An empty result throws InfeasibleError
// naming the binding device and budget.
std::vector<std::size_t> truncate_by_storage(const std::vector<MenuCandidate>& cands,
                                             const std::vector<std::size_t>& members,
                                             const std::vector<DeviceProfile>& cluster);

// Picks from `feasible`: restrict to the loss cell of the lowest-loss member,
// then take the candidate whose cell coordinates are closest (Euclidean) to
// the ideal corner's cell. Ties break by smaller size, then smaller energy,
// then lexicographic (w, d).
std::size_t select_backbone(const std::vector<MenuCandidate>& cands,
                            const std::vector<std::size_t>& feasible, const GridSpec& g);

struct ClusterPhase1 {
  std::string cluster_id;
  GridSpec grid;
  std::vector<MenuCandidate> audit;  // all candidates with flags filled in
  ParetoFrontGrid pfg;
  std::size_t selected_index = 0;    // into audit
  WidthDepthSpec selection;
};

struct ClusterSpec {
  std::string cluster_id;
  std::vector<DeviceProfile> devices;
};

// Full phase-1 pass for one cluster: evaluate, grid, front, storage cut,
// selection. Rechecks the storage constraint on the winner before returning.
ClusterPhase1 run_phase1_cluster(const FamilyManifest& manifest, const std::string& dir,
                                 const TransformerNet& reference, const ClusterSpec& cluster,
                                 const Dataset& probe, double gamma_p, double sigma = 0.0,
                                 int threads = 1);

std::vector<ClusterPhase1> run_phase1(const FamilyManifest& manifest, const std::string& dir,
                                      const TransformerNet& reference,
                                      const std::vector<ClusterSpec>& clusters,
                                      const Dataset& probe, double gamma_p, double sigma = 0.0,
                                      int threads = 1);

// One row per candidate: spec, objectives, cell coordinates, flags.
void write_pareto_csv(const ClusterPhase1& result, const std::string& file);

}  // namespace acme
