#include "acme/pareto.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <tuple>

#include "acme/errors.hpp"
#include "acme/parallel.hpp"

namespace acme {

std::pair<ObjectiveTriple, ObjectiveTriple> ideal_nadir(const std::vector<ObjectiveTriple>& fs) {
  if (fs.empty()) throw ConfigError("ideal_nadir: empty objective list");
  ObjectiveTriple ideal = fs[0];
  ObjectiveTriple nadir = fs[0];
  for (const ObjectiveTriple& f : fs) {
    ideal.loss = std::min(ideal.loss, f.loss);
    ideal.energy = std::min(ideal.energy, f.energy);
    ideal.size = std::min(ideal.size, f.size);
    nadir.loss = std::max(nadir.loss, f.loss);
    nadir.energy = std::max(nadir.energy, f.energy);
    nadir.size = std::max(nadir.size, f.size);
  }
  return {ideal, nadir};
}

GridSpec make_grid(const std::vector<ObjectiveTriple>& fs, double gamma_p, double sigma) {
  if (!(gamma_p > 0.0)) throw ConfigError("grid granularity gamma_p must be > 0");
  GridSpec g;
  g.gamma_p = gamma_p;
  std::tie(g.ideal, g.nadir) = ideal_nadir(fs);
  double loss_range = g.nadir.loss - g.ideal.loss;
  g.K = std::max(1, (int)std::ceil(loss_range / gamma_p));
  if (sigma > 0.0) {
    g.sigma = sigma;
  } else {
    double min_pos = std::numeric_limits<double>::infinity();
    for (int l = 0; l < 3; ++l)
      if (g.range(l) > 0.0) min_pos = std::min(min_pos, g.range(l));
    g.sigma = std::isfinite(min_pos) ? 1e-6 * min_pos : 1e-9;
  }
  for (int l = 0; l < 3; ++l) g.r[l] = (g.range(l) + 2.0 * g.sigma) / g.K;
  return g;
}

GridCoord grid_coordinates(const ObjectiveTriple& f, const GridSpec& g) {
  GridCoord c;
  for (int l = 0; l < 3; ++l) c.psi[l] = (int)std::ceil((f[l] - g.ideal[l] + g.sigma) / g.r[l]);
  return c;
}

bool grid_dominates(const GridCoord& a, const GridCoord& b) {
  bool strict = false;
  for (int l = 0; l < 3; ++l) {
    if (a.psi[l] > b.psi[l]) return false;
    if (a.psi[l] < b.psi[l]) strict = true;
  }
  return strict;
}

std::vector<MenuCandidate> evaluate_menu(const FamilyManifest& manifest, const std::string& dir,
                                         const TransformerNet& reference,
                                         const std::vector<DeviceProfile>& cluster,
                                         const Dataset& probe, int threads) {
  if (manifest.members.empty()) throw ConfigError("evaluate_menu: family manifest has no members");
  const Batch batch = probe.all();
  std::vector<MenuCandidate> out(manifest.members.size());
  parallel_for((int)manifest.members.size(), threads, [&](int i) {
    const FamilyMember& mem = manifest.members[i];
    MenuCandidate c;
    c.spec = mem.spec;
    c.f.size = mem.size.analytic;
    c.f.energy = cluster_max_energy(cluster, mem.spec);
    try {
      TransformerNet net = load_family_member(manifest, mem, dir);
      // graft the reference task head, truncated to the member's hidden width
      TensorBuf& hw = net.params().at("head/w");
      hw.as2d() = reference.params().at("head/w").as2d().topRows(hw.view_rows());
      net.params().at("head/b").values = reference.params().at("head/b").values;
      c.f.loss = eval_ce_loss(net, batch);
      if (!std::isfinite(c.f.loss))
        throw NumericError("non-finite loss " + std::to_string(c.f.loss));
    } catch (const NumericError& e) {
      c.valid = false;
      c.f.loss = std::numeric_limits<double>::quiet_NaN();
      std::fprintf(stderr, "phase1: candidate (w=%g, d=%d) excluded: %s\n", mem.spec.w, mem.spec.d,
                   e.what());
    }
    out[i] = c;
  });
  return out;
}

namespace {

// b is at least as good on both objectives other than `skip` and better on one
bool rem_dominates(const GridCoord& b, const GridCoord& a, int skip) {
  bool strict = false;
  for (int l = 0; l < 3; ++l) {
    if (l == skip) continue;
    if (b.psi[l] > a.psi[l]) return false;
    if (b.psi[l] < a.psi[l]) strict = true;
  }
  return strict;
}

}  // namespace

ParetoFrontGrid build_pfg(const std::vector<MenuCandidate>& cands, const GridSpec& g) {
  // valid candidates, one representative per distinct (w, d)
  std::vector<std::size_t> pool;
  std::set<std::pair<double, int>> seen;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (!cands[i].valid) continue;
    if (!seen.insert({cands[i].spec.w, cands[i].spec.d}).second) continue;
    pool.push_back(i);
  }
  std::vector<GridCoord> psi(cands.size());
  for (std::size_t i : pool) psi[i] = grid_coordinates(cands[i].f, g);

  ParetoFrontGrid front;
  std::set<std::size_t> proposed;
  for (int l = 0; l < 3; ++l) {
    std::map<int, std::vector<std::size_t>> cells;
    for (std::size_t i : pool) cells[psi[i].psi[l]].push_back(i);
    for (auto& [k, members] : cells) {
      PfgCell cell;
      cell.objective = l;
      cell.k = k;
      for (std::size_t i : members) {
        bool beaten = false;
        for (std::size_t j : members) {
          if (j != i && rem_dominates(psi[j], psi[i], l)) {
            beaten = true;
            break;
          }
        }
        if (!beaten) cell.kept.push_back(i);
      }
      for (std::size_t i : cell.kept) proposed.insert(i);
      front.cells.push_back(std::move(cell));
    }
  }

  // the union can still contain pairs dominated across cells; drop those
  for (std::size_t i : proposed) {
    bool beaten = false;
    for (std::size_t j : pool) {
      if (j != i && grid_dominates(psi[j], psi[i])) {
        beaten = true;
        break;
      }
    }
    if (!beaten) front.members.push_back(i);
  }
  return front;
}

std::vector<std::size_t> truncate_by_storage(const std::vector<MenuCandidate>& cands,
                                             const std::vector<std::size_t>& members,
                                             const std::vector<DeviceProfile>& cluster) {
  if (cluster.empty()) throw ConfigError("truncate_by_storage: empty cluster");
  std::size_t binding = 0;
  for (std::size_t i = 1; i < cluster.size(); ++i)
    if (cluster[i].storage_params < cluster[binding].storage_params) binding = i;
  const double budget = (double)cluster[binding].storage_params;

  std::vector<std::size_t> kept;
  double smallest = std::numeric_limits<double>::infinity();
  for (std::size_t i : members) {
    smallest = std::min(smallest, cands[i].f.size);
    if (cands[i].f.size < budget) kept.push_back(i);
  }
  if (kept.empty()) {
    char msg[256];
    std::snprintf(msg, sizeof(msg),
                  "no feasible backbone: smallest candidate has %.17g parameters, storage budget "
                  "is %lld (device '%s')",
                  smallest, (long long)cluster[binding].storage_params,
                  cluster[binding].device_id.c_str());
    throw InfeasibleError(msg);
  }
  return kept;
}

std::size_t select_backbone(const std::vector<MenuCandidate>& cands,
                            const std::vector<std::size_t>& feasible, const GridSpec& g) {
  if (feasible.empty()) throw InfeasibleError("backbone selection on an empty feasible set");

  auto order_key = [&](std::size_t i) {
    return std::make_tuple(cands[i].f.loss, cands[i].f.size, cands[i].f.energy, cands[i].spec.w,
                           cands[i].spec.d);
  };
  std::size_t best_loss = feasible[0];
  for (std::size_t i : feasible)
    if (order_key(i) < order_key(best_loss)) best_loss = i;

  const int h = grid_coordinates(cands[best_loss].f, g).psi[0];
  const GridCoord star = grid_coordinates(g.ideal, g);

  std::size_t pick = cands.size();
  std::tuple<std::int64_t, double, double, double, int> pick_key;
  for (std::size_t i : feasible) {
    GridCoord c = grid_coordinates(cands[i].f, g);
    if (c.psi[0] != h) continue;
    std::int64_t d2 = 0;
    for (int l = 0; l < 3; ++l) {
      std::int64_t d = c.psi[l] - star.psi[l];
      d2 += d * d;
    }
    auto key = std::make_tuple(d2, cands[i].f.size, cands[i].f.energy, cands[i].spec.w,
                               cands[i].spec.d);
    if (pick == cands.size() || key < pick_key) {
      pick = i;
      pick_key = key;
    }
  }
  return pick;
}

ClusterPhase1 run_phase1_cluster(const FamilyManifest& manifest, const std::string& dir,
                                 const TransformerNet& reference, const ClusterSpec& cluster,
                                 const Dataset& probe, double gamma_p, double sigma, int threads) {
  if (cluster.devices.empty())
    throw ConfigError("cluster '" + cluster.cluster_id + "' has no devices");

  ClusterPhase1 res;
  res.cluster_id = cluster.cluster_id;
  res.audit = evaluate_menu(manifest, dir, reference, cluster.devices, probe, threads);

  std::vector<ObjectiveTriple> valid;
  for (const MenuCandidate& c : res.audit)
    if (c.valid) valid.push_back(c.f);
  if (valid.empty())
    throw InfeasibleError("cluster '" + cluster.cluster_id +
                          "': every candidate failed evaluation");
  res.grid = make_grid(valid, gamma_p, sigma);

  std::size_t min_dev = 0;
  for (std::size_t i = 1; i < cluster.devices.size(); ++i)
    if (cluster.devices[i].storage_params < cluster.devices[min_dev].storage_params) min_dev = i;
  const double budget = (double)cluster.devices[min_dev].storage_params;

  for (MenuCandidate& c : res.audit) {
    if (!c.valid) {
      c.psi.psi = {0, 0, 0};
      continue;
    }
    c.psi = grid_coordinates(c.f, res.grid);
    c.feasible = c.f.size < budget;
  }

  res.pfg = build_pfg(res.audit, res.grid);
  for (std::size_t i : res.pfg.members) res.audit[i].in_pfg = true;

  std::vector<std::size_t> feasible;
  try {
    feasible = truncate_by_storage(res.audit, res.pfg.members, cluster.devices);
  } catch (const InfeasibleError& e) {
    throw InfeasibleError("cluster '" + cluster.cluster_id + "': " + e.what());
  }
  res.selected_index = select_backbone(res.audit, feasible, res.grid);
  res.audit[res.selected_index].selected = true;
  res.selection = res.audit[res.selected_index].spec;

  // the storage constraint must hold on the winner, every run
  if (!(res.audit[res.selected_index].f.size < budget))
    throw StateError("cluster '" + cluster.cluster_id +
                     "': selected backbone violates the storage budget");
  return res;
}

std::vector<ClusterPhase1> run_phase1(const FamilyManifest& manifest, const std::string& dir,
                                      const TransformerNet& reference,
                                      const std::vector<ClusterSpec>& clusters,
                                      const Dataset& probe, double gamma_p, double sigma,
                                      int threads) {
  if (clusters.empty()) throw ConfigError("run_phase1: no clusters");
  std::vector<ClusterPhase1> out;
  out.reserve(clusters.size());
  for (const ClusterSpec& c : clusters)
    out.push_back(run_phase1_cluster(manifest, dir, reference, c, probe, gamma_p, sigma, threads));
  return out;
}

void write_pareto_csv(const ClusterPhase1& result, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw StateError("cannot write '" + file + "'");
  out << "w,d,loss,energy_j,size,psi_loss,psi_energy,psi_size,valid,in_pfg,feasible,selected\n";
  char row[320];
  for (const MenuCandidate& c : result.audit) {
    std::snprintf(row, sizeof(row), "%.17g,%d,%.17g,%.17g,%.17g,%d,%d,%d,%d,%d,%d,%d\n", c.spec.w,
                  c.spec.d, c.f.loss, c.f.energy, c.f.size, c.psi.psi[0], c.psi.psi[1],
                  c.psi.psi[2], (int)c.valid, (int)c.in_pfg, (int)c.feasible, (int)c.selected);
    out << row;
  }
  if (!out.good()) throw StateError("write failed for '" + file + "'");
}

}  // namespace acme
