#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "acme/pareto.hpp"
#include "acme/rng.hpp"
#include "acme/serialize.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace acme;

namespace {

ObjectiveTriple triple(double loss, double energy, double size) {
  ObjectiveTriple f;
  f.loss = loss;
  f.energy = energy;
  f.size = size;
  return f;
}

// wraps raw triples as candidates with distinct specs
std::vector<MenuCandidate> wrap(const std::vector<ObjectiveTriple>& fs) {
  std::vector<MenuCandidate> out(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) {
    out[i].spec = {1.0, (int)i + 1};
    out[i].f = fs[i];
  }
  return out;
}

std::vector<ObjectiveTriple> triples_of(const std::vector<MenuCandidate>& cands) {
  std::vector<ObjectiveTriple> fs;
  for (const MenuCandidate& c : cands)
    if (c.valid) fs.push_back(c.f);
  return fs;
}

std::vector<ObjectiveTriple> random_menu(int n, std::uint64_t seed) {
  CounterRng rng(seed, "menu");
  std::vector<ObjectiveTriple> fs(n);
  for (ObjectiveTriple& f : fs) {
    f.loss = 4.0 * rng.uniform();
    f.energy = 5.0 + 500.0 * rng.uniform();
    f.size = 1000.0 + 9000.0 * rng.uniform();
  }
  return fs;
}

// direct definition: drop anything grid-dominated by another valid candidate
std::vector<std::size_t> brute_front(const std::vector<MenuCandidate>& cands, const GridSpec& g) {
  std::vector<std::size_t> pool;
  std::set<std::pair<double, int>> seen;
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (cands[i].valid && seen.insert({cands[i].spec.w, cands[i].spec.d}).second)
      pool.push_back(i);
  std::vector<GridCoord> psi(cands.size());
  for (std::size_t i : pool) psi[i] = grid_coordinates(cands[i].f, g);
  std::vector<std::size_t> kept;
  for (std::size_t i : pool) {
    bool beaten = false;
    for (std::size_t j : pool)
      if (j != i && grid_dominates(psi[j], psi[i])) {
        beaten = true;
        break;
      }
    if (!beaten) kept.push_back(i);
  }
  return kept;
}

DeviceProfile device(const std::string& id, std::int64_t storage, double watts = 10.0,
                     double lat = 2.0) {
  DeviceProfile p;
  p.device_id = id;
  p.storage_params = storage;
  p.base_power = watts;
  p.base_latency = lat;
  return p;
}

}  // namespace

TEST_CASE("ideal and nadir are the component-wise corners") {
  auto [ideal, nadir] = ideal_nadir({triple(1, 10, 5), triple(2, 4, 6)});
  CHECK(ideal.loss == 1.0);
  CHECK(ideal.energy == 4.0);
  CHECK(ideal.size == 5.0);
  CHECK(nadir.loss == 2.0);
  CHECK(nadir.energy == 10.0);
  CHECK(nadir.size == 6.0);

  auto [i1, n1] = ideal_nadir({triple(3, 7, 9)});
  CHECK(i1.loss == n1.loss);
  CHECK(i1.energy == n1.energy);
  CHECK(i1.size == n1.size);

  CHECK_THROWS_AS(ideal_nadir({}), ConfigError);
}

TEST_CASE("cell count comes from the loss range and the granularity") {
  std::vector<ObjectiveTriple> fs = {triple(0.5, 7.0, 100.0), triple(1.5, 7.0, 300.0)};

  GridSpec g = make_grid(fs, 0.3);
  CHECK(g.K == 4);  // ceil(1.0 / 0.3)
  CHECK(g.sigma == 1e-6);  // 1e-6 times the smallest positive range (the loss axis)
  CHECK(g.r[0] == (1.0 + 2e-6) / 4);
  CHECK(g.r[1] == 2e-6 / 4);  // constant axis: padding only
  CHECK(g.r[2] == (200.0 + 2e-6) / 4);

  CHECK(make_grid(fs, 0.5).K == 2);
  CHECK(make_grid(fs, 1.0).K == 1);
  CHECK(make_grid(fs, 10.0).K == 1);

  GridSpec flat = make_grid({triple(2, 2, 2), triple(2, 2, 2)}, 0.3);
  CHECK(flat.K == 1);
  CHECK(flat.sigma == 1e-9);
  CHECK(flat.r[0] == 2e-9);

  GridSpec ex = make_grid(fs, 0.3, 0.01);
  CHECK(ex.sigma == 0.01);
  CHECK(ex.r[0] == 1.02 / 4);

  CHECK_THROWS_AS(make_grid(fs, 0.0), ConfigError);
  CHECK_THROWS_AS(make_grid(fs, -1.0), ConfigError);
  CHECK_THROWS_AS(make_grid({}, 0.3), ConfigError);
}

TEST_CASE("the ideal corner lands in cell 1 and the nadir in cell K") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    std::vector<ObjectiveTriple> fs = random_menu(30, seed);
    GridSpec g = make_grid(fs, 0.25);
    GridCoord lo = grid_coordinates(g.ideal, g);
    GridCoord hi = grid_coordinates(g.nadir, g);
    for (int l = 0; l < 3; ++l) {
      CHECK(lo.psi[l] == 1);
      CHECK(hi.psi[l] == g.K);
    }
    for (const ObjectiveTriple& f : fs) {
      GridCoord c = grid_coordinates(f, g);
      for (int l = 0; l < 3; ++l) {
        CHECK(c.psi[l] >= 1);
        CHECK(c.psi[l] <= g.K);
      }
    }
  }
}

TEST_CASE("cell coordinates are monotone in every objective") {
  CounterRng rng(3, "mono");
  std::vector<ObjectiveTriple> fs = random_menu(40, 17);
  GridSpec g = make_grid(fs, 0.2);
  for (int t = 0; t < 200; ++t) {
    const ObjectiveTriple& a = fs[rng.uniform_int((std::uint32_t)fs.size())];
    const ObjectiveTriple& b = fs[rng.uniform_int((std::uint32_t)fs.size())];
    ObjectiveTriple lo = triple(std::min(a.loss, b.loss), std::min(a.energy, b.energy),
                                std::min(a.size, b.size));
    ObjectiveTriple hi = triple(std::max(a.loss, b.loss), std::max(a.energy, b.energy),
                                std::max(a.size, b.size));
    GridCoord cl = grid_coordinates(lo, g);
    GridCoord ch = grid_coordinates(hi, g);
    for (int l = 0; l < 3; ++l) CHECK(cl.psi[l] <= ch.psi[l]);
  }
}

TEST_CASE("grid dominance needs every axis at least as good and one better") {
  GridCoord a, b;
  a.psi = {1, 2, 3};
  b.psi = {1, 2, 4};
  CHECK(grid_dominates(a, b));
  CHECK(!grid_dominates(b, a));
  b.psi = {1, 2, 3};
  CHECK(!grid_dominates(a, b));  // equal cells: neither side dominates
  b.psi = {2, 1, 3};
  CHECK(!grid_dominates(a, b));
  CHECK(!grid_dominates(b, a));
}

TEST_CASE("the grid front equals the brute-force nondominated set") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::vector<ObjectiveTriple> fs = random_menu(40, 100 + seed);
    // ten exact duplicates stress the all-kept rule for shared cells
    for (int i = 0; i < 10; ++i) fs.push_back(fs[i]);
    std::vector<MenuCandidate> cands = wrap(fs);
    GridSpec g = make_grid(triples_of(cands), 0.3);

    ParetoFrontGrid front = build_pfg(cands, g);
    std::vector<std::size_t> oracle = brute_front(cands, g);
    std::vector<std::size_t> got = front.members;
    std::sort(got.begin(), got.end());
    std::sort(oracle.begin(), oracle.end());
    CAPTURE(seed);
    CHECK(got == oracle);

    // pairwise nondominance holds inside the front
    for (std::size_t i : front.members)
      for (std::size_t j : front.members)
        if (i != j)
          CHECK(!grid_dominates(grid_coordinates(cands[j].f, g), grid_coordinates(cands[i].f, g)));

    // every front member traces back to at least one proposing cell
    for (std::size_t i : front.members) {
      bool proposed = false;
      for (const PfgCell& cell : front.cells)
        proposed |= std::find(cell.kept.begin(), cell.kept.end(), i) != cell.kept.end();
      CHECK(proposed);
    }
  }
}

TEST_CASE("dominance chains collapse to one member and ties keep everyone") {
  std::vector<ObjectiveTriple> chain;
  for (int i = 1; i <= 6; ++i) chain.push_back(triple(i, i, i));
  std::vector<MenuCandidate> cc = wrap(chain);
  GridSpec gc = make_grid(chain, 0.5);
  ParetoFrontGrid fc = build_pfg(cc, gc);
  REQUIRE(fc.members.size() == 1);
  CHECK(fc.members[0] == 0);

  std::vector<ObjectiveTriple> flat(5, triple(1.5, 20.0, 300.0));
  std::vector<MenuCandidate> cf = wrap(flat);
  GridSpec gf = make_grid(flat, 0.5);
  CHECK(build_pfg(cf, gf).members.size() == 5);

  // duplicate specs are folded into their first occurrence
  std::vector<MenuCandidate> dup = wrap({triple(1, 1, 1), triple(1, 1, 1)});
  dup[1].spec = dup[0].spec;
  CHECK(build_pfg(dup, make_grid(triples_of(dup), 0.5)).members ==
        std::vector<std::size_t>{0});

  // invalid candidates never enter the front
  std::vector<MenuCandidate> inv = wrap({triple(1, 1, 1), triple(2, 2, 2)});
  inv[0].valid = false;
  ParetoFrontGrid fi = build_pfg(inv, make_grid({inv[1].f}, 0.5));
  CHECK(fi.members == std::vector<std::size_t>{1});
}

TEST_CASE("storage truncation keeps strictly smaller models only") {
  std::vector<MenuCandidate> cands =
      wrap({triple(1, 1, 100), triple(1, 1, 200), triple(1, 1, 300)});
  std::vector<std::size_t> all = {0, 1, 2};

  std::vector<DeviceProfile> cluster = {device("big", 400), device("small", 250)};
  CHECK(truncate_by_storage(cands, all, cluster) == std::vector<std::size_t>({0, 1}));

  // a candidate exactly at the budget is out: the cut is strict
  std::vector<DeviceProfile> exact = {device("edge", 200)};
  CHECK(truncate_by_storage(cands, all, exact) == std::vector<std::size_t>({0}));

  std::vector<DeviceProfile> tiny = {device("nano", 50)};
  CHECK_THROWS_WITH_AS(truncate_by_storage(cands, all, tiny),
                       doctest::Contains("no feasible backbone"), InfeasibleError);
  try {
    truncate_by_storage(cands, all, tiny);
  } catch (const InfeasibleError& e) {
    std::string msg = e.what();
    CHECK(msg.find("nano") != std::string::npos);
    CHECK(msg.find("50") != std::string::npos);
    CHECK(msg.find("100") != std::string::npos);  // the smallest candidate that still missed
  }

  CHECK_THROWS_AS(truncate_by_storage(cands, all, {}), ConfigError);
}

TEST_CASE("selection walks to the cell nearest the ideal corner") {
  // corners pin the grid to [0,10]^3 with K = 10
  std::vector<ObjectiveTriple> fs = {
      triple(0, 0, 0), triple(10, 10, 10),
      triple(0.5, 1.5, 2.5),  // cell (1,2,3)
      triple(0.5, 2.5, 0.5),  // cell (1,3,1), distance 2 vs sqrt(5)
      triple(1.5, 0.5, 0.5),  // cell (2,1,1), closest of all but outside the loss cell
  };
  std::vector<MenuCandidate> cands = wrap(fs);
  GridSpec g = make_grid(fs, 1.0);
  REQUIRE(g.K == 10);
  REQUIRE(grid_coordinates(fs[2], g).psi == std::array<int, 3>{1, 2, 3});
  REQUIRE(grid_coordinates(fs[3], g).psi == std::array<int, 3>{1, 3, 1});
  REQUIRE(grid_coordinates(fs[4], g).psi == std::array<int, 3>{2, 1, 1});

  CHECK(select_backbone(cands, {2, 3, 4}, g) == 3);
  CHECK(select_backbone(cands, {2, 4}, g) == 2);  // without B the farther same-cell member wins
  CHECK(select_backbone(cands, {4}, g) == 4);
  CHECK_THROWS_AS(select_backbone(cands, {}, g), InfeasibleError);
}

TEST_CASE("selection ties break by size then energy then spec") {
  std::vector<ObjectiveTriple> base = {triple(0, 0, 0), triple(10, 10, 10)};

  // same cell (1,3,1), second entry heavier: size decides
  std::vector<ObjectiveTriple> fs = base;
  fs.push_back(triple(0.5, 2.5, 0.5));
  fs.push_back(triple(0.7, 2.7, 0.7));
  std::vector<MenuCandidate> cands = wrap(fs);
  GridSpec g = make_grid(fs, 1.0);
  REQUIRE(grid_coordinates(fs[2], g).psi == grid_coordinates(fs[3], g).psi);
  CHECK(select_backbone(cands, {2, 3}, g) == 2);

  // equal size, cheaper energy wins
  fs = base;
  fs.push_back(triple(0.5, 2.5, 0.5));
  fs.push_back(triple(0.7, 2.3, 0.5));
  cands = wrap(fs);
  g = make_grid(fs, 1.0);
  REQUIRE(grid_coordinates(fs[2], g).psi == grid_coordinates(fs[3], g).psi);
  CHECK(select_backbone(cands, {2, 3}, g) == 3);

  // identical objectives: lexicographically smaller (w, d) wins
  fs = base;
  fs.push_back(triple(0.5, 2.5, 0.5));
  fs.push_back(triple(0.5, 2.5, 0.5));
  cands = wrap(fs);
  cands[2].spec = {0.5, 1};
  cands[3].spec = {0.25, 1};
  g = make_grid(fs, 1.0);
  std::size_t pick = select_backbone(cands, {2, 3}, g);
  CHECK(cands[pick].spec.w == 0.25);
}

namespace {

// grid, front, storage cut, selection in one go; returns the selected spec
WidthDepthSpec pipeline_select(std::vector<MenuCandidate> cands, double gamma_p,
                               std::int64_t budget, double sigma = 0.0) {
  GridSpec g = make_grid(triples_of(cands), gamma_p, sigma);
  ParetoFrontGrid front = build_pfg(cands, g);
  std::vector<std::size_t> feas =
      truncate_by_storage(cands, front.members, {device("dev", budget)});
  return cands[select_backbone(cands, feas, g)].spec;
}

}  // namespace

TEST_CASE("candidate order never changes the selection") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<ObjectiveTriple> fs = random_menu(25, 500 + seed);
    std::vector<MenuCandidate> cands = wrap(fs);

    GridSpec g = make_grid(fs, 0.3);
    ParetoFrontGrid front = build_pfg(cands, g);
    double lo = cands[front.members[0]].f.size, hi = lo;
    for (std::size_t i : front.members) {
      lo = std::min(lo, cands[i].f.size);
      hi = std::max(hi, cands[i].f.size);
    }
    std::int64_t budget = (std::int64_t)(lo + 0.5 * (hi - lo)) + 1;

    WidthDepthSpec first = pipeline_select(cands, 0.3, budget);
    std::vector<MenuCandidate> shuffled = cands;
    std::mt19937 perm(42 + (unsigned)seed);
    std::shuffle(shuffled.begin(), shuffled.end(), perm);
    WidthDepthSpec second = pipeline_select(shuffled, 0.3, budget);
    CAPTURE(seed);
    CHECK(first.w == second.w);
    CHECK(first.d == second.d);
  }
}

TEST_CASE("rescaling every energy by a constant leaves the selection alone") {
  const double c = 137.5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<ObjectiveTriple> fs = random_menu(25, 900 + seed);
    std::vector<MenuCandidate> cands = wrap(fs);
    std::vector<MenuCandidate> scaled = cands;
    for (MenuCandidate& m : scaled) m.f.energy *= c;

    // with a fixed tiny sigma no candidate sits on a cell boundary, so the
    // scaled grid assigns the same coordinates everywhere
    GridSpec g1 = make_grid(triples_of(cands), 0.3, 1e-9);
    GridSpec g2 = make_grid(triples_of(scaled), 0.3, 1e-9);
    REQUIRE(g1.K == g2.K);
    for (std::size_t i = 0; i < cands.size(); ++i)
      REQUIRE(grid_coordinates(cands[i].f, g1) == grid_coordinates(scaled[i].f, g2));

    WidthDepthSpec a = pipeline_select(cands, 0.3, 1 << 20, 1e-9);
    WidthDepthSpec b = pipeline_select(scaled, 0.3, 1 << 20, 1e-9);
    CAPTURE(seed);
    CHECK(a.w == b.w);
    CHECK(a.d == b.d);
  }
}

TEST_CASE("a shared menu with a tighter budget never selects a larger backbone") {
  int checked = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::vector<ObjectiveTriple> fs = random_menu(20, 2000 + trial);
    std::vector<MenuCandidate> cands = wrap(fs);
    GridSpec g = make_grid(fs, 0.25);
    ParetoFrontGrid front = build_pfg(cands, g);

    double lo = cands[front.members[0]].f.size, hi = lo;
    for (std::size_t i : front.members) {
      lo = std::min(lo, cands[i].f.size);
      hi = std::max(hi, cands[i].f.size);
    }
    std::int64_t b_small = (std::int64_t)(lo + 0.3 * (hi - lo)) + 1;
    std::int64_t b_large = (std::int64_t)hi + 10;

    auto pick = [&](std::int64_t budget) {
      std::vector<std::size_t> feas =
          truncate_by_storage(cands, front.members, {device("dev", budget)});
      return cands[select_backbone(cands, feas, g)].f.size;
    };
    CAPTURE(trial);
    CHECK(pick(b_small) <= pick(b_large));
    ++checked;
  }
  CHECK(checked == 100);
}

// --- menu evaluation against a real model family ---

namespace {

struct FamilyFixture {
  std::string dir;
  TransformerConfig cfg;
  TransformerNet reference;
  FamilyManifest manifest;
  Dataset probe;
};

TransformerConfig pareto_cfg() {
  TransformerConfig c;
  c.depth = 3;
  c.num_heads = 4;
  c.head_dim = 4;
  c.hidden_dim = 16;
  c.ffn_dim = 32;
  c.num_patches = 4;
  c.patch_dim = 6;
  c.num_classes = 5;
  c.seed = 71;
  return c;
}

Dataset pareto_data(const TransformerConfig& c, int n, std::uint64_t seed, const char* stream) {
  SyntheticSpec s;
  s.num_classes = c.num_classes;
  s.patches = c.num_patches;
  s.patch_dim = c.patch_dim;
  std::vector<int> pool(c.num_classes);
  for (int i = 0; i < c.num_classes; ++i) pool[i] = i;
  return make_class_gaussian(s, pool, n, seed, stream);
}

const FamilyFixture& shared_family() {
  static FamilyFixture* fx = [] {
    TransformerConfig cfg = pareto_cfg();
    auto* f = new FamilyFixture{"pareto_family_out", cfg, TransformerNet(cfg, true), {}, {}};
    std::filesystem::remove_all(f->dir);
    Dataset train = pareto_data(cfg, 60, 21, "train");
    f->probe = pareto_data(cfg, 60, 21, "probe");
    ImportanceTable tab = head_importance(f->reference, train, 20);
    DistillationConfig dc;
    dc.steps = 4;
    dc.lr = 0.05;
    f->manifest = build_family(f->reference, tab, {0.5, 0.75, 1.0}, {1, 2, 3}, dc, train, f->dir);
    return f;
  }();
  return *fx;
}

}  // namespace

TEST_CASE("a family menu prices energy at the cluster worst case") {
  const FamilyFixture& fx = shared_family();
  std::vector<DeviceProfile> cluster = {device("d0", 1 << 30, 10.0, 2.0),
                                        device("d1", 1 << 30, 14.0, 1.5)};
  std::vector<MenuCandidate> menu =
      evaluate_menu(fx.manifest, fx.dir, fx.reference, cluster, fx.probe);
  REQUIRE(menu.size() == 9);

  for (std::size_t i = 0; i < menu.size(); ++i) {
    const MenuCandidate& c = menu[i];
    CHECK(c.valid);
    CHECK(std::isfinite(c.f.loss));
    CHECK(c.f.energy == cluster_max_energy(cluster, c.spec));
    CHECK(c.f.size == fx.manifest.members[i].size.analytic);
  }

  // same width-depth product, same energy bill
  auto find = [&](double w, int d) -> const MenuCandidate& {
    for (const MenuCandidate& c : menu)
      if (c.spec.w == w && c.spec.d == d) return c;
    REQUIRE(false);
    return menu[0];
  };
  CHECK(find(0.5, 2).f.energy == find(1.0, 1).f.energy);
  CHECK(find(0.5, 2).f.loss != find(1.0, 1).f.loss);
}

TEST_CASE("menu sizes grow along both axes") {
  const FamilyFixture& fx = shared_family();
  std::vector<DeviceProfile> cluster = {device("d0", 1 << 30)};
  std::vector<MenuCandidate> menu =
      evaluate_menu(fx.manifest, fx.dir, fx.reference, cluster, fx.probe);

  auto size_of = [&](double w, int d) {
    for (const MenuCandidate& c : menu)
      if (c.spec.w == w && c.spec.d == d) return c.f.size;
    REQUIRE(false);
    return 0.0;
  };
  const double widths[] = {0.5, 0.75, 1.0};
  for (int d = 1; d <= 3; ++d)
    for (int i = 0; i + 1 < 3; ++i) CHECK(size_of(widths[i], d) < size_of(widths[i + 1], d));
  for (double w : widths)
    for (int d = 1; d + 1 <= 3; ++d) CHECK(size_of(w, d) < size_of(w, d + 1));
}

TEST_CASE("menu evaluation is identical across thread counts") {
  const FamilyFixture& fx = shared_family();
  std::vector<DeviceProfile> cluster = {device("d0", 1 << 30, 11.0)};
  std::vector<MenuCandidate> one =
      evaluate_menu(fx.manifest, fx.dir, fx.reference, cluster, fx.probe, 1);
  std::vector<MenuCandidate> four =
      evaluate_menu(fx.manifest, fx.dir, fx.reference, cluster, fx.probe, 4);
  REQUIRE(one.size() == four.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].f.loss == four[i].f.loss);
    CHECK(one[i].f.energy == four[i].f.energy);
    CHECK(one[i].f.size == four[i].f.size);
  }
}

TEST_CASE("a candidate that fails evaluation is flagged and skipped") {
  TransformerConfig cfg = pareto_cfg();
  cfg.depth = 1;
  cfg.seed = 77;
  TransformerNet reference(cfg, true);
  Dataset train = pareto_data(cfg, 40, 31, "train");
  Dataset probe = pareto_data(cfg, 40, 31, "probe");
  ImportanceTable tab = head_importance(reference, train, 20);
  DistillationConfig dc;
  dc.steps = 2;
  std::string dir = "pareto_poison_out";
  std::filesystem::remove_all(dir);
  FamilyManifest manifest = build_family(reference, tab, {0.5, 1.0}, {1}, dc, train, dir);
  REQUIRE(manifest.members.size() == 2);

  // poison the first member's weights on disk
  TransformerNet victim = load_family_member(manifest, manifest.members[0], dir);
  victim.params().at("layer0/attn/wq").values[0] = std::numeric_limits<double>::quiet_NaN();
  save_params(victim.params(), dir + "/" + manifest.members[0].weights_file,
              victim.config().hash());

  std::vector<DeviceProfile> cluster = {device("d0", 1 << 30)};
  std::vector<MenuCandidate> menu = evaluate_menu(manifest, dir, reference, cluster, probe);
  CHECK(!menu[0].valid);
  CHECK(std::isnan(menu[0].f.loss));
  CHECK(menu[1].valid);

  // the pipeline still runs on the surviving candidate
  ClusterSpec cs{"c0", cluster};
  ClusterPhase1 res = run_phase1_cluster(manifest, dir, reference, cs, probe, 0.2);
  CHECK(res.selection.w == menu[1].spec.w);
  CHECK(res.selection.d == menu[1].spec.d);
  CHECK(res.audit[0].psi.psi == std::array<int, 3>{0, 0, 0});
}

TEST_CASE("phase one selects a stored candidate and writes the audit table") {
  const FamilyFixture& fx = shared_family();
  // sizes run from 1024 (w=.5, d=1) to 6144 (w=1, d=3); 3000 splits the menu
  std::vector<ClusterSpec> clusters = {
      {"c0", {device("a0", 1 << 30, 10.0, 2.0), device("a1", 1 << 30, 13.0, 2.5)}},
      {"c1", {device("b0", 3000, 9.0, 1.0), device("b1", 1 << 30, 10.0, 2.0)}},
  };
  std::vector<ClusterPhase1> res =
      run_phase1(fx.manifest, fx.dir, fx.reference, clusters, fx.probe, 0.2);
  REQUIRE(res.size() == 2);

  for (const ClusterPhase1& r : res) {
    int selected = 0;
    for (const MenuCandidate& c : r.audit) {
      if (c.selected) {
        ++selected;
        CHECK(c.valid);
        CHECK(c.in_pfg);
        CHECK(c.feasible);
      }
      if (c.valid) {
        for (int l = 0; l < 3; ++l) {
          CHECK(c.psi.psi[l] >= 1);
          CHECK(c.psi.psi[l] <= r.grid.K);
        }
      }
    }
    CHECK(selected == 1);
    CHECK(r.audit[r.selected_index].spec.w == r.selection.w);
    CHECK(r.audit[r.selected_index].spec.d == r.selection.d);
  }

  // every c1 candidate at or over the 3000 budget is marked infeasible
  for (const MenuCandidate& c : res[1].audit) CHECK(c.feasible == (c.f.size < 3000.0));
  CHECK(res[1].audit[res[1].selected_index].f.size < 3000.0);

  std::string csv = "pareto_c0_test.csv";
  write_pareto_csv(res[0], csv);
  std::ifstream in(csv);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header == "w,d,loss,energy_j,size,psi_loss,psi_energy,psi_size,valid,in_pfg,feasible,selected");
  int rows = 0, selected_rows = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    ++rows;
    if (line.size() >= 2 && line.substr(line.size() - 2) == ",1") ++selected_rows;
  }
  CHECK(rows == 9);
  CHECK(selected_rows == 1);
}

TEST_CASE("an impossible storage budget names the binding device") {
  const FamilyFixture& fx = shared_family();
  ClusterSpec cs{"tiny", {device("nano", 10)}};
  try {
    run_phase1_cluster(fx.manifest, fx.dir, fx.reference, cs, fx.probe, 0.2);
    FAIL("expected InfeasibleError");
  } catch (const InfeasibleError& e) {
    std::string msg = e.what();
    CHECK(msg.find("tiny") != std::string::npos);
    CHECK(msg.find("no feasible backbone") != std::string::npos);
    CHECK(msg.find("nano") != std::string::npos);
  }
  CHECK_THROWS_AS(run_phase1(fx.manifest, fx.dir, fx.reference, {}, fx.probe, 0.2), ConfigError);
}
