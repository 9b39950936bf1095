#include <cmath>
#include <fstream>

#include "acme/energy.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace acme;
using namespace acme::testutil;

namespace {

DeviceProfile worked_profile() {
  DeviceProfile p;
  p.device_id = "bench";
  p.base_power = 10.0;
  p.alpha_g = 0.1;
  p.alpha_beta = 0.05;
  p.patches = 16;
  p.base_latency = 2.0;
  p.alpha_l = 0.25;
  p.storage_params = 1000;
  p.epochs = 1;
  p.vcpus = 4;
  return p;
}

DeviceProfile random_profile(CounterRng& rng, const std::string& id) {
  DeviceProfile p;
  p.device_id = id;
  p.base_power = 1.0 + 20.0 * rng.uniform();
  p.alpha_g = 0.5 * rng.uniform();
  p.alpha_beta = 0.1 * rng.uniform();
  p.patches = int(rng.uniform_int(32));
  p.base_latency = 0.5 + 8.0 * rng.uniform();
  p.alpha_l = 0.5 * rng.uniform();
  p.storage_params = 1 + rng.uniform_int(100000);
  p.epochs = 1 + int(rng.uniform_int(4));
  p.vcpus = 1 + int(rng.uniform_int(8));
  return p;
}

}  // namespace

TEST_CASE("power, latency and energy match the worked examples") {
  // G=10, dG=1, w=0.5, d=4, p=16, G_beta=0.5: P = 10 + 1*2 + 16*0.5 = 20
  DeviceProfile p = worked_profile();
  CHECK(power_watts(p, {0.5, 4}) == 20.0);

  // L=2, dL=0.5, w=1, d=6: T = 2 + 3 = 5
  CHECK(latency_seconds(p, {1.0, 6}) == 5.0);

  // k=1, P=20, T=5: E = 100 (dL = 1.5 puts T = 5 at the same w*d = 2 as P = 20)
  DeviceProfile r = worked_profile();
  r.alpha_l = 0.75;
  CHECK(power_watts(r, {1.0, 2}) == 20.0);
  CHECK(latency_seconds(r, {1.0, 2}) == 5.0);
  CHECK(energy_joules(r, {1.0, 2}) == 100.0);
}

TEST_CASE("zero-size limits and degenerate cases") {
  DeviceProfile p = worked_profile();
  p.patches = 0;
  // w*d -> 0 limit: P -> G
  WidthDepthSpec tiny{1e-9, 1};
  CHECK(power_watts(p, tiny) == doctest::Approx(p.base_power).epsilon(1e-9));
  p.alpha_l = 0.0;
  for (int d : {1, 3, 6}) CHECK(latency_seconds(p, {0.7, d}) == p.base_latency);
}

TEST_CASE("doubling the base values with fixed fractions scales as documented") {
  CounterRng rng(7, "scale");
  for (int i = 0; i < 50; ++i) {
    DeviceProfile p = random_profile(rng, "r" + std::to_string(i));
    WidthDepthSpec spec{0.1 + 0.9 * rng.uniform(), 1 + int(rng.uniform_int(6))};
    DeviceProfile doubled = p;
    doubled.base_power *= 2.0;
    CHECK(power_watts(doubled, spec) ==
          doctest::Approx(2.0 * power_watts(p, spec)).epsilon(1e-12));
    // scaling both bases by c multiplies energy by c^2
    double c = 0.5 + 3.0 * rng.uniform();
    DeviceProfile scaled = p;
    scaled.base_power *= c;
    scaled.base_latency *= c;
    CHECK(energy_joules(scaled, spec) ==
          doctest::Approx(c * c * energy_joules(p, spec)).epsilon(1e-12));
  }
}

TEST_CASE("energy is monotone in w*d") {
  CounterRng rng(8, "mono");
  for (int i = 0; i < 100; ++i) {
    DeviceProfile p = random_profile(rng, "m" + std::to_string(i));
    double w1 = 0.05 + 0.95 * rng.uniform(), w2 = 0.05 + 0.95 * rng.uniform();
    int d1 = 1 + int(rng.uniform_int(6)), d2 = 1 + int(rng.uniform_int(6));
    if (w1 * d1 > w2 * d2) {
      std::swap(w1, w2);
      std::swap(d1, d2);
    }
    CHECK(energy_joules(p, {w1, d1}) <= energy_joules(p, {w2, d2}) + 1e-12);
  }
}

TEST_CASE("energy is an exact quadratic in w*d") {
  CounterRng rng(9, "quad");
  for (int trial = 0; trial < 20; ++trial) {
    DeviceProfile p = random_profile(rng, "q" + std::to_string(trial));
    // sample four (w*d) points and fit a parabola through the first three
    double xs[4], es[4];
    for (int i = 0; i < 4; ++i) {
      xs[i] = 0.2 + 1.3 * i + rng.uniform();
      es[i] = p.epochs * ((p.base_power + p.dG() * xs[i]) + p.patches * p.g_beta()) *
              (p.base_latency + p.dL() * xs[i]);
    }
    Eigen::Matrix3d V;
    Eigen::Vector3d y;
    for (int i = 0; i < 3; ++i) {
      V(i, 0) = 1.0;
      V(i, 1) = xs[i];
      V(i, 2) = xs[i] * xs[i];
      y(i) = es[i];
    }
    Eigen::Vector3d coef = V.colPivHouseholderQr().solve(y);
    double predicted = coef(0) + coef(1) * xs[3] + coef(2) * xs[3] * xs[3];
    CHECK(std::abs(predicted - es[3]) <= 1e-8 * std::max(1.0, std::abs(es[3])));
  }
}

TEST_CASE("cluster energy is the max, order-free and monotone under growth") {
  DeviceProfile a = worked_profile(), b = worked_profile(), c = worked_profile();
  a.device_id = "a";
  b.device_id = "b";
  c.device_id = "c";
  WidthDepthSpec spec{0.5, 4};
  // arrange E = 100 and E = 140 via epochs on a fixed (P, T)
  double e1 = energy_joules(a, spec);
  b.base_power *= 1.4;
  double e2 = energy_joules(b, spec);
  CHECK(cluster_max_energy({a, b}, spec) == std::max(e1, e2));
  CHECK(cluster_max_energy({b, a}, spec) == cluster_max_energy({a, b}, spec));
  CHECK(cluster_max_energy({a}, spec) == e1);
  c.base_power *= 2.0;
  CHECK(cluster_max_energy({a, b, c}, spec) >= cluster_max_energy({a, b}, spec));
  CHECK_THROWS_AS(cluster_max_energy({}, spec), ConfigError);
}

TEST_CASE("profile files round-trip and reject bad entries precisely") {
  std::vector<DeviceProfile> menu = default_profile_menu(6, 42, 1000.0, 16);
  CHECK(menu.size() == 6);
  for (const DeviceProfile& p : menu) {
    CHECK(p.vcpus >= 3);
    CHECK(p.vcpus <= 7);
    CHECK(p.storage_params >= 1);
  }
  // deterministic for a fixed seed
  std::vector<DeviceProfile> again = default_profile_menu(6, 42, 1000.0, 16);
  for (std::size_t i = 0; i < menu.size(); ++i) {
    CHECK(menu[i].base_power == again[i].base_power);
    CHECK(menu[i].storage_params == again[i].storage_params);
  }

  save_profiles_json(menu, "profiles_test.json");
  std::vector<DeviceProfile> loaded = load_profiles_json("profiles_test.json");
  REQUIRE(loaded.size() == menu.size());
  for (std::size_t i = 0; i < menu.size(); ++i) {
    CHECK(loaded[i].device_id == menu[i].device_id);
    CHECK(loaded[i].base_power == menu[i].base_power);
    CHECK(loaded[i].alpha_l == menu[i].alpha_l);
    CHECK(loaded[i].epochs == menu[i].epochs);
  }

  std::ofstream bad("profiles_bad.json");
  bad << R"([{"device_id": "x", "watts_base": -3, "alpha_g": 0.1, "alpha_beta": 0.1,
              "patches": 4, "latency_base": 1.0, "alpha_l": 0.1,
              "storage_params": 10, "epochs": 1, "vcpus": 2}])";
  bad.close();
  CHECK_THROWS_WITH_AS(load_profiles_json("profiles_bad.json"),
                       doctest::Contains("entry 0"), ConfigError);
  std::ofstream missing("profiles_missing.json");
  missing << R"([{"device_id": "x"}])";
  missing.close();
  CHECK_THROWS_AS(load_profiles_json("profiles_missing.json"), ConfigError);
  CHECK_THROWS_AS(load_profiles_json("no_such_profiles.json"), ConfigError);
}
