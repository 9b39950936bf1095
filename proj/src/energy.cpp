#include "acme/energy.hpp"

#include <cmath>
#include <fstream>

#include "acme/rng.hpp"
#include "json.hpp"

namespace acme {

void DeviceProfile::validate() const {
  auto fail = [&](const std::string& what) {
    throw ConfigError("device '" + device_id + "': " + what);
  };
  if (device_id.empty()) throw ConfigError("device profile: empty device_id");
  if (!(base_power > 0.0)) fail("base power must be > 0");
  if (!(base_latency > 0.0)) fail("base latency must be > 0");
  if (epochs < 1) fail("epoch count must be >= 1");
  if (alpha_g < 0.0 || alpha_beta < 0.0 || alpha_l < 0.0)
    fail("increment fractions must be >= 0");
  if (patches < 0) fail("patch count must be >= 0");
  if (storage_params < 1) fail("storage budget must be >= 1 parameter");
  if (vcpus < 1) fail("vcpus must be >= 1");
  if (!std::isfinite(base_power) || !std::isfinite(base_latency) || !std::isfinite(alpha_g) ||
      !std::isfinite(alpha_beta) || !std::isfinite(alpha_l))
    fail("non-finite field");
}

double power_watts(const DeviceProfile& p, const WidthDepthSpec& spec) {
  return (p.base_power + p.dG() * spec.w * spec.d) + p.patches * p.g_beta();
}

double latency_seconds(const DeviceProfile& p, const WidthDepthSpec& spec) {
  return p.base_latency + p.dL() * spec.w * spec.d;
}

double energy_joules(const DeviceProfile& p, const WidthDepthSpec& spec) {
  return p.epochs * power_watts(p, spec) * latency_seconds(p, spec);
}

double cluster_max_energy(const std::vector<DeviceProfile>& cluster,
                          const WidthDepthSpec& spec) {
  if (cluster.empty()) throw ConfigError("cluster_max_energy: empty cluster");
  double e = 0.0;
  for (const DeviceProfile& p : cluster) e = std::max(e, energy_joules(p, spec));
  return e;
}

namespace {

DeviceProfile profile_from_json(const nlohmann::json& j, const std::string& where) {
  DeviceProfile p;
  try {
    p.device_id = j.at("device_id").get<std::string>();
    p.base_power = j.at("watts_base").get<double>();
    p.alpha_g = j.at("alpha_g").get<double>();
    p.alpha_beta = j.at("alpha_beta").get<double>();
    p.patches = j.at("patches").get<int>();
    p.base_latency = j.at("latency_base").get<double>();
    p.alpha_l = j.at("alpha_l").get<double>();
    p.storage_params = j.at("storage_params").get<std::int64_t>();
    p.epochs = j.at("epochs").get<int>();
    p.vcpus = j.at("vcpus").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return p;
}

}  // namespace

std::vector<DeviceProfile> load_profiles_json(const std::string& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("profiles: cannot open '" + file + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("profiles '" + file + "': " + e.what());
  }
  if (!j.is_array()) throw ConfigError("profiles '" + file + "': top level must be an array");
  std::vector<DeviceProfile> out;
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(profile_from_json(j[i], "profiles '" + file + "' entry " + std::to_string(i)));
  return out;
}

void save_profiles_json(const std::vector<DeviceProfile>& profiles, const std::string& file) {
  nlohmann::json j = nlohmann::json::array();
  for (const DeviceProfile& p : profiles) {
    j.push_back({{"device_id", p.device_id},
                 {"watts_base", p.base_power},
                 {"alpha_g", p.alpha_g},
                 {"alpha_beta", p.alpha_beta},
                 {"patches", p.patches},
                 {"latency_base", p.base_latency},
                 {"alpha_l", p.alpha_l},
                 {"storage_params", p.storage_params},
                 {"epochs", p.epochs},
                 {"vcpus", p.vcpus}});
  }
  std::ofstream os(file);
  if (!os) throw StateError("profiles: cannot write '" + file + "'");
  os << j.dump(2) << "\n";
}

std::vector<DeviceProfile> default_profile_menu(int n, std::uint64_t seed, double storage_divisor,
                                                int patches) {
  if (n < 1) throw ConfigError("default_profile_menu: need at least one device");
  if (!(storage_divisor > 0.0)) throw ConfigError("default_profile_menu: divisor must be > 0");
  std::vector<DeviceProfile> out;
  CounterRng rng(seed, "device_menu");
  for (int i = 0; i < n; ++i) {
    DeviceProfile p;
    p.device_id = "device-" + std::to_string(i);
    p.vcpus = 3 + int(rng.uniform_int(5));
    double storage_mb = 200.0 + 50.0 * rng.uniform_int(5);
    p.storage_params =
        std::max<std::int64_t>(1, llround(storage_mb * 1e6 / 4.0 / storage_divisor));
    // stronger boxes draw more power and run an epoch faster
    p.base_power = (2.0 + 1.5 * p.vcpus) * (0.9 + 0.2 * rng.uniform());
    p.base_latency = (16.0 / p.vcpus) * (0.9 + 0.2 * rng.uniform());
    p.epochs = 1 + int(rng.uniform_int(3));
    p.patches = patches;
    p.validate();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace acme
