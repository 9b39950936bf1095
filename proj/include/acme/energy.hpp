#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acme/family.hpp"

namespace acme {

// Per-device cost model. The increments are stored as fractions of the base
// values (dG = alpha_g*G and so on), so the proportionality constraints hold
// by construction no matter what a profile file says.
struct DeviceProfile {
  std::string device_id;
  double base_power = 10.0;        // G, watts
  double alpha_g = 0.1;            // dG/G
  double alpha_beta = 0.05;        // G_beta/G, per-patch inference draw
  int patches = 16;                // p
  double base_latency = 2.0;       // L, seconds per epoch
  double alpha_l = 0.25;           // dL/L
  std::int64_t storage_params = 1; // C, parameter budget
  int epochs = 1;                  // k
  int vcpus = 1;

  double dG() const { return alpha_g * base_power; }
  double g_beta() const { return alpha_beta * base_power; }
  double dL() const { return alpha_l * base_latency; }

  void validate() const;  // ConfigError naming the device on violation
};

// P = (G + dG*w*d) + p*G_beta, watts
double power_watts(const DeviceProfile& p, const WidthDepthSpec& spec);
// T = L + dL*w*d, seconds per epoch
double latency_seconds(const DeviceProfile& p, const WidthDepthSpec& spec);
// E = k * P * T, joules
double energy_joules(const DeviceProfile& p, const WidthDepthSpec& spec);

// The cluster pays for its worst member.
double cluster_max_energy(const std::vector<DeviceProfile>& cluster, const WidthDepthSpec& spec);

std::vector<DeviceProfile> load_profiles_json(const std::string& file);
void save_profiles_json(const std::vector<DeviceProfile>& profiles, const std::string& file);

// Deterministic menu of n heterogeneous devices: 3..7 vcpus, storage budgets
// drawn from 200..400 MB at 4 bytes per parameter, shrunk by storage_divisor
// for desk-scale runs.
std::vector<DeviceProfile> default_profile_menu(int n, std::uint64_t seed, double storage_divisor,
                                                int patches);

}  // namespace acme
