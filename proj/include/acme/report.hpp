#pragma once

#include <string>
#include <vector>

#include "acme/orchestrator.hpp"

namespace acme {

// Flat plotting views of a finished run, written into `out_dir`:
//   accuracy_vs_size.csv    one row per device
//   energy_vs_spec.csv      one row per evaluated backbone candidate
//   similarity_heatmap.csv  one row per neighbor weight; skipped entirely
//                           when no refinement rounds ran
// Returns the paths written, in that order. Re-running on the same report
// reproduces the files byte for byte.
std::vector<std::string> write_report_csvs(const RunReport& r, const std::string& out_dir);

}  // namespace acme
