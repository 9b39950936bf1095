#include "acme/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "acme/errors.hpp"

namespace acme {

namespace {

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw StateError("cannot write '" + path + "'");
  return out;
}

}  // namespace

std::vector<std::string> write_report_csvs(const RunReport& r, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  char row[320];

  {
    const std::string path = out_dir + "/accuracy_vs_size.csv";
    std::ofstream out = open_csv(path);
    out << "device,cluster,backbone_params,coarse_accuracy,final_accuracy\n";
    for (const ClusterReport& c : r.clusters)
      for (const DeviceReport& d : c.devices) {
        std::snprintf(row, sizeof(row), "%s,%s,%.17g,%.17g,%.17g\n", d.device_id.c_str(),
                      c.cluster_id.c_str(), c.selection_params, d.coarse_accuracy,
                      d.final_accuracy);
        out << row;
      }
    if (!out.good()) throw StateError("write failed for '" + path + "'");
    written.push_back(path);
  }

  {
    const std::string path = out_dir + "/energy_vs_spec.csv";
    std::ofstream out = open_csv(path);
    out << "cluster,w,d,loss,energy_j,size,in_pfg,feasible,selected\n";
    for (const ClusterReport& c : r.clusters)
      for (const CandidateRow& cand : c.candidates) {
        std::snprintf(row, sizeof(row), "%s,%.17g,%d,%.17g,%.17g,%.17g,%d,%d,%d\n",
                      c.cluster_id.c_str(), cand.w, cand.d, cand.loss, cand.energy, cand.size,
                      (int)cand.in_pfg, (int)cand.feasible, (int)cand.selected);
        out << row;
      }
    if (!out.good()) throw StateError("write failed for '" + path + "'");
    written.push_back(path);
  }

  bool any_rounds = false;
  for (const ClusterReport& c : r.clusters) any_rounds = any_rounds || c.rounds_run > 0;
  if (any_rounds) {
    const std::string path = out_dir + "/similarity_heatmap.csv";
    std::ofstream out = open_csv(path);
    out << "cluster,i,j,weight\n";
    for (const ClusterReport& c : r.clusters) {
      if (c.rounds_run == 0) continue;
      for (int i = 0; i < c.similarity.rows(); ++i)
        for (int j = 0; j < c.similarity.cols(); ++j) {
          std::snprintf(row, sizeof(row), "%s,%d,%d,%.17g\n", c.cluster_id.c_str(), i, j,
                        c.similarity(i, j));
          out << row;
        }
    }
    if (!out.good()) throw StateError("write failed for '" + path + "'");
    written.push_back(path);
  }
  return written;
}

}  // namespace acme
