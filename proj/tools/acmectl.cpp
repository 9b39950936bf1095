// acmectl: run the customization pipeline end to end, or stage by stage with
// artifacts handed through the output directory. Staged runs and `run-all`
// derive every dataset and stage seed from the same (config, seed) pair, so
// `backbone` + `search-header` + `personalize` reproduces what `run-all`
// computes in one process.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "acme/config.hpp"
#include "acme/dataset.hpp"
#include "acme/errors.hpp"
#include "acme/family.hpp"
#include "acme/nas.hpp"
#include "acme/orchestrator.hpp"
#include "acme/pareto.hpp"
#include "acme/personalize.hpp"
#include "acme/report.hpp"
#include "acme/serialize.hpp"
#include "acme/transformer.hpp"

namespace {

using nlohmann::json;
using namespace acme;

struct CommonOpts {
  std::string config = "configs/default.toml";
  std::string out;
  std::uint64_t seed = 0;
  int threads = 0;
  CLI::Option* out_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config, "experiment file (TOML)")->capture_default_str();
  o.seed_opt = cmd->add_option("--seed", o.seed, "override the run seed");
  o.out_opt = cmd->add_option("--out", o.out, "override the output directory");
  o.threads_opt = cmd->add_option("--threads", o.threads, "worker threads for the menu audit");
}

PipelineConfig configure(const CommonOpts& o) {
  if (!std::filesystem::exists(o.config))
    throw ConfigError("no config file at '" + o.config + "'");
  PipelineConfig cfg = load_config(o.config);
  if (o.seed_opt->count() > 0) {
    cfg.seed = o.seed;
    cfg.reference.seed = o.seed;
  }
  if (o.out_opt->count() > 0) cfg.out_dir = o.out;
  if (o.threads_opt->count() > 0) cfg.threads = o.threads;
  cfg.validate();
  return cfg;
}

std::string require_artifact(const std::string& file, const std::string& producer) {
  if (!std::filesystem::exists(file))
    throw ConfigError("missing '" + file + "'; run 'acmectl " + producer + "' first");
  return file;
}

const FamilyMember* member_by_ref(const FamilyManifest& m, const std::string& ref) {
  for (const FamilyMember& fm : m.members)
    if (fm.weights_file == ref) return &fm;
  return nullptr;
}

Dataset make_cloud_data(const PipelineConfig& cfg) {
  std::vector<int> all(cfg.data.num_classes);
  std::iota(all.begin(), all.end(), 0);
  return make_class_gaussian(cfg.data, all, cfg.cloud_samples, cfg.seed, "cloud");
}

Dataset make_probe_data(const PipelineConfig& cfg) {
  std::vector<int> all(cfg.data.num_classes);
  std::iota(all.begin(), all.end(), 0);
  return make_class_gaussian(cfg.data, all, cfg.probe_samples, cfg.seed, "probe");
}

// What `backbone` hands to the later stages: the partition and, per cluster,
// which family member won. Carries the seed so a stale artifact directory is
// caught instead of silently mixing runs.
struct Phase1File {
  std::uint64_t seed = 0;
  Topology topo;
  std::vector<std::string> cluster_ids;
  std::vector<std::string> weights_refs;
};

void write_phase1_file(const PipelineConfig& cfg, const Topology& topo,
                       const std::vector<ClusterPhase1>& phase1, const FamilyManifest& manifest,
                       const std::string& file) {
  json j;
  j["seed"] = cfg.seed;
  j["topology"] = topo.clusters;
  j["clusters"] = json::array();
  for (const ClusterPhase1& p1 : phase1) {
    const MenuCandidate& sel = p1.audit[p1.selected_index];
    const FamilyMember* member = nullptr;
    for (const FamilyMember& fm : manifest.members)
      if (fm.spec.w == p1.selection.w && fm.spec.d == p1.selection.d) member = &fm;
    if (!member) throw StateError(p1.cluster_id + ": selected spec missing from the family manifest");
    j["clusters"].push_back({{"cluster_id", p1.cluster_id},
                             {"energy", sel.f.energy},
                             {"grid_cells", p1.grid.K},
                             {"loss", sel.f.loss},
                             {"params", sel.f.size},
                             {"selection", {{"d", p1.selection.d}, {"w", p1.selection.w}}},
                             {"weights_ref", member->weights_file}});
  }
  std::ofstream out(file);
  out << j.dump(2) << "\n";
  if (!out.good()) throw StateError("could not write '" + file + "'");
}

Phase1File read_phase1_file(const std::string& file, const PipelineConfig& cfg) {
  std::ifstream in(file);
  if (!in.good()) throw StateError("could not read '" + file + "'");
  Phase1File p;
  try {
    const json j = json::parse(in);
    p.seed = j.at("seed").get<std::uint64_t>();
    p.topo.clusters = j.at("topology").get<std::vector<std::vector<int>>>();
    for (const json& jc : j.at("clusters")) {
      p.cluster_ids.push_back(jc.at("cluster_id").get<std::string>());
      p.weights_refs.push_back(jc.at("weights_ref").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ConfigError("'" + file + "': " + e.what());
  }
  int n = 0;
  for (const auto& c : p.topo.clusters) n += static_cast<int>(c.size());
  p.topo.num_devices = n;
  p.topo.validate();
  if (p.seed != cfg.seed)
    throw ConfigError("'" + file + "' was produced with seed " + std::to_string(p.seed) +
                      ", not " + std::to_string(cfg.seed) + "; rerun 'acmectl backbone'");
  if (p.topo.num_devices != static_cast<int>(cfg.profiles.size()))
    throw ConfigError("'" + file + "' covers " + std::to_string(p.topo.num_devices) +
                      " devices but the config lists " + std::to_string(cfg.profiles.size()) +
                      "; rerun 'acmectl backbone'");
  if (p.cluster_ids.size() != p.topo.clusters.size())
    throw ConfigError("'" + file + "': cluster list does not match the topology");
  return p;
}

void check_cluster_flag(int only, std::size_t S) {
  if (only >= static_cast<int>(S))
    throw ConfigError("--cluster " + std::to_string(only) + " out of range; run has " +
                      std::to_string(S) + " clusters");
}

int cmd_backbone(const PipelineConfig& cfg) {
  const std::string family_dir = cfg.out_dir + "/family";
  std::filesystem::create_directories(family_dir);

  const Dataset cloud_data = make_cloud_data(cfg);
  const Dataset probe = make_probe_data(cfg);

  TransformerNet reference = make_reference_model(cfg.reference);
  TrainOptions ropt;
  ropt.steps = cfg.reference_train_steps;
  ropt.lr = cfg.reference_lr;
  ropt.batch_size = cfg.train_batch_size;
  ropt.seed = cfg.seed;
  ropt.stream = "reference";
  train_ce(reference, cloud_data, ropt);

  const ImportanceTable imp = head_importance(reference, probe, cfg.train_batch_size);
  DistillationConfig dcfg = cfg.distill;
  dcfg.seed = derive_seed(cfg.seed, "distill");
  const FamilyManifest manifest =
      build_family(reference, imp, cfg.widths, cfg.depths, dcfg, cloud_data, family_dir);
  std::printf("family: %zu members under %s\n", manifest.members.size(), family_dir.c_str());

  const Topology topo = partition_devices(cfg.profiles, cfg.clusters, cfg.seed);
  const std::size_t S = topo.clusters.size();
  std::vector<ClusterSpec> specs(S);
  for (std::size_t k = 0; k < S; ++k) {
    specs[k].cluster_id = "edge/" + std::to_string(k);
    for (int i : topo.clusters[k]) specs[k].devices.push_back(cfg.profiles[i]);
  }
  const std::vector<ClusterPhase1> phase1 =
      run_phase1(manifest, family_dir, reference, specs, probe, cfg.gamma_p, cfg.sigma, cfg.threads);

  for (std::size_t k = 0; k < S; ++k) {
    const std::string csv = cfg.out_dir + "/pareto_" + std::to_string(k) + ".csv";
    write_pareto_csv(phase1[k], csv);
    const MenuCandidate& sel = phase1[k].audit[phase1[k].selected_index];
    std::printf("%s: selected w=%g d=%d (%.0f params, %.3f J, loss %.4f), wrote %s\n",
                phase1[k].cluster_id.c_str(), phase1[k].selection.w, phase1[k].selection.d,
                sel.f.size, sel.f.energy, sel.f.loss, csv.c_str());
  }
  const std::string p1file = cfg.out_dir + "/phase1.json";
  write_phase1_file(cfg, topo, phase1, manifest, p1file);
  std::printf("wrote %s\n", p1file.c_str());
  return 0;
}

int cmd_search_header(const PipelineConfig& cfg, int only_cluster) {
  const std::string family_dir = cfg.out_dir + "/family";
  const FamilyManifest manifest = load_manifest(require_artifact(family_dir + "/family.json", "backbone"));
  const Phase1File p1 = read_phase1_file(require_artifact(cfg.out_dir + "/phase1.json", "backbone"), cfg);
  check_cluster_flag(only_cluster, p1.topo.clusters.size());

  for (std::size_t k = 0; k < p1.topo.clusters.size(); ++k) {
    if (only_cluster >= 0 && static_cast<int>(k) != only_cluster) continue;
    const FamilyMember* member = member_by_ref(manifest, p1.weights_refs[k]);
    if (!member)
      throw StateError(p1.cluster_ids[k] + ": assigned weights '" + p1.weights_refs[k] +
                       "' not in the manifest");
    TransformerNet backbone = load_family_member(manifest, *member, family_dir);
    const Dataset edge_data = edge_dataset(cfg, p1.topo, static_cast<int>(k));

    NasSearchConfig ncfg = cfg.nas;
    ncfg.seed = derive_seed(cfg.seed, "nas/" + std::to_string(k));
    const NasSearchResult found = run_phase2_stage1(p1.cluster_ids[k], backbone, edge_data, ncfg);

    const std::string dag_file = cfg.out_dir + "/header_" + std::to_string(k) + ".json";
    const std::string shared_file = cfg.out_dir + "/shared_" + std::to_string(k) + ".bin";
    save_dag(found.dag, dag_file);
    // the search trains the shared backbone in place; persist it so
    // `personalize` continues from the same weights as `run-all`
    save_params(backbone.params(), shared_file, backbone.config().hash());
    std::printf("%s: holdout accuracy %.4f, wrote %s %s\n", p1.cluster_ids[k].c_str(),
                found.holdout_accuracy, dag_file.c_str(), shared_file.c_str());
  }
  return 0;
}

int cmd_personalize(const PipelineConfig& cfg, int only_cluster) {
  const std::string family_dir = cfg.out_dir + "/family";
  const FamilyManifest manifest = load_manifest(require_artifact(family_dir + "/family.json", "backbone"));
  const Phase1File p1 = read_phase1_file(require_artifact(cfg.out_dir + "/phase1.json", "backbone"), cfg);
  check_cluster_flag(only_cluster, p1.topo.clusters.size());

  const FamilyMember* lightest = &manifest.members.front();
  for (const FamilyMember& fm : manifest.members)
    if (fm.spec.w < lightest->spec.w || (fm.spec.w == lightest->spec.w && fm.spec.d < lightest->spec.d))
      lightest = &fm;
  TransformerNet extractor = load_family_member(manifest, *lightest, family_dir);

  json out_clusters = json::array();
  for (std::size_t k = 0; k < p1.topo.clusters.size(); ++k) {
    if (only_cluster >= 0 && static_cast<int>(k) != only_cluster) continue;
    const FamilyMember* member = member_by_ref(manifest, p1.weights_refs[k]);
    if (!member)
      throw StateError(p1.cluster_ids[k] + ": assigned weights '" + p1.weights_refs[k] +
                       "' not in the manifest");
    TransformerNet backbone = load_family_member(manifest, *member, family_dir);
    const std::string shared_file = cfg.out_dir + "/shared_" + std::to_string(k) + ".bin";
    load_params(backbone.params(), require_artifact(shared_file, "search-header"),
                backbone.config().hash());
    const std::string dag_file = cfg.out_dir + "/header_" + std::to_string(k) + ".json";
    HeaderDAG dag = load_dag(require_artifact(dag_file, "search-header"));
    dag.validate(static_cast<int>(cfg.nas.ops.ops.size()));

    std::vector<PersonalizeDevice> devs;
    for (int i : p1.topo.clusters[k])
      devs.push_back({cfg.profiles[i].device_id, device_dataset(cfg, i)});

    std::vector<double> coarse;
    for (const PersonalizeDevice& dev : devs) {
      HeaderNet h = instantiate_header(backbone, dag, cfg.nas.ops, cfg.nas.header);
      coarse.push_back(eval_accuracy(h, dev.data.all()));
    }

    PersonalizeConfig pcfg = cfg.personalize;
    pcfg.seed = derive_seed(cfg.seed, "personalize/" + std::to_string(k));
    const PersonalizeResult refined =
        run_phase2_stage2(backbone, dag, cfg.nas.ops, cfg.nas.header, extractor, devs, pcfg);

    json jc;
    jc["cluster_id"] = p1.cluster_ids[k];
    jc["rounds_run"] = refined.rounds_run;
    jc["round_loss"] = refined.round_loss;
    jc["devices"] = json::array();
    double final_sum = 0.0;
    for (std::size_t a = 0; a < devs.size(); ++a) {
      jc["devices"].push_back({{"coarse_accuracy", coarse[a]},
                               {"device_id", devs[a].device_id},
                               {"final_accuracy", refined.final_accuracy[a]},
                               {"masked", masked_neurons(refined.headers[a])}});
      final_sum += refined.final_accuracy[a];
    }
    std::vector<std::vector<double>> sim(refined.similarity.norm.rows());
    for (int r = 0; r < refined.similarity.norm.rows(); ++r)
      for (int c = 0; c < refined.similarity.norm.cols(); ++c)
        sim[r].push_back(refined.similarity.norm(r, c));
    jc["similarity"] = sim;
    out_clusters.push_back(jc);
    std::printf("%s: %d rounds, mean final accuracy %.4f\n", p1.cluster_ids[k].c_str(),
                refined.rounds_run, final_sum / static_cast<double>(devs.size()));
  }

  json j;
  j["seed"] = cfg.seed;
  j["clusters"] = out_clusters;
  const std::string file = cfg.out_dir + "/personalize.json";
  std::ofstream out(file);
  out << j.dump(2) << "\n";
  if (!out.good()) throw StateError("could not write '" + file + "'");
  std::printf("wrote %s\n", file.c_str());
  return 0;
}

int exit_for(const std::string& error_kind) {
  if (error_kind == "config") return 2;
  if (error_kind == "infeasible") return 3;
  if (error_kind == "numeric") return 4;
  return 1;
}

int cmd_run_all(const PipelineConfig& cfg) {
  const RunReport rep = run_full_pipeline(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  const std::string report_file = cfg.out_dir + "/run_report.json";
  const std::string traffic_file = cfg.out_dir + "/traffic.csv";
  write_run_report(rep, report_file);
  write_traffic_csv(rep.ledger, traffic_file);
  if (!rep.stage_error.empty()) {
    std::fprintf(stderr, "error: %s\n", rep.stage_error.c_str());
    std::fprintf(stderr, "wrote %s %s\n", report_file.c_str(), traffic_file.c_str());
    return exit_for(rep.error_kind);
  }
  std::printf("seed %llu: %zu clusters, mean accuracy %.4f -> %.4f, upload ratio %.4f, "
              "search space %s of %g\n",
              static_cast<unsigned long long>(rep.seed), rep.clusters.size(),
              rep.mean_coarse_accuracy, rep.mean_final_accuracy, rep.traffic.ratio,
              rep.search_space.ours.c_str(), rep.search_space.centralized);
  std::printf("wrote %s\n", report_file.c_str());
  std::printf("wrote %s\n", traffic_file.c_str());
  return 0;
}

int cmd_report(const PipelineConfig& cfg) {
  const RunReport rep = load_run_report(require_artifact(cfg.out_dir + "/run_report.json", "run-all"));
  for (const std::string& f : write_report_csvs(rep, cfg.out_dir))
    std::printf("wrote %s\n", f.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"three-tier adaptive model customization pipeline"};
  app.require_subcommand(1);

  CommonOpts o_backbone, o_search, o_personalize, o_runall, o_report;
  int cluster_search = -1, cluster_personalize = -1;

  CLI::App* backbone =
      app.add_subcommand("backbone", "distill the model family and pick one backbone per cluster");
  add_common(backbone, o_backbone);
  CLI::App* search = app.add_subcommand("search-header", "search a shared header per edge cluster");
  add_common(search, o_search);
  search->add_option("--cluster", cluster_search, "restrict to one cluster index");
  CLI::App* personalize = app.add_subcommand("personalize", "run on-device refinement rounds");
  add_common(personalize, o_personalize);
  personalize->add_option("--cluster", cluster_personalize, "restrict to one cluster index");
  CLI::App* runall = app.add_subcommand("run-all", "run the whole pipeline over the message bus");
  add_common(runall, o_runall);
  CLI::App* report = app.add_subcommand("report", "emit CSV views of a finished run");
  add_common(report, o_report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return 2;  // usage problems are config problems
  }

  try {
    if (backbone->parsed()) return cmd_backbone(configure(o_backbone));
    if (search->parsed()) return cmd_search_header(configure(o_search), cluster_search);
    if (personalize->parsed()) return cmd_personalize(configure(o_personalize), cluster_personalize);
    if (runall->parsed()) return cmd_run_all(configure(o_runall));
    if (report->parsed()) return cmd_report(configure(o_report));
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const InfeasibleError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
