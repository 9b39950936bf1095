#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "acme/orchestrator.hpp"
#include "doctest.h"

using namespace acme;

namespace {

DeviceProfile profile(const std::string& id, int vcpus, std::int64_t storage) {
  DeviceProfile p;
  p.device_id = id;
  p.vcpus = vcpus;
  p.storage_params = storage;
  p.patches = 4;
  return p;
}

std::string profile_json(const DeviceProfile& p) {
  std::ostringstream out;
  out << "{\"alpha_beta\":" << p.alpha_beta << ",\"alpha_g\":" << p.alpha_g
      << ",\"alpha_l\":" << p.alpha_l << ",\"base_latency\":" << p.base_latency
      << ",\"base_power\":" << p.base_power << ",\"device_id\":\"" << p.device_id
      << "\",\"epochs\":" << p.epochs << ",\"patches\":" << p.patches
      << ",\"storage_params\":" << p.storage_params << ",\"vcpus\":" << p.vcpus << "}";
  return out.str();
}

std::string scores_json(const std::string& device_id, int round,
                        const std::vector<std::pair<std::string, double>>& scores) {
  std::ostringstream out;
  out << "{\"device_id\":\"" << device_id << "\",\"round\":" << round << ",\"scores\":{";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i) out << ",";
    out << "\"" << scores[i].first << "\":" << scores[i].second;
  }
  out << "}}";
  return out.str();
}

const char* kDag =
    "{\"cluster\":\"edge/0\",\"dag\":{\"blocks\":[{\"i1\":0,\"i2\":1,\"o1\":2,\"o2\":3}],"
    "\"opset_version\":1,\"repeats\":1}}";

PipelineConfig tiny_pipeline(int devices, int clusters, std::uint64_t seed, const std::string& out) {
  PipelineConfig cfg;
  cfg.reference.depth = 1;
  cfg.reference.num_heads = 2;
  cfg.reference.head_dim = 2;
  cfg.reference.hidden_dim = 4;
  cfg.reference.ffn_dim = 8;
  cfg.reference.num_patches = 4;
  cfg.reference.patch_dim = 4;
  cfg.reference.num_classes = 3;
  cfg.reference.seed = seed;
  cfg.reference_train_steps = 12;
  cfg.train_batch_size = 8;
  cfg.widths = {1.0};
  cfg.depths = {1};
  cfg.distill.steps = 8;
  cfg.distill.batch_size = 8;
  cfg.profiles = default_profile_menu(devices, seed, 1.0, cfg.reference.num_patches);
  cfg.clusters = clusters;
  cfg.nas.blocks = 1;
  cfg.nas.alternations = 1;
  cfg.nas.shared_steps = 4;
  cfg.nas.shared_samples = 2;
  cfg.nas.controller_samples = 2;
  cfg.nas.batch_size = 8;
  cfg.nas.header.channels = 2;
  cfg.nas.header.mlp_hidden = 4;
  cfg.nas.header.lstm_hidden = 8;
  cfg.nas.header.embed_dim = 4;
  cfg.personalize.rounds = 0;
  cfg.personalize.local_steps = 4;
  cfg.personalize.batch_size = 4;
  cfg.personalize.accumulation_steps = 2;
  cfg.personalize.sketch_size = 4;
  cfg.data.num_classes = 3;
  cfg.data.patches = 4;
  cfg.data.patch_dim = 4;
  cfg.cloud_samples = 24;
  cfg.probe_samples = 12;
  cfg.edge_samples = 16;
  cfg.device_samples = 12;
  cfg.classes_per_device = 2;
  cfg.seed = seed;
  cfg.out_dir = out;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("partition covers every device exactly once") {
  SUBCASE("one cluster per device degenerates to singletons") {
    std::vector<DeviceProfile> ps;
    for (int i = 0; i < 5; ++i) ps.push_back(profile("d" + std::to_string(i), 1 + i, 1000 + 100 * i));
    Topology t = partition_devices(ps, 5, 7);
    REQUIRE(t.clusters.size() == 5);
    for (const auto& c : t.clusters) CHECK(c.size() == 1);
    t.validate();
  }
  SUBCASE("more clusters than devices is rejected") {
    std::vector<DeviceProfile> ps = {profile("a", 1, 10), profile("b", 2, 20)};
    CHECK_THROWS_AS(partition_devices(ps, 3, 1), ConfigError);
    CHECK_THROWS_AS(partition_devices(ps, 0, 1), ConfigError);
    CHECK_THROWS_AS(partition_devices({}, 1, 1), ConfigError);
  }
  SUBCASE("random menus always come back as a disjoint cover") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const int n = 2 + int(seed % 7);
      std::vector<DeviceProfile> ps = default_profile_menu(n, seed, 1.0, 16);
      for (int S = 1; S <= n; ++S) {
        Topology t = partition_devices(ps, S, seed);
        CHECK(t.num_devices == n);
        CHECK((int)t.clusters.size() == S);
        t.validate();
      }
    }
  }
}

TEST_CASE("partition separates well-separated hardware groups") {
  std::vector<DeviceProfile> ps = {
      profile("weak-0", 1, 200000),  profile("weak-1", 2, 250000),  profile("weak-2", 1, 300000),
      profile("big-0", 7, 400000000), profile("big-1", 8, 380000000), profile("big-2", 7, 420000000)};
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Topology t = partition_devices(ps, 2, seed);
    REQUIRE(t.clusters.size() == 2);
    std::set<int> a(t.clusters[0].begin(), t.clusters[0].end());
    std::set<int> b(t.clusters[1].begin(), t.clusters[1].end());
    const std::set<int> weak = {0, 1, 2}, big = {3, 4, 5};
    CHECK(((a == weak && b == big) || (a == big && b == weak)));
  }
}

TEST_CASE("partition is deterministic, even on identical devices") {
  std::vector<DeviceProfile> same(6, profile("x", 4, 5000));
  for (int i = 0; i < 6; ++i) same[i].device_id = "x" + std::to_string(i);
  Topology first = partition_devices(same, 3, 11);
  first.validate();
  for (int rep = 0; rep < 3; ++rep) {
    Topology again = partition_devices(same, 3, 11);
    CHECK(again.clusters == first.clusters);
  }
  std::vector<DeviceProfile> mixed = default_profile_menu(7, 5, 1.0, 16);
  Topology a = partition_devices(mixed, 3, 9);
  Topology b = partition_devices(mixed, 3, 9);
  CHECK(a.clusters == b.clusters);
}

TEST_CASE("message kinds map to names and tiers resolve from node ids") {
  const MessageKind all[] = {MessageKind::AttributeStats, MessageKind::BackboneAssignment,
                             MessageKind::HeaderDistribution, MessageKind::ImportanceUpload,
                             MessageKind::AggregatedImportance};
  for (MessageKind k : all) CHECK(kind_from_name(kind_name(k)) == k);
  CHECK_THROWS_AS(kind_from_name("RawSamples"), ConfigError);
  CHECK(node_tier("cloud") == 2);
  CHECK(node_tier("edge/0") == 1);
  CHECK(node_tier("edge/12") == 1);
  CHECK(node_tier("device-3") == 0);
  CHECK(node_tier("laptop") == 0);
}

TEST_CASE("message schemas are closed: only whitelisted keys cross tiers") {
  DeviceProfile p = profile("device-0", 4, 50000);

  SUBCASE("well-formed payloads pass") {
    CHECK_NOTHROW(make_message(MessageKind::AttributeStats, "device-0", "cloud", profile_json(p)));
    CHECK_NOTHROW(make_message(
        MessageKind::BackboneAssignment, "cloud", "edge/0",
        "{\"cluster\":\"edge/0\",\"d\":1,\"param_count\":1234.0,\"w\":0.5,\"weights_ref\":\"m.bin\"}"));
    CHECK_NOTHROW(make_message(MessageKind::HeaderDistribution, "edge/0", "device-0", kDag));
    CHECK_NOTHROW(make_message(MessageKind::ImportanceUpload, "device-0", "edge/0",
                               scores_json("device-0", 1, {{"hdr/mlp/w1[0]", 0.25}})));
    CHECK_NOTHROW(make_message(MessageKind::AggregatedImportance, "edge/0", "device-0",
                               scores_json("device-0", 1, {{"hdr/mlp/w1[0]", 0.5}})));
  }
  SUBCASE("an extra key is refused, whatever it holds") {
    std::string j = profile_json(p);
    j.insert(j.size() - 1, ",\"samples\":[1,2,3]");
    CHECK_THROWS_WITH_AS(make_message(MessageKind::AttributeStats, "device-0", "cloud", j),
                         doctest::Contains("samples"), ConfigError);
  }
  SUBCASE("a missing key is refused by name") {
    CHECK_THROWS_WITH_AS(
        make_message(MessageKind::BackboneAssignment, "cloud", "edge/0",
                     "{\"cluster\":\"edge/0\",\"d\":1,\"param_count\":9.0,\"w\":0.5}"),
        doctest::Contains("weights_ref"), ConfigError);
  }
  SUBCASE("a wrong value type is refused by key") {
    CHECK_THROWS_WITH_AS(
        make_message(MessageKind::BackboneAssignment, "cloud", "edge/0",
                     "{\"cluster\":\"edge/0\",\"d\":1.5,\"param_count\":9.0,\"w\":0.5,"
                     "\"weights_ref\":\"m.bin\"}"),
        doctest::Contains("'d'"), ConfigError);
  }
  SUBCASE("importance scores must be parameter slots mapped to numbers") {
    CHECK_THROWS_AS(make_message(MessageKind::ImportanceUpload, "device-0", "edge/0",
                                 "{\"device_id\":\"device-0\",\"round\":1,"
                                 "\"scores\":{\"pixels[0]\":1.0}}"),
                    ConfigError);
    CHECK_THROWS_AS(make_message(MessageKind::ImportanceUpload, "device-0", "edge/0",
                                 "{\"device_id\":\"device-0\",\"round\":1,"
                                 "\"scores\":{\"hdr/mlp/w1[0]\":[0.1,0.2,0.3]}}"),
                    ConfigError);
    CHECK_THROWS_AS(make_message(MessageKind::ImportanceUpload, "device-0", "edge/0",
                                 "{\"device_id\":\"device-0\",\"round\":1,"
                                 "\"scores\":{\"hdr/raw\":1.0}}"),
                    ConfigError);
  }
  SUBCASE("messages must travel between the right tiers") {
    CHECK_THROWS_AS(make_message(MessageKind::AttributeStats, "device-0", "edge/0", profile_json(p)),
                    ConfigError);
    CHECK_THROWS_AS(make_message(MessageKind::HeaderDistribution, "cloud", "device-0", kDag),
                    ConfigError);
    CHECK_THROWS_AS(make_message(MessageKind::ImportanceUpload, "device-0", "cloud",
                                 scores_json("device-0", 1, {{"hdr/mlp/w1[0]", 0.25}})),
                    ConfigError);
  }
  SUBCASE("malformed json and byte_size drift are refused") {
    CHECK_THROWS_AS(make_message(MessageKind::AttributeStats, "device-0", "cloud", "{oops"),
                    ConfigError);
    Message m = make_message(MessageKind::AttributeStats, "device-0", "cloud", profile_json(p));
    m.byte_size += 1;
    CHECK_THROWS_AS(validate_message(m), ConfigError);
  }
  SUBCASE("a dag with no blocks cannot be distributed") {
    CHECK_THROWS_AS(make_message(MessageKind::HeaderDistribution, "edge/0", "device-0",
                                 "{\"cluster\":\"edge/0\",\"dag\":{\"blocks\":[],"
                                 "\"opset_version\":1,\"repeats\":1}}"),
                    ConfigError);
  }
}

TEST_CASE("the bus delivers per receiver in post order and ledgers every byte") {
  MessageBus bus;
  DeviceProfile p0 = profile("device-0", 2, 100);
  DeviceProfile p1 = profile("device-1", 4, 200);
  bus.post(make_message(MessageKind::AttributeStats, "device-0", "cloud", profile_json(p0)));
  bus.post(make_message(MessageKind::AttributeStats, "device-1", "cloud", profile_json(p1)));
  bus.post(make_message(MessageKind::HeaderDistribution, "edge/0", "device-0", kDag));

  std::vector<Message> cloud = bus.drain("cloud");
  REQUIRE(cloud.size() == 2);
  CHECK(cloud[0].sender == "device-0");
  CHECK(cloud[1].sender == "device-1");
  CHECK(bus.drain("cloud").empty());
  CHECK(bus.drain("device-0").size() == 1);
  CHECK(bus.drain("nobody").empty());

  const TrafficLedger& led = bus.ledger();
  CHECK(led.kind_count.at("AttributeStats") == 2);
  CHECK(led.kind_count.at("HeaderDistribution") == 1);
  CHECK(led.link_total("device-0", "cloud") == (std::int64_t)profile_json(p0).size());
  CHECK(led.link_total("cloud", "device-0") == 0);
  CHECK(led.total_bytes ==
        (std::int64_t)(profile_json(p0).size() + profile_json(p1).size() + std::string(kDag).size()));
}

TEST_CASE("ledger totals are conserved across views") {
  MessageBus bus;
  std::vector<std::pair<std::string, std::string>> device_edge = {
      {"device-0", "edge/0"}, {"device-1", "edge/0"}, {"device-2", "edge/1"}};
  int round = 1;
  for (int rep = 0; rep < 7; ++rep) {
    for (const auto& [dev, edge] : device_edge) {
      bus.post(make_message(MessageKind::ImportanceUpload, dev, edge,
                            scores_json(dev, round, {{"hdr/mlp/w1[0]", 0.1 * rep}, {"hdr/mlp/b1[1]", 2.0}})));
      bus.post(make_message(MessageKind::AggregatedImportance, edge, dev,
                            scores_json(dev, round, {{"hdr/mlp/w1[0]", 0.2}})));
    }
  }
  const TrafficLedger& led = bus.ledger();
  std::int64_t by_kind = 0;
  for (const auto& [kind, bytes] : led.kind_bytes) by_kind += bytes;
  std::int64_t by_link = 0;
  for (const auto& [link, kinds] : led.links)
    for (const auto& [kind, bytes] : kinds) by_link += bytes;
  CHECK(by_kind == led.total_bytes);
  CHECK(by_link == led.total_bytes);
  std::int64_t counted = 0;
  for (const auto& [kind, cnt] : led.kind_count) counted += cnt;
  CHECK(counted == 42);
}

TEST_CASE("upload accounting takes attribute stats plus importance uploads") {
  MessageBus bus;
  DeviceProfile p = profile("device-0", 2, 100);
  bus.post(make_message(MessageKind::AttributeStats, "device-0", "cloud", profile_json(p)));
  bus.post(make_message(MessageKind::BackboneAssignment, "cloud", "edge/0",
                        "{\"cluster\":\"edge/0\",\"d\":1,\"param_count\":9.0,\"w\":1.0,"
                        "\"weights_ref\":\"m.bin\"}"));
  bus.post(make_message(MessageKind::HeaderDistribution, "edge/0", "device-0", kDag));
  bus.post(make_message(MessageKind::ImportanceUpload, "device-0", "edge/0",
                        scores_json("device-0", 1, {{"hdr/mlp/w1[0]", 0.5}})));
  bus.post(make_message(MessageKind::AggregatedImportance, "edge/0", "device-0",
                        scores_json("device-0", 1, {{"hdr/mlp/w1[0]", 0.5}})));
  bus.ledger().centralized_bytes = 100000;

  TrafficSummary s = account_traffic(bus.ledger());
  CHECK(s.acme_upload_bytes ==
        bus.ledger().kind_bytes.at("AttributeStats") + bus.ledger().kind_bytes.at("ImportanceUpload"));
  CHECK(s.centralized_bytes == 100000);
  CHECK(s.ratio == doctest::Approx((double)s.acme_upload_bytes / 100000.0).epsilon(1e-12));
  CHECK(s.acme_upload_bytes < bus.ledger().total_bytes);
}

TEST_CASE("upload ratio reproduces the measured overhead and ignores units") {
  CHECK(upload_ratio(96.6, 1610.0) == doctest::Approx(0.06).epsilon(1e-12));
  for (double scale : {1e-3, 1.0, 8.0, 1024.0, 1e6, 3.7e8, 0.25}) {
    CHECK(upload_ratio(96.6 * scale, 1610.0 * scale) == doctest::Approx(0.06).epsilon(1e-12));
  }
}

TEST_CASE("search spaces compare as exact count over configured baseline") {
  SUBCASE("matching sizes give ratio one") {
    SearchSpaceSummary s = compare_search_space(1, 7, 196.0);
    CHECK(s.ours == "196");
    CHECK(s.ours_value == 196.0);
    CHECK(s.ratio == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("two blocks over the default menu") {
    SearchSpaceSummary s = compare_search_space(2, 7, 1.695e6);
    CHECK(s.ours == "86436");
    CHECK(s.ratio == doctest::Approx(86436.0 / 1.695e6).epsilon(1e-12));
  }
  SUBCASE("the measured degrees-of-freedom ratio") {
    CHECK(17200.0 / 1695000.0 == doctest::Approx(0.0101).epsilon(1e-2));
  }
  SUBCASE("ratio shrinks as the baseline grows") {
    double prev = compare_search_space(2, 7, 1e4).ratio;
    for (double c : {1e5, 1e6, 1e7, 1e8}) {
      double cur = compare_search_space(2, 7, c).ratio;
      CHECK(cur < prev);
      prev = cur;
    }
  }
}

TEST_CASE("a minimal run sends one assignment and one header down, nothing more up") {
  const std::string out = "orch_test_minimal";
  std::filesystem::remove_all(out);
  PipelineConfig cfg = tiny_pipeline(1, 1, 5, out);
  RunReport rep = run_full_pipeline(cfg);

  CAPTURE(rep.stage_error);
  REQUIRE(rep.stage_error.empty());
  CHECK(rep.error_kind.empty());
  REQUIRE(rep.topology == std::vector<std::vector<int>>{{0}});
  CHECK(rep.ledger.kind_count.at("AttributeStats") == 1);
  CHECK(rep.ledger.kind_count.at("BackboneAssignment") == 1);
  CHECK(rep.ledger.kind_count.at("HeaderDistribution") == 1);
  CHECK(rep.ledger.kind_count.count("ImportanceUpload") == 0);
  CHECK(rep.ledger.kind_count.count("AggregatedImportance") == 0);
  CHECK(rep.traffic.acme_upload_bytes == rep.ledger.kind_bytes.at("AttributeStats"));
  CHECK(rep.traffic.centralized_bytes > 0);

  REQUIRE(rep.clusters.size() == 1);
  const ClusterReport& c = rep.clusters[0];
  CHECK(c.cluster_id == "edge/0");
  CHECK(c.candidates.size() == 1);
  CHECK(c.candidates[0].selected);
  CHECK(c.selection.w == 1.0);
  CHECK(c.rounds_run == 0);
  // sketches are exchanged at setup, so even a roundless run knows its
  // (here trivial) neighbor weights
  REQUIRE(c.similarity.rows() == 1);
  CHECK(c.similarity(0, 0) == 1.0);
  REQUIRE(c.devices.size() == 1);
  // zero refinement rounds leave the distributed header untouched
  CHECK(c.devices[0].final_accuracy == c.devices[0].coarse_accuracy);
  CHECK(c.devices[0].masked.empty());
  CHECK(rep.accuracy_improved);

  std::filesystem::remove_all(out);
}

TEST_CASE("the run report serialization round-trips exactly") {
  const std::string out = "orch_test_roundtrip";
  std::filesystem::remove_all(out);
  PipelineConfig cfg = tiny_pipeline(2, 1, 9, out);
  cfg.personalize.rounds = 1;
  RunReport rep = run_full_pipeline(cfg);
  REQUIRE(rep.stage_error.empty());

  const std::string text = report_to_json(rep);
  RunReport back = report_from_json(text);
  CHECK(report_to_json(back) == text);

  write_run_report(rep, out + "/run_report.json");
  RunReport loaded = load_run_report(out + "/run_report.json");
  CHECK(report_to_json(loaded) == text);

  CHECK_THROWS_AS(report_from_json("{"), ConfigError);
  CHECK_THROWS_AS(report_from_json("{\"seed\":1}"), ConfigError);
  CHECK_THROWS_AS(load_run_report(out + "/absent.json"), StateError);
  std::filesystem::remove_all(out);
}

TEST_CASE("the same configuration replays byte-identically") {
  PipelineConfig a = tiny_pipeline(2, 1, 17, "orch_test_replay_a");
  a.personalize.rounds = 1;
  PipelineConfig b = tiny_pipeline(2, 1, 17, "orch_test_replay_b");
  b.personalize.rounds = 1;
  b.threads = 2;  // worker count must not leak into results
  std::filesystem::remove_all(a.out_dir);
  std::filesystem::remove_all(b.out_dir);

  RunReport ra = run_full_pipeline(a);
  RunReport rb = run_full_pipeline(b);
  REQUIRE(ra.stage_error.empty());
  CHECK(report_to_json(ra) == report_to_json(rb));

  write_traffic_csv(ra.ledger, a.out_dir + "/traffic.csv");
  write_traffic_csv(rb.ledger, b.out_dir + "/traffic.csv");
  CHECK(read_file(a.out_dir + "/traffic.csv") == read_file(b.out_dir + "/traffic.csv"));

  RunReport rc = run_full_pipeline(a);
  CHECK(report_to_json(rc) == report_to_json(ra));

  std::filesystem::remove_all(a.out_dir);
  std::filesystem::remove_all(b.out_dir);
}

TEST_CASE("a desk-scale run keeps books balanced and uploads below raw data") {
  const std::string out = "orch_test_desk";
  std::filesystem::remove_all(out);
  PipelineConfig cfg = tiny_pipeline(6, 2, 3, out);
  cfg.personalize.rounds = 1;
  // the upload advantage is a statement about data volume: give each device
  // enough samples that raw data dominates the score vectors
  cfg.device_samples = 200;
  RunReport rep = run_full_pipeline(cfg);

  CAPTURE(rep.stage_error);
  REQUIRE(rep.stage_error.empty());
  REQUIRE(rep.clusters.size() == 2);
  CHECK(rep.ledger.kind_count.at("AttributeStats") == 6);
  CHECK(rep.ledger.kind_count.at("BackboneAssignment") == 2);
  CHECK(rep.ledger.kind_count.at("HeaderDistribution") == 6);
  CHECK(rep.ledger.kind_count.at("ImportanceUpload") == 6);
  CHECK(rep.ledger.kind_count.at("AggregatedImportance") == 6);

  std::int64_t by_kind = 0, by_link = 0;
  for (const auto& [kind, bytes] : rep.ledger.kind_bytes) by_kind += bytes;
  for (const auto& [link, kinds] : rep.ledger.links)
    for (const auto& [kind, bytes] : kinds) by_link += bytes;
  CHECK(by_kind == rep.ledger.total_bytes);
  CHECK(by_link == rep.ledger.total_bytes);

  CHECK(rep.traffic.centralized_bytes > 0);
  CHECK(rep.traffic.ratio < 1.0);
  CHECK(rep.traffic.ratio > 0.0);

  int devices_seen = 0;
  for (const ClusterReport& c : rep.clusters) {
    REQUIRE(!c.devices.empty());
    CHECK(c.rounds_run == 1);
    REQUIRE(c.similarity.rows() == (int)c.devices.size());
    for (int i = 0; i < c.similarity.rows(); ++i)
      CHECK(c.similarity.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
    for (const DeviceReport& d : c.devices) {
      CHECK(d.masked.size() == 1);  // one round, one neuron discarded
      ++devices_seen;
    }
    CHECK(c.grid_cells >= 1);
    CHECK(!c.dag.blocks.empty());
  }
  CHECK(devices_seen == 6);

  // every link in the csv carries a direction consistent with the tiers
  write_traffic_csv(rep.ledger, out + "/traffic.csv");
  std::istringstream csv(read_file(out + "/traffic.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "link,kind,bytes,direction");
  int rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    ++rows;
    const std::size_t arrow = line.find("->");
    const std::size_t comma = line.find(',', arrow);
    REQUIRE(arrow != std::string::npos);
    const std::string from = line.substr(0, arrow);
    const std::string to = line.substr(arrow + 2, comma - arrow - 2);
    const bool up = line.rfind(",up") == line.size() - 3;
    CHECK(up == (node_tier(to) > node_tier(from)));
  }
  CHECK(rows > 0);
  std::filesystem::remove_all(out);
}

TEST_CASE("a failing stage is named in the report instead of throwing") {
  SUBCASE("an impossible storage budget aborts backbone selection") {
    const std::string out = "orch_test_abort";
    std::filesystem::remove_all(out);
    PipelineConfig cfg = tiny_pipeline(2, 1, 21, out);
    for (DeviceProfile& p : cfg.profiles) p.storage_params = 1;
    RunReport rep = run_full_pipeline(cfg);
    CHECK(rep.stage_error.rfind("phase1", 0) == 0);
    CHECK(rep.error_kind == "infeasible");
    CHECK(!rep.topology.empty());  // the earlier stages still report
    CHECK(rep.clusters.empty());
    std::filesystem::remove_all(out);
  }
  SUBCASE("an invalid configuration is tagged as config") {
    PipelineConfig cfg = tiny_pipeline(2, 1, 21, "orch_test_cfg");
    cfg.clusters = 5;
    RunReport rep = run_full_pipeline(cfg);
    CHECK(rep.stage_error.rfind("config", 0) == 0);
    CHECK(rep.error_kind == "config");
  }
}

TEST_CASE("pipeline configuration rejects inconsistent pieces by name") {
  PipelineConfig ok = tiny_pipeline(2, 1, 1, "unused");
  CHECK_NOTHROW(ok.validate());

  PipelineConfig c1 = ok;
  c1.widths = {0.0, 1.0};
  CHECK_THROWS_WITH_AS(c1.validate(), doctest::Contains("widths"), ConfigError);

  PipelineConfig c2 = ok;
  c2.depths = {3};
  CHECK_THROWS_WITH_AS(c2.validate(), doctest::Contains("depths"), ConfigError);

  PipelineConfig c3 = ok;
  c3.data.patch_dim = 9;
  CHECK_THROWS_WITH_AS(c3.validate(), doctest::Contains("patch_dim"), ConfigError);

  PipelineConfig c4 = ok;
  c4.profiles[1].device_id = c4.profiles[0].device_id;
  CHECK_THROWS_WITH_AS(c4.validate(), doctest::Contains("duplicate"), ConfigError);

  PipelineConfig c5 = ok;
  c5.profiles[0].device_id = "edge/0";
  CHECK_THROWS_WITH_AS(c5.validate(), doctest::Contains("edge/0"), ConfigError);

  PipelineConfig c6 = ok;
  c6.personalize.rounds = 4;
  c6.personalize.discard_per_round = 1;
  CHECK_THROWS_WITH_AS(c6.validate(), doctest::Contains("exhaust"), ConfigError);

  PipelineConfig c7 = ok;
  c7.gamma_p = 0.0;
  CHECK_THROWS_WITH_AS(c7.validate(), doctest::Contains("gamma_p"), ConfigError);
}
