#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "acme/config.hpp"
#include "doctest.h"

using namespace acme;

namespace {

// a config with every field off its default, including awkward doubles
PipelineConfig crooked_config() {
  PipelineConfig cfg;
  cfg.seed = 99;
  cfg.threads = 3;
  cfg.out_dir = "runs/exp7";
  cfg.reference.depth = 3;
  cfg.reference.num_heads = 2;
  cfg.reference.hidden_dim = 8;
  cfg.reference.ffn_dim = 16;
  cfg.reference.head_dim = 2;
  cfg.reference.num_patches = 4;
  cfg.reference.patch_dim = 4;
  cfg.reference.num_classes = 5;
  cfg.reference.seed = 99;
  cfg.reference_train_steps = 17;
  cfg.reference_lr = 0.1;
  cfg.train_batch_size = 12;
  cfg.widths = {1.0 / 3.0, 0.7, 1.0};
  cfg.depths = {1, 3};
  cfg.distill.lambda1 = 0.25;
  cfg.distill.lambda2 = 1e-9;
  cfg.distill.steps = 33;
  cfg.distill.lr = 0.025;
  cfg.distill.batch_size = 6;
  cfg.clusters = 2;
  cfg.gamma_p = 0.125;
  cfg.sigma = 0.001;
  cfg.nas.blocks = 3;
  cfg.nas.alternations = 2;
  cfg.nas.shared_steps = 5;
  cfg.nas.shared_samples = 2;
  cfg.nas.controller_samples = 3;
  cfg.nas.shared_lr = 0.07;
  cfg.nas.controller_lr = 0.013;
  cfg.nas.batch_size = 4;
  cfg.nas.holdout_fraction = 0.4;
  cfg.nas.header.channels = 3;
  cfg.nas.header.mlp_hidden = 6;
  cfg.nas.header.repeats = 2;
  cfg.nas.header.lstm_hidden = 12;
  cfg.nas.header.embed_dim = 5;
  cfg.nas.header.baseline_momentum = 0.15;
  cfg.personalize.rounds = 3;
  cfg.personalize.discard_per_round = 1;
  cfg.personalize.local_steps = 2;
  cfg.personalize.lr = 0.3;
  cfg.personalize.batch_size = 2;
  cfg.personalize.accumulation_steps = 3;
  cfg.personalize.sketch_size = 5;
  cfg.personalize.p_order = 2;
  cfg.personalize.absences = {{1, 0}, {2, 1}};
  cfg.data.num_classes = 5;
  cfg.data.patches = 4;
  cfg.data.patch_dim = 4;
  cfg.data.class_sep = 1.5;
  cfg.data.noise = 0.2;
  cfg.cloud_samples = 40;
  cfg.probe_samples = 20;
  cfg.edge_samples = 30;
  cfg.device_samples = 25;
  cfg.classes_per_device = 3;
  cfg.centralized_search_space = 2.5e7;
  cfg.profiles.clear();
  for (int i = 0; i < 3; ++i) {
    DeviceProfile p;
    p.device_id = "box-" + std::to_string(i);
    p.vcpus = 2 + 3 * i;
    p.storage_params = 90000 + 41000 * i;
    p.base_power = 6.75 + i;
    p.alpha_g = 0.1;
    p.alpha_beta = 0.05;
    p.base_latency = 2.5 - 0.5 * i;
    p.alpha_l = 0.25;
    p.epochs = 1 + i;
    p.patches = 4;
    cfg.profiles.push_back(p);
  }
  return cfg;
}

}  // namespace

TEST_CASE("a configuration survives the text round trip field for field") {
  PipelineConfig cfg = crooked_config();
  const std::string text = config_to_toml(cfg);
  PipelineConfig back = parse_config(text, "roundtrip.toml");

  CHECK(config_to_toml(back) == text);

  CHECK(back.seed == 99);
  CHECK(back.reference.seed == 99);
  CHECK(back.out_dir == "runs/exp7");
  CHECK(back.widths == cfg.widths);  // exact doubles, including 1/3
  CHECK(back.depths == cfg.depths);
  CHECK(back.distill.lambda2 == 1e-9);
  CHECK(back.nas.controller_lr == 0.013);
  CHECK(back.personalize.absences == cfg.personalize.absences);
  CHECK(back.profiles.size() == 3);
  CHECK(back.profiles[2].device_id == "box-2");
  CHECK(back.profiles[2].storage_params == 172000);
  CHECK(back.profiles[2].base_latency == 1.5);
  for (const DeviceProfile& p : back.profiles) CHECK(p.patches == back.reference.num_patches);

  CHECK_NOTHROW(back.validate());
}

TEST_CASE("comments, spacing, and repeated serialization are stable") {
  const std::string text =
      "# leading comment\n"
      "seed = 7   # trailing comment\n"
      "\n"
      "   threads =    2\n"
      "out_dir = \"has # hash\"  # the hash inside quotes stays\n"
      "[family]\n"
      "widths = [ 0.5 , 1.0 ]   # spaced array\n"
      "depths = [1]\n";
  PipelineConfig cfg = parse_config(text, "spaced.toml");
  CHECK(cfg.seed == 7);
  CHECK(cfg.threads == 2);
  CHECK(cfg.out_dir == "has # hash");
  CHECK(cfg.widths == std::vector<double>{0.5, 1.0});

  const std::string once = config_to_toml(cfg);
  CHECK(config_to_toml(parse_config(once, "x")) == once);
}

TEST_CASE("parse errors carry file, line, and the dotted key") {
  auto message_of = [](const std::string& text) {
    try {
      parse_config(text, "bad.toml");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };

  SUBCASE("unknown top-level key") {
    const std::string m = message_of("speling = 1\n");
    CHECK(m.find("bad.toml:1:") != std::string::npos);
    CHECK(m.find("'speling'") != std::string::npos);
  }
  SUBCASE("unknown key inside a section") {
    const std::string m = message_of("[nas]\nblocks = 2\nbogus = 3\n");
    CHECK(m.find("bad.toml:3:") != std::string::npos);
    CHECK(m.find("'nas.bogus'") != std::string::npos);
  }
  SUBCASE("unknown section") {
    const std::string m = message_of("\n[cloud]\n");
    CHECK(m.find("bad.toml:2:") != std::string::npos);
    CHECK(m.find("[cloud]") != std::string::npos);
  }
  SUBCASE("duplicate key") {
    const std::string m = message_of("[nas]\nblocks = 2\nblocks = 3\n");
    CHECK(m.find("bad.toml:3:") != std::string::npos);
    CHECK(m.find("duplicate") != std::string::npos);
  }
  SUBCASE("integer key given a float") {
    const std::string m = message_of("[nas]\nblocks = 1.5\n");
    CHECK(m.find("bad.toml:2:") != std::string::npos);
    CHECK(m.find("integer") != std::string::npos);
  }
  SUBCASE("string key given a bare word") {
    const std::string m = message_of("out_dir = nope\n");
    CHECK(m.find("quoted string") != std::string::npos);
  }
  SUBCASE("array key given a scalar") {
    const std::string m = message_of("[family]\nwidths = 0.5\n");
    CHECK(m.find("array") != std::string::npos);
  }
  SUBCASE("absence pairs must be pairs") {
    const std::string m = message_of("[personalize]\nabsences = [[1, 2, 3]]\n");
    CHECK(m.find("pairs") != std::string::npos);
  }
  SUBCASE("missing equals sign") {
    const std::string m = message_of("[nas]\nblocks 2\n");
    CHECK(m.find("key = value") != std::string::npos);
  }
  SUBCASE("a device table needs an id") {
    const std::string m = message_of("[[device]]\nvcpus = 4\n");
    CHECK(m.find("bad.toml:1:") != std::string::npos);
    CHECK(m.find("'id'") != std::string::npos);
  }
  SUBCASE("duplicate device keys are scoped per table") {
    CHECK_NOTHROW(parse_config("[[device]]\nid = \"a\"\n[[device]]\nid = \"b\"\n", "ok.toml"));
    const std::string m = message_of("[[device]]\nid = \"a\"\nid = \"b\"\n");
    CHECK(m.find("duplicate") != std::string::npos);
  }
}

TEST_CASE("loading validates the parsed configuration") {
  PipelineConfig cfg = crooked_config();

  SUBCASE("a zero loss granularity cannot be loaded") {
    cfg.gamma_p = 0.0;
    save_config(cfg, "config_test_bad.toml");
    CHECK_THROWS_WITH_AS(load_config("config_test_bad.toml"), doctest::Contains("gamma_p"),
                         ConfigError);
  }
  SUBCASE("more clusters than devices cannot be loaded") {
    cfg.clusters = 9;
    save_config(cfg, "config_test_bad.toml");
    CHECK_THROWS_AS(load_config("config_test_bad.toml"), ConfigError);
  }
  SUBCASE("a well-formed file loads") {
    save_config(cfg, "config_test_ok.toml");
    PipelineConfig loaded = load_config("config_test_ok.toml");
    CHECK(config_to_toml(loaded) == config_to_toml(cfg));
  }
  SUBCASE("a missing file is a state error") {
    CHECK_THROWS_AS(load_config("config_test_absent.toml"), StateError);
  }
}

TEST_CASE("the shipped default configuration loads and is runnable") {
  PipelineConfig cfg = load_config(std::string(ACME_SOURCE_DIR) + "/configs/default.toml");
  CHECK(cfg.profiles.size() == 6);
  CHECK(cfg.clusters == 2);
  CHECK(cfg.seed == 1);
  CHECK(cfg.personalize.rounds == 2);
  for (const DeviceProfile& p : cfg.profiles) CHECK(p.patches == cfg.reference.num_patches);

  // the two hardware tiers in the file are what the partitioner recovers
  Topology t = partition_devices(cfg.profiles, cfg.clusters, cfg.seed);
  std::vector<std::vector<int>> groups = t.clusters;
  for (auto& g : groups) std::sort(g.begin(), g.end());
  std::sort(groups.begin(), groups.end());
  CHECK(groups == std::vector<std::vector<int>>{{0, 1, 2}, {3, 4, 5}});

  const std::string text = config_to_toml(cfg);
  CHECK(config_to_toml(parse_config(text, "default")) == text);
}
