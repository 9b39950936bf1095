#pragma once

#include <string>

#include "acme/orchestrator.hpp"

namespace acme {

// TOML-style experiment file -> pipeline configuration. The accepted grammar
// is the subset the default config uses: [section] and [nas.header] tables,
// one [[device]] table per device, `key = value` lines holding strings,
// integers, floats, booleans, flat numeric arrays or integer-pair arrays, and
// `#` comments. Every error carries file:line and the dotted key.
//
// Only the top-level seed appears in the file; all stage seeds derive from
// it, so (file, seed) pins the entire run. Device patch counts follow the
// reference model and cannot drift on their own.
PipelineConfig parse_config(const std::string& text, const std::string& name = "<config>");

// parse_config + PipelineConfig::validate
PipelineConfig load_config(const std::string& file);

// Canonical text form; load(save(cfg)) reproduces cfg field for field.
std::string config_to_toml(const PipelineConfig& cfg);
void save_config(const PipelineConfig& cfg, const std::string& file);

}  // namespace acme
