#pragma once

#include <cstdint>
#include <string>

#include "acme/param_store.hpp"

namespace acme {

// Weight file layout (little-endian throughout):
//   magic "ACMEW1" | u64 config_hash | u64 record_count |
//   repeated: u32 path_len | path bytes | u32 ndims | i32 dims[] | f64 payload[]
void save_params(const ParamStore& store, const std::string& file, std::uint64_t config_hash);

// Loads records into `store` (replacing same-path entries). Throws StateError
// on magic/hash mismatch or truncation. expected_hash 0 skips the hash check.
std::uint64_t load_params(ParamStore& store, const std::string& file,
                          std::uint64_t expected_hash);

}  // namespace acme
