#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "jemha/attention.hpp"
#include "jemha/speaker.hpp"
#include "jemha/tensor.hpp"

namespace jemha {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Deterministic name → tensor listing for each model; restore() pairs
// checkpoint entries with a freshly constructed model through these.
std::vector<NamedTensor> named_parameters(const SpeakerParams& p);
std::vector<NamedTensor> named_parameters(const ReinforcerParams& p);
std::vector<NamedTensor> named_parameters(const ListenerParams& p);
std::vector<NamedTensor> named_parameters(const VqaModelParams& p);

// Prepends "prefix." to every name (for bundling several models per file).
std::vector<NamedTensor> prefixed(const std::string& prefix, std::vector<NamedTensor> params);

struct CheckpointEntry {
  std::vector<int> shape;
  std::vector<double> values;  // after the float32 storage round-trip
};

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, CheckpointEntry> params;
};

// "JMHC", u32 version, config JSON blob, then name-sorted entries of
// (name, dims, little-endian float32 data). Duplicate names are an error.
void save_checkpoint(const std::string& path, const nlohmann::json& config, const std::vector<NamedTensor>& params);
Checkpoint load_checkpoint(const std::string& path);

// Copies every checkpoint entry into the same-named tensor; a missing,
// extra, or shape-mismatched name is an error.
void restore_parameters(const Checkpoint& ck, const std::vector<NamedTensor>& into);

}  // namespace jemha
