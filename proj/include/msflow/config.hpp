#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msflow/encoder.hpp"
#include "msflow/eval.hpp"
#include "msflow/flownet.hpp"
#include "msflow/miner.hpp"
#include "msflow/model.hpp"

namespace msf::cfg {

struct EvalConfig {
  std::vector<double> alphas = {0.05, 0.1, 0.15};
  eval::PckConvention convention = eval::PckConvention::kUnitDiagonal;
  int probe_square = 17;   // gray square side for the receptive-field sweep
  int probe_stride = 8;    // sweep step
  int dense_samples = 1000;
};

// One file drives every command. All randomness derives from `seed` through
// named sub-streams, so equal configs give byte-identical outputs.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string dataset;  // dataset root directory
  BackboneConfig backbone;
  mine::MinerConfig miner;
  enc::EncoderTrainConfig encoder;
  flow::FlowTrainConfig flow;
  EvalConfig eval;
};

// Paper-scale defaults.
RunConfig default_config();

// Desk-scale profile: 64x64 inputs, a slim backbone, and training budgets
// sized for minutes, not hours.
RunConfig toy_config();

// Parse a JSON config. An optional "profile" key ("default" or "toy")
// selects the base; every other key overrides one documented field. Unknown
// keys anywhere in the tree are rejected with their dotted path; numeric
// fields are range-checked before any command runs.
RunConfig load_config(const std::filesystem::path& path);

// Fully materialized form of a config, suitable for load_config round trips.
std::string dump_config(const RunConfig& config);

}  // namespace msf::cfg
