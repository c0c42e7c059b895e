#include "msflow/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "msflow/common.hpp"

namespace msf::cfg {

namespace {

using json = nlohmann::json;

// Every object level is checked against its documented key set, so a typo
// fails with the full dotted path instead of being silently ignored.
void reject_unknown(const json& j, const std::string& scope,
                    const std::set<std::string>& known) {
  MSF_CHECK(j.is_object(), "config: '" << (scope.empty() ? "(root)" : scope)
                                       << "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    MSF_CHECK(known.count(key) > 0,
              "config: unknown field '" << (scope.empty() ? key : scope + "." + key)
                                        << "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

void parse_msconv(const json& j, const std::string& scope, MsConvConfig& c) {
  reject_unknown(j, scope, {"dilations", "share_kernel", "fuse_after_activation"});
  read_field(j, "dilations", c.dilations);
  read_field(j, "share_kernel", c.share_kernel);
  read_field(j, "fuse_after_activation", c.fuse_after_activation);
  MSF_CHECK(!c.dilations.empty(), "config: " << scope << ".dilations is empty");
  for (int d : c.dilations)
    MSF_CHECK(d >= 1, "config: " << scope << ".dilations has entry " << d << " < 1");
}

void parse_backbone(const json& j, BackboneConfig& c) {
  reject_unknown(j, "backbone",
                 {"input_size", "channels", "pool_after", "embed_dim", "kernel",
                  "multi_scale", "msconv"});
  read_field(j, "input_size", c.input_size);
  read_field(j, "channels", c.channels);
  read_field(j, "pool_after", c.pool_after);
  read_field(j, "embed_dim", c.embed_dim);
  read_field(j, "kernel", c.kernel);
  read_field(j, "multi_scale", c.multi_scale);
  if (j.contains("msconv")) parse_msconv(j.at("msconv"), "backbone.msconv", c.msconv);
  MSF_CHECK(c.input_size >= 1, "config: backbone.input_size must be >= 1");
  MSF_CHECK(!c.channels.empty(), "config: backbone.channels is empty");
  MSF_CHECK(c.pool_after.size() == c.channels.size(),
            "config: backbone.pool_after must match channels in length");
  MSF_CHECK(c.embed_dim >= 1, "config: backbone.embed_dim must be >= 1");
  MSF_CHECK(c.kernel >= 1 && c.kernel % 2 == 1,
            "config: backbone.kernel must be odd and positive");
}

void parse_miner(const json& j, mine::MinerConfig& c) {
  reject_unknown(j, "miner",
                 {"k", "pyramid_levels", "patch_min", "patch_max", "reference_size",
                  "apparent_size", "budget", "one_cycle", "candidates",
                  "spatial_neighbors", "lambda_d", "lambda_s", "outlier_cost",
                  "trws_max_iters", "trws_tol"});
  read_field(j, "k", c.k);
  read_field(j, "pyramid_levels", c.pyramid_levels);
  read_field(j, "patch_min", c.patch_min);
  read_field(j, "patch_max", c.patch_max);
  read_field(j, "reference_size", c.reference_size);
  read_field(j, "apparent_size", c.apparent_size);
  read_field(j, "budget", c.budget);
  read_field(j, "one_cycle", c.one_cycle);
  read_field(j, "candidates", c.candidates);
  read_field(j, "spatial_neighbors", c.spatial_neighbors);
  read_field(j, "lambda_d", c.lambda_d);
  read_field(j, "lambda_s", c.lambda_s);
  read_field(j, "outlier_cost", c.outlier_cost);
  read_field(j, "trws_max_iters", c.trws_max_iters);
  read_field(j, "trws_tol", c.trws_tol);
  MSF_CHECK(c.k >= 1, "config: miner.k must be >= 1");
  MSF_CHECK(c.pyramid_levels >= 1, "config: miner.pyramid_levels must be >= 1");
  MSF_CHECK(c.patch_min > 0 && c.patch_max >= c.patch_min,
            "config: miner patch range must satisfy 0 < patch_min <= patch_max");
  MSF_CHECK(c.reference_size >= 1, "config: miner.reference_size must be >= 1");
  MSF_CHECK(c.apparent_size >= 1, "config: miner.apparent_size must be >= 1");
  MSF_CHECK(c.budget >= 1, "config: miner.budget must be >= 1");
  MSF_CHECK(c.candidates >= 1, "config: miner.candidates must be >= 1");
  MSF_CHECK(c.spatial_neighbors >= 1, "config: miner.spatial_neighbors must be >= 1");
  MSF_CHECK(c.lambda_d >= 0 && c.lambda_s >= 0,
            "config: miner consistency weights must be >= 0");
  MSF_CHECK(c.outlier_cost >= 0, "config: miner.outlier_cost must be >= 0");
  MSF_CHECK(c.trws_max_iters >= 1, "config: miner.trws_max_iters must be >= 1");
  MSF_CHECK(c.trws_tol >= 0, "config: miner.trws_tol must be >= 0");
}

void parse_encoder(const json& j, enc::EncoderTrainConfig& c) {
  reject_unknown(j, "encoder",
                 {"epochs", "lr", "momentum", "margin", "negatives", "radius_px",
                  "max_corrs_per_pair", "augment", "max_shift", "max_rotate_deg"});
  read_field(j, "epochs", c.epochs);
  read_field(j, "lr", c.lr);
  read_field(j, "momentum", c.momentum);
  read_field(j, "margin", c.margin);
  read_field(j, "negatives", c.negatives);
  read_field(j, "radius_px", c.radius_px);
  read_field(j, "max_corrs_per_pair", c.max_corrs_per_pair);
  read_field(j, "augment", c.augment);
  read_field(j, "max_shift", c.max_shift);
  read_field(j, "max_rotate_deg", c.max_rotate_deg);
  MSF_CHECK(c.epochs >= 0, "config: encoder.epochs must be >= 0");
  MSF_CHECK(c.lr >= 0, "config: encoder.lr must be >= 0");
  MSF_CHECK(c.momentum >= 0 && c.momentum < 1,
            "config: encoder.momentum must be in [0,1)");
  MSF_CHECK(c.margin > 0, "config: encoder.margin must be > 0");
  MSF_CHECK(c.negatives >= 0, "config: encoder.negatives must be >= 0");
  MSF_CHECK(c.radius_px >= 0, "config: encoder.radius_px must be >= 0");
  MSF_CHECK(c.max_corrs_per_pair >= 1, "config: encoder.max_corrs_per_pair must be >= 1");
  MSF_CHECK(c.max_shift >= 0, "config: encoder.max_shift must be >= 0");
  MSF_CHECK(c.max_rotate_deg >= 0, "config: encoder.max_rotate_deg must be >= 0");
}

void parse_flow(const json& j, flow::FlowTrainConfig& c) {
  reject_unknown(j, "flow",
                 {"epochs", "lr", "momentum", "gamma", "mu", "nu", "squared",
                  "mask_radius", "train_encoder", "loc_hidden", "trunk_hidden"});
  read_field(j, "epochs", c.epochs);
  read_field(j, "lr", c.lr);
  read_field(j, "momentum", c.momentum);
  read_field(j, "gamma", c.weights.gamma);
  read_field(j, "mu", c.weights.mu);
  read_field(j, "nu", c.weights.nu);
  read_field(j, "squared", c.squared);
  read_field(j, "mask_radius", c.mask_radius);
  read_field(j, "train_encoder", c.train_encoder);
  read_field(j, "loc_hidden", c.net.loc_hidden);
  read_field(j, "trunk_hidden", c.net.trunk_hidden);
  MSF_CHECK(c.epochs >= 0, "config: flow.epochs must be >= 0");
  MSF_CHECK(c.lr >= 0, "config: flow.lr must be >= 0");
  MSF_CHECK(c.momentum >= 0 && c.momentum < 1, "config: flow.momentum must be in [0,1)");
  MSF_CHECK(c.weights.gamma >= 0 && c.weights.mu >= 0 && c.weights.nu >= 0,
            "config: flow loss weights must be >= 0");
  MSF_CHECK(c.mask_radius >= 0, "config: flow.mask_radius must be >= 0");
  MSF_CHECK(c.net.loc_hidden >= 1 && c.net.trunk_hidden >= 1,
            "config: flow hidden widths must be >= 1");
}

void parse_eval(const json& j, EvalConfig& c) {
  reject_unknown(j, "eval",
                 {"alphas", "convention", "probe_square", "probe_stride",
                  "dense_samples"});
  read_field(j, "alphas", c.alphas);
  if (j.contains("convention")) {
    const std::string name = j.at("convention").get<std::string>();
    if (name == "unit-diagonal") {
      c.convention = eval::PckConvention::kUnitDiagonal;
    } else if (name == "unit-per-axis") {
      c.convention = eval::PckConvention::kUnitPerAxis;
    } else if (name == "bbox-max") {
      c.convention = eval::PckConvention::kBboxMax;
    } else {
      MSF_CHECK(false, "config: eval.convention '"
                           << name
                           << "' is not one of unit-diagonal, unit-per-axis, bbox-max");
    }
  }
  read_field(j, "probe_square", c.probe_square);
  read_field(j, "probe_stride", c.probe_stride);
  read_field(j, "dense_samples", c.dense_samples);
  MSF_CHECK(!c.alphas.empty(), "config: eval.alphas is empty");
  for (double a : c.alphas)
    MSF_CHECK(a > 0 && a <= 1, "config: eval.alphas entry " << a << " outside (0,1]");
  MSF_CHECK(c.probe_square >= 1, "config: eval.probe_square must be >= 1");
  MSF_CHECK(c.probe_stride >= 1, "config: eval.probe_stride must be >= 1");
  MSF_CHECK(c.dense_samples >= 1, "config: eval.dense_samples must be >= 1");
}

}  // namespace

RunConfig default_config() { return RunConfig{}; }

RunConfig toy_config() {
  RunConfig c;
  c.backbone.input_size = 64;
  c.backbone.channels = {8, 16, 32, 48};
  c.backbone.pool_after = {1, 1, 0, 0};
  c.backbone.embed_dim = 32;
  c.miner.pyramid_levels = 3;
  c.miner.budget = 40;
  c.encoder.epochs = 6;
  c.encoder.radius_px = 9.0;
  c.encoder.negatives = 16;
  c.encoder.max_corrs_per_pair = 8;
  c.flow.epochs = 30;
  c.flow.net.loc_hidden = 16;
  c.flow.net.trunk_hidden = 16;
  c.eval.probe_square = 9;
  c.eval.probe_stride = 4;
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  MSF_CHECK(in.good(), "config: cannot open '" << path.string() << "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    MSF_CHECK(false, "config: " << path.string() << ": " << e.what());
  }
  reject_unknown(j, "",
                 {"profile", "seed", "dataset", "backbone", "miner", "encoder", "flow",
                  "eval"});

  RunConfig c;
  if (j.contains("profile")) {
    const std::string profile = j.at("profile").get<std::string>();
    if (profile == "toy") {
      c = toy_config();
    } else if (profile == "default") {
      c = default_config();
    } else {
      MSF_CHECK(false, "config: profile '" << profile
                                           << "' is not one of default, toy");
    }
  }
  read_field(j, "seed", c.seed);
  read_field(j, "dataset", c.dataset);
  if (j.contains("backbone")) parse_backbone(j.at("backbone"), c.backbone);
  if (j.contains("miner")) parse_miner(j.at("miner"), c.miner);
  if (j.contains("encoder")) parse_encoder(j.at("encoder"), c.encoder);
  if (j.contains("flow")) parse_flow(j.at("flow"), c.flow);
  if (j.contains("eval")) parse_eval(j.at("eval"), c.eval);
  c.flow.net.feat_dim = c.backbone.embed_dim;
  return c;
}

std::string dump_config(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["backbone"] = {{"input_size", c.backbone.input_size},
                   {"channels", c.backbone.channels},
                   {"pool_after", c.backbone.pool_after},
                   {"embed_dim", c.backbone.embed_dim},
                   {"kernel", c.backbone.kernel},
                   {"multi_scale", c.backbone.multi_scale},
                   {"msconv",
                    {{"dilations", c.backbone.msconv.dilations},
                     {"share_kernel", c.backbone.msconv.share_kernel},
                     {"fuse_after_activation", c.backbone.msconv.fuse_after_activation}}}};
  j["miner"] = {{"k", c.miner.k},
                {"pyramid_levels", c.miner.pyramid_levels},
                {"patch_min", c.miner.patch_min},
                {"patch_max", c.miner.patch_max},
                {"reference_size", c.miner.reference_size},
                {"apparent_size", c.miner.apparent_size},
                {"budget", c.miner.budget},
                {"one_cycle", c.miner.one_cycle},
                {"candidates", c.miner.candidates},
                {"spatial_neighbors", c.miner.spatial_neighbors},
                {"lambda_d", c.miner.lambda_d},
                {"lambda_s", c.miner.lambda_s},
                {"outlier_cost", c.miner.outlier_cost},
                {"trws_max_iters", c.miner.trws_max_iters},
                {"trws_tol", c.miner.trws_tol}};
  j["encoder"] = {{"epochs", c.encoder.epochs},
                  {"lr", c.encoder.lr},
                  {"momentum", c.encoder.momentum},
                  {"margin", c.encoder.margin},
                  {"negatives", c.encoder.negatives},
                  {"radius_px", c.encoder.radius_px},
                  {"max_corrs_per_pair", c.encoder.max_corrs_per_pair},
                  {"augment", c.encoder.augment},
                  {"max_shift", c.encoder.max_shift},
                  {"max_rotate_deg", c.encoder.max_rotate_deg}};
  j["flow"] = {{"epochs", c.flow.epochs},
               {"lr", c.flow.lr},
               {"momentum", c.flow.momentum},
               {"gamma", c.flow.weights.gamma},
               {"mu", c.flow.weights.mu},
               {"nu", c.flow.weights.nu},
               {"squared", c.flow.squared},
               {"mask_radius", c.flow.mask_radius},
               {"train_encoder", c.flow.train_encoder},
               {"loc_hidden", c.flow.net.loc_hidden},
               {"trunk_hidden", c.flow.net.trunk_hidden}};
  j["eval"] = {{"alphas", c.eval.alphas},
               {"convention", eval::to_string(c.eval.convention)},
               {"probe_square", c.eval.probe_square},
               {"probe_stride", c.eval.probe_stride},
               {"dense_samples", c.eval.dense_samples}};
  return j.dump(2) + "\n";
}

}  // namespace msf::cfg
