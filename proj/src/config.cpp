#include "anapred/config.hpp"

#include <fstream>
#include <initializer_list>
#include <string>

#include "anapred/common.hpp"

namespace anapred {

namespace {

using nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void check_keys(const ordered_json& j, const std::string& path,
                std::initializer_list<const char*> known) {
  if (!j.is_object()) fail("config section " + path + " must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* name : known)
      if (item.key() == name) {
        ok = true;
        break;
      }
    if (!ok) fail("unknown config key: " + path + "." + item.key());
  }
}

double as_double(const ordered_json& v, const std::string& path) {
  if (!v.is_number()) fail(path + " must be a number");
  return v.get<double>();
}

int as_int(const ordered_json& v, const std::string& path) {
  if (!v.is_number_integer()) fail(path + " must be an integer");
  return v.get<int>();
}

std::uint64_t as_u64(const ordered_json& v, const std::string& path) {
  if (!(v.is_number_unsigned() ||
        (v.is_number_integer() && v.get<std::int64_t>() >= 0)))
    fail(path + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

bool as_bool(const ordered_json& v, const std::string& path) {
  if (!v.is_boolean()) fail(path + " must be true or false");
  return v.get<bool>();
}

std::string as_string(const ordered_json& v, const std::string& path) {
  if (!v.is_string()) fail(path + " must be a string");
  return v.get<std::string>();
}

Grid3 as_grid(const ordered_json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 3)
    fail(path + " must be an array of 3 integers");
  Grid3 g{as_int(v[0], path), as_int(v[1], path), as_int(v[2], path)};
  if (g.x < 1 || g.y < 1 || g.z < 1) fail(path + " axes must be >= 1");
  return g;
}

Vec3 as_vec3(const ordered_json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 3)
    fail(path + " must be an array of 3 numbers");
  return Vec3(as_double(v[0], path), as_double(v[1], path),
              as_double(v[2], path));
}

ParamRange as_range(const ordered_json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 2)
    fail(path + " must be an array [lo, hi]");
  return ParamRange{as_double(v[0], path), as_double(v[1], path)};
}

std::vector<int> as_int_list(const ordered_json& v, const std::string& path) {
  if (!v.is_array() || v.empty())
    fail(path + " must be a non-empty array of integers");
  std::vector<int> out;
  for (const auto& e : v) out.push_back(as_int(e, path));
  return out;
}

ordered_json grid_json(Grid3 g) { return ordered_json::array({g.x, g.y, g.z}); }

ordered_json vec3_json(const Vec3& v) {
  return ordered_json::array({v[0], v[1], v[2]});
}

ordered_json range_json(const ParamRange& r) {
  return ordered_json::array({r.lo, r.hi});
}

void parse_phantom(const ordered_json& j, CorpusRanges& out) {
  check_keys(j, "phantom",
             {"shape", "spacing_mm", "body_semiaxes_mm", "gtvp_radius_mm",
              "gtvn_radius_mm", "shrink_factor", "body_shrink_mm",
              "noise_sigma_image", "dose_peak"});
  if (auto it = j.find("shape"); it != j.end())
    out.base.shape = as_grid(*it, "phantom.shape");
  if (auto it = j.find("spacing_mm"); it != j.end())
    out.base.spacing_mm = as_vec3(*it, "phantom.spacing_mm");
  if (auto it = j.find("body_semiaxes_mm"); it != j.end())
    out.base.body_semiaxes_mm = as_vec3(*it, "phantom.body_semiaxes_mm");
  if (auto it = j.find("gtvp_radius_mm"); it != j.end())
    out.gtvp_radius_mm = as_range(*it, "phantom.gtvp_radius_mm");
  if (auto it = j.find("gtvn_radius_mm"); it != j.end())
    out.gtvn_radius_mm = as_range(*it, "phantom.gtvn_radius_mm");
  if (auto it = j.find("shrink_factor"); it != j.end())
    out.shrink_factor = as_range(*it, "phantom.shrink_factor");
  if (auto it = j.find("body_shrink_mm"); it != j.end())
    out.body_shrink_mm = as_range(*it, "phantom.body_shrink_mm");
  if (auto it = j.find("noise_sigma_image"); it != j.end())
    out.base.noise_sigma_image = as_double(*it, "phantom.noise_sigma_image");
  if (auto it = j.find("dose_peak"); it != j.end())
    out.base.dose_peak = as_double(*it, "phantom.dose_peak");
}

void parse_data(const ordered_json& j, DataConfig& out) {
  check_keys(j, "data", {"n_cases", "val_fraction", "test_fraction"});
  if (auto it = j.find("n_cases"); it != j.end())
    out.n_cases = as_int(*it, "data.n_cases");
  if (auto it = j.find("val_fraction"); it != j.end())
    out.val_fraction = as_double(*it, "data.val_fraction");
  if (auto it = j.find("test_fraction"); it != j.end())
    out.test_fraction = as_double(*it, "data.test_fraction");
}

}  // namespace

ModelConfig model_config_from_json(const ordered_json& j) {
  ModelConfig out;
  check_keys(j, "model",
             {"in_channels", "input_shape", "patch", "embed_dim", "depths",
              "heads", "window", "mlp_ratio", "encoder", "dvf_channels"});
  if (auto it = j.find("in_channels"); it != j.end())
    out.in_channels = as_int(*it, "model.in_channels");
  if (auto it = j.find("input_shape"); it != j.end())
    out.input_shape = as_grid(*it, "model.input_shape");
  if (auto it = j.find("patch"); it != j.end())
    out.patch = as_grid(*it, "model.patch");
  if (auto it = j.find("embed_dim"); it != j.end())
    out.embed_dim = as_int(*it, "model.embed_dim");
  if (auto it = j.find("depths"); it != j.end())
    out.depths = as_int_list(*it, "model.depths");
  if (auto it = j.find("heads"); it != j.end())
    out.heads = as_int_list(*it, "model.heads");
  if (auto it = j.find("window"); it != j.end())
    out.window = as_grid(*it, "model.window");
  if (auto it = j.find("mlp_ratio"); it != j.end())
    out.mlp_ratio = as_double(*it, "model.mlp_ratio");
  if (auto it = j.find("encoder"); it != j.end())
    out.encoder_kind = encoder_from_name(as_string(*it, "model.encoder"));
  if (auto it = j.find("dvf_channels"); it != j.end())
    out.dvf_channels = as_int(*it, "model.dvf_channels");
  return out;
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& m) {
  return ordered_json{{"in_channels", m.in_channels},
                      {"input_shape", grid_json(m.input_shape)},
                      {"patch", grid_json(m.patch)},
                      {"embed_dim", m.embed_dim},
                      {"depths", m.depths},
                      {"heads", m.heads},
                      {"window", grid_json(m.window)},
                      {"mlp_ratio", m.mlp_ratio},
                      {"encoder", encoder_name(m.encoder_kind)},
                      {"dvf_channels", m.dvf_channels}};
}

namespace {

void parse_loss(const ordered_json& j, LossWeights& out) {
  check_keys(j, "train.loss", {"w_image", "w_gtvp", "w_gtvn", "lambda"});
  if (auto it = j.find("w_image"); it != j.end())
    out.w_image = as_double(*it, "train.loss.w_image");
  if (auto it = j.find("w_gtvp"); it != j.end())
    out.w_gtvp = as_double(*it, "train.loss.w_gtvp");
  if (auto it = j.find("w_gtvn"); it != j.end())
    out.w_gtvn = as_double(*it, "train.loss.w_gtvn");
  if (auto it = j.find("lambda"); it != j.end())
    out.lambda = as_double(*it, "train.loss.lambda");
}

void parse_augment(const ordered_json& j, AugmentSpec& out) {
  check_keys(j, "train.augment",
             {"flip_x", "max_shift_voxels", "max_rotation_deg", "noise_sigma",
              "probability"});
  if (auto it = j.find("flip_x"); it != j.end())
    out.flip_x = as_bool(*it, "train.augment.flip_x");
  if (auto it = j.find("max_shift_voxels"); it != j.end())
    out.max_shift_voxels = as_int(*it, "train.augment.max_shift_voxels");
  if (auto it = j.find("max_rotation_deg"); it != j.end())
    out.max_rotation_deg = as_double(*it, "train.augment.max_rotation_deg");
  if (auto it = j.find("noise_sigma"); it != j.end())
    out.noise_sigma = as_double(*it, "train.augment.noise_sigma");
  if (auto it = j.find("probability"); it != j.end())
    out.probability = as_double(*it, "train.augment.probability");
}

void parse_train(const ordered_json& j, TrainConfig& out) {
  check_keys(j, "train",
             {"epochs", "batch_size", "lr0", "adam_beta1", "adam_beta2",
              "adam_eps", "plateau_factor", "plateau_patience",
              "plateau_threshold", "min_lr", "seed", "deterministic", "loss",
              "augment"});
  if (auto it = j.find("epochs"); it != j.end())
    out.epochs = as_int(*it, "train.epochs");
  if (auto it = j.find("batch_size"); it != j.end())
    out.batch_size = as_int(*it, "train.batch_size");
  if (auto it = j.find("lr0"); it != j.end())
    out.lr0 = as_double(*it, "train.lr0");
  if (auto it = j.find("adam_beta1"); it != j.end())
    out.adam_beta1 = as_double(*it, "train.adam_beta1");
  if (auto it = j.find("adam_beta2"); it != j.end())
    out.adam_beta2 = as_double(*it, "train.adam_beta2");
  if (auto it = j.find("adam_eps"); it != j.end())
    out.adam_eps = as_double(*it, "train.adam_eps");
  if (auto it = j.find("plateau_factor"); it != j.end())
    out.plateau_factor = as_double(*it, "train.plateau_factor");
  if (auto it = j.find("plateau_patience"); it != j.end())
    out.plateau_patience = as_int(*it, "train.plateau_patience");
  if (auto it = j.find("plateau_threshold"); it != j.end())
    out.plateau_threshold = as_double(*it, "train.plateau_threshold");
  if (auto it = j.find("min_lr"); it != j.end())
    out.min_lr = as_double(*it, "train.min_lr");
  if (auto it = j.find("seed"); it != j.end())
    out.seed = as_u64(*it, "train.seed");
  if (auto it = j.find("deterministic"); it != j.end())
    out.deterministic = as_bool(*it, "train.deterministic");
  if (auto it = j.find("loss"); it != j.end()) parse_loss(*it, out.loss);
  if (auto it = j.find("augment"); it != j.end())
    parse_augment(*it, out.augment);
}

void parse_inputs(const ordered_json& j, InputSelection& out) {
  check_keys(j, "inputs", {"use_ct", "use_dose", "use_gtv_masks", "baseline"});
  if (auto it = j.find("use_ct"); it != j.end())
    out.use_ct = as_bool(*it, "inputs.use_ct");
  if (auto it = j.find("use_dose"); it != j.end())
    out.use_dose = as_bool(*it, "inputs.use_dose");
  if (auto it = j.find("use_gtv_masks"); it != j.end())
    out.use_gtv_masks = as_bool(*it, "inputs.use_gtv_masks");
  if (auto it = j.find("baseline"); it != j.end()) {
    std::string s = as_string(*it, "inputs.baseline");
    if (s == "cbct01")
      out.baseline = BaselineKind::CBCT01;
    else if (s == "ct")
      out.baseline = BaselineKind::CT;
    else
      fail("inputs.baseline must be \"cbct01\" or \"ct\", got \"" + s + "\"");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
    throw ConfigError("train.plateau_factor must lie in (0, 1)");
  if (!(lr0 > 0.0)) throw ConfigError("train.lr0 must be > 0");
  if (min_lr < 0.0) throw ConfigError("train.min_lr must be >= 0");
  if (plateau_patience < 0)
    throw ConfigError("train.plateau_patience must be >= 0");
}

RunConfig run_config_from_json(const ordered_json& j) {
  RunConfig c;
  check_keys(j, "<root>", {"phantom", "data", "model", "train", "inputs"});
  if (auto it = j.find("phantom"); it != j.end())
    parse_phantom(*it, c.phantom);
  if (auto it = j.find("data"); it != j.end()) parse_data(*it, c.data);
  if (auto it = j.find("model"); it != j.end())
    c.model = model_config_from_json(*it);
  if (auto it = j.find("train"); it != j.end()) parse_train(*it, c.train);
  if (auto it = j.find("inputs"); it != j.end()) parse_inputs(*it, c.inputs);
  return c;
}

nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  ordered_json j;
  j["phantom"] = {{"shape", grid_json(c.phantom.base.shape)},
                  {"spacing_mm", vec3_json(c.phantom.base.spacing_mm)},
                  {"body_semiaxes_mm", vec3_json(c.phantom.base.body_semiaxes_mm)},
                  {"gtvp_radius_mm", range_json(c.phantom.gtvp_radius_mm)},
                  {"gtvn_radius_mm", range_json(c.phantom.gtvn_radius_mm)},
                  {"shrink_factor", range_json(c.phantom.shrink_factor)},
                  {"body_shrink_mm", range_json(c.phantom.body_shrink_mm)},
                  {"noise_sigma_image", c.phantom.base.noise_sigma_image},
                  {"dose_peak", c.phantom.base.dose_peak}};
  j["data"] = {{"n_cases", c.data.n_cases},
               {"val_fraction", c.data.val_fraction},
               {"test_fraction", c.data.test_fraction}};
  j["model"] = model_config_to_json(c.model);
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr0", c.train.lr0},
                {"adam_beta1", c.train.adam_beta1},
                {"adam_beta2", c.train.adam_beta2},
                {"adam_eps", c.train.adam_eps},
                {"plateau_factor", c.train.plateau_factor},
                {"plateau_patience", c.train.plateau_patience},
                {"plateau_threshold", c.train.plateau_threshold},
                {"min_lr", c.train.min_lr},
                {"seed", c.train.seed},
                {"deterministic", c.train.deterministic},
                {"loss",
                 {{"w_image", c.train.loss.w_image},
                  {"w_gtvp", c.train.loss.w_gtvp},
                  {"w_gtvn", c.train.loss.w_gtvn},
                  {"lambda", c.train.loss.lambda}}},
                {"augment",
                 {{"flip_x", c.train.augment.flip_x},
                  {"max_shift_voxels", c.train.augment.max_shift_voxels},
                  {"max_rotation_deg", c.train.augment.max_rotation_deg},
                  {"noise_sigma", c.train.augment.noise_sigma},
                  {"probability", c.train.augment.probability}}}};
  j["inputs"] = {{"use_ct", c.inputs.use_ct},
                 {"use_dose", c.inputs.use_dose},
                 {"use_gtv_masks", c.inputs.use_gtv_masks},
                 {"baseline", c.inputs.baseline == BaselineKind::CT
                                  ? "ct"
                                  : "cbct01"}};
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open config file: " + path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config JSON in " + path.string() + ": " +
                      e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out)
    throw MissingInputError("cannot write config file: " + path.string());
  out << run_config_to_json(c).dump(2) << "\n";
}

}  // namespace anapred
