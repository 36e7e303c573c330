#include "ttrd3/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ttrd3 {

using nlohmann::json;

ExperimentConfig paper_config() {
  ExperimentConfig c;
  c.denoiser.base_channels = 64;
  c.denoiser.channel_multipliers = {1, 2, 4, 8};
  c.denoiser.time_embedding_dim = 256;
  c.mfam.widths = {64, 128, 256};
  c.denoiser.guidance_channels = c.mfam.widths;
  c.optim = OptimConfig{};
  c.data.patch_size = 256;
  return c;
}

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.denoiser.base_channels = 16;
  c.denoiser.channel_multipliers = {1, 2, 2, 4};
  c.denoiser.time_embedding_dim = 32;
  c.mfam.widths = {16, 32, 64};
  c.denoiser.guidance_channels = c.mfam.widths;
  c.optim.iterations = 2000;
  c.optim.batch_size = 2;
  c.data.patch_size = 64;
  return c;
}

ExperimentConfig toy_config() {
  ExperimentConfig c = desk_config();
  c.mfam.widths = {8, 8, 8};
  c.mfam.block_counts = {1, 1, 1};
  c.mfam.cbam_reduction = 4;
  c.denoiser.guidance_channels = c.mfam.widths;
  c.sttg.geometry.stride = 2;
  c.optim.lr = 1e-3;
  // Residual errors are ~100x smaller than noise errors on the toy scenes,
  // so the inner reweight keeps the residual head from being starved.
  c.loss.lambda_res = 50.0;
  c.optim.iterations = 2000;
  c.optim.batch_size = 2;
  c.data.patch_size = 0;
  c.train.log_every = 100;
  return c;
}

namespace {

json int_array(const auto& v) {
  json a = json::array();
  for (int x : v) a.push_back(x);
  return a;
}

template <std::size_t N>
std::array<int, N> to_int_array(const json& j, const char* what) {
  if (j.size() != N) throw std::invalid_argument(std::string(what) + " must have " + std::to_string(N) + " entries");
  std::array<int, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = j.at(i).get<int>();
  return out;
}

// Every key of `given` must exist in `schema` with a compatible type.
void check_keys(const json& given, const json& schema, const std::string& path) {
  if (!given.is_object()) throw std::invalid_argument("config section '" + path + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw std::invalid_argument("unknown config key '" + full + "'");
    const json& ref = schema.at(key);
    if (ref.is_object()) {
      check_keys(value, ref, full);
      continue;
    }
    const bool ok = (ref.is_number() && value.is_number()) || (ref.is_string() && value.is_string()) ||
                    (ref.is_boolean() && value.is_boolean()) || (ref.is_array() && value.is_array());
    if (!ok) throw std::invalid_argument("config key '" + full + "' has the wrong type");
  }
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["schedule"] = {{"T", c.T}, {"beta_bar_T", c.beta_bar_T}, {"shape", to_string(c.schedule_shape)}};
  j["sampler"] = {{"steps", c.sample_steps}, {"eta", c.eta}};
  j["model"] = {
      {"variant", to_string(c.denoiser.variant)},
      {"image_channels", c.denoiser.image_channels},
      {"base_channels", c.denoiser.base_channels},
      {"channel_multipliers", int_array(c.denoiser.channel_multipliers)},
      {"time_embedding_dim", c.denoiser.time_embedding_dim},
      {"mfam_widths", int_array(c.mfam.widths)},
      {"mfab_counts", int_array(c.mfam.block_counts)},
      {"cbam_reduction", c.mfam.cbam_reduction},
      {"sam_kernel", c.mfam.sam_kernel},
      {"k_max", c.sttg.k_max},
      {"patch", c.sttg.geometry.patch},
      {"patch_stride", c.sttg.geometry.stride},
      {"temperature", c.sttg.temperature},
      {"topk", c.sttg.topk_enabled},
      {"fixed_k", c.sttg.fixed_k},
      {"ref_ratio", c.sttg.ref_ratio},
  };
  j["loss"] = {{"lambda1", c.loss.lambda1},       {"lambda2", c.loss.lambda2},
               {"lambda3", c.loss.lambda3},       {"lambda_res", c.loss.lambda_res},
               {"lambda_eps", c.loss.lambda_eps}, {"perceptual", c.perceptual}};
  j["optim"] = {{"lr", c.optim.lr},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"grad_clip", c.optim.grad_clip},
                {"iterations", c.optim.iterations},
                {"batch_size", c.optim.batch_size}};
  j["data"] = {{"manifest", c.data.manifest},
               {"sr_factor", c.data.sr_factor},
               {"pairing", c.data.pairing},
               {"patch_size", c.data.patch_size}};
  j["train"] = {{"log_every", c.train.log_every},
                {"val_every", c.train.val_every},
                {"checkpoint_every", c.train.checkpoint_every}};
  return j;
}

ExperimentConfig config_from_json(const json& given, const ExperimentConfig& base) {
  json j = to_json(base);
  check_keys(given, j, "");
  j.merge_patch(given);
  ExperimentConfig c;
  try {
    c.seed = j["seed"].get<std::uint64_t>();
    c.out_dir = j["out_dir"].get<std::string>();
    const json& s = j["schedule"];
    c.T = s["T"].get<int>();
    c.beta_bar_T = s["beta_bar_T"].get<double>();
    c.schedule_shape = parse_schedule_shape(s["shape"].get<std::string>());
    c.sample_steps = j["sampler"]["steps"].get<int>();
    c.eta = j["sampler"]["eta"].get<double>();
    const json& m = j["model"];
    c.denoiser.variant = parse_variant(m["variant"].get<std::string>());
    c.denoiser.image_channels = m["image_channels"].get<int>();
    c.denoiser.base_channels = m["base_channels"].get<int>();
    c.denoiser.channel_multipliers = m["channel_multipliers"].get<std::vector<int>>();
    c.denoiser.time_embedding_dim = m["time_embedding_dim"].get<int>();
    c.mfam.image_channels = c.denoiser.image_channels;
    c.mfam.widths = to_int_array<3>(m["mfam_widths"], "model.mfam_widths");
    c.mfam.block_counts = to_int_array<3>(m["mfab_counts"], "model.mfab_counts");
    c.mfam.cbam_reduction = m["cbam_reduction"].get<int>();
    c.mfam.sam_kernel = m["sam_kernel"].get<int>();
    c.denoiser.guidance_channels = c.mfam.widths;
    c.sttg.k_max = m["k_max"].get<int>();
    c.sttg.geometry.patch = m["patch"].get<int>();
    c.sttg.geometry.stride = m["patch_stride"].get<int>();
    c.sttg.temperature = m["temperature"].get<double>();
    c.sttg.topk_enabled = m["topk"].get<bool>();
    c.sttg.fixed_k = m["fixed_k"].get<int>();
    c.sttg.ref_ratio = m["ref_ratio"].get<int>();
    const json& l = j["loss"];
    c.loss.lambda1 = l["lambda1"].get<double>();
    c.loss.lambda2 = l["lambda2"].get<double>();
    c.loss.lambda3 = l["lambda3"].get<double>();
    c.loss.lambda_res = l["lambda_res"].get<double>();
    c.loss.lambda_eps = l["lambda_eps"].get<double>();
    c.perceptual = l["perceptual"].get<std::string>();
    const json& o = j["optim"];
    c.optim.lr = o["lr"].get<double>();
    c.optim.beta1 = o["beta1"].get<double>();
    c.optim.beta2 = o["beta2"].get<double>();
    c.optim.eps = o["eps"].get<double>();
    c.optim.grad_clip = o["grad_clip"].get<double>();
    c.optim.iterations = o["iterations"].get<int>();
    c.optim.batch_size = o["batch_size"].get<int>();
    const json& d = j["data"];
    c.data.manifest = d["manifest"].get<std::string>();
    c.data.sr_factor = d["sr_factor"].get<int>();
    c.data.pairing = d["pairing"].get<std::string>();
    c.data.patch_size = d["patch_size"].get<int>();
    const json& t = j["train"];
    c.train.log_every = t["log_every"].get<int>();
    c.train.val_every = t["val_every"].get<int>();
    c.train.checkpoint_every = t["checkpoint_every"].get<int>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed config: ") + e.what());
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path, const ExperimentConfig& base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path);
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return config_from_json(j, base);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key.path=value");
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) *node = json::object();
    node = &(*node)[parts[i]];
  }
  if (!node->is_object()) *node = json::object();
  (*node)[parts.back()] = value;
}

void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("invalid config: " + msg);
  };
  need(c.T >= 1, "schedule.T must be >= 1");
  need(c.beta_bar_T > 0.0, "schedule.beta_bar_T must be > 0");
  need(c.sample_steps >= 2 && c.sample_steps <= c.T, "sampler.steps must lie in [2, T]");
  need(c.eta >= 0.0 && c.eta <= 1.0, "sampler.eta must lie in [0, 1]");
  need(c.denoiser.image_channels >= 1, "model.image_channels must be >= 1");
  need(c.denoiser.base_channels >= 1, "model.base_channels must be >= 1");
  for (int m : c.denoiser.channel_multipliers) need(m >= 1, "model.channel_multipliers must be positive");
  need(c.denoiser.channel_multipliers.size() >= 3, "model.channel_multipliers needs >= 3 levels for guidance");
  need(c.denoiser.time_embedding_dim >= 2 && c.denoiser.time_embedding_dim % 2 == 0,
       "model.time_embedding_dim must be even");
  for (int s = 0; s < 3; ++s) {
    need(c.mfam.widths[s] >= 1, "model.mfam_widths must be positive");
    need(c.mfam.block_counts[s] >= 0, "model.mfab_counts must be non-negative");
  }
  need(c.mfam.cbam_reduction >= 1, "model.cbam_reduction must be >= 1");
  need(c.mfam.sam_kernel >= 1 && c.mfam.sam_kernel % 2 == 1, "model.sam_kernel must be odd");
  need(c.sttg.k_max >= 1, "model.k_max must be >= 1");
  need(c.sttg.geometry.patch >= 1, "model.patch must be >= 1");
  need(c.sttg.geometry.stride >= 1 && c.sttg.geometry.stride <= c.sttg.geometry.patch,
       "model.patch_stride must lie in [1, patch]");
  need(c.sttg.temperature > 0.0, "model.temperature must be > 0");
  need(c.sttg.fixed_k >= 0 && c.sttg.fixed_k <= c.sttg.k_max, "model.fixed_k must lie in [0, k_max]");
  need(c.sttg.ref_ratio >= 1, "model.ref_ratio must be >= 1");
  need(c.loss.lambda1 >= 0 && c.loss.lambda2 >= 0 && c.loss.lambda3 >= 0 && c.loss.lambda_res >= 0 &&
           c.loss.lambda_eps >= 0,
       "loss weights must be non-negative");
  need(c.perceptual == "convstack" || c.perceptual == "identity", "loss.perceptual must be convstack or identity");
  need(c.optim.lr > 0.0, "optim.lr must be > 0");
  need(c.optim.beta1 >= 0.0 && c.optim.beta1 < 1.0 && c.optim.beta2 >= 0.0 && c.optim.beta2 < 1.0,
       "optim betas must lie in [0, 1)");
  need(c.optim.eps > 0.0, "optim.eps must be > 0");
  need(c.optim.grad_clip >= 0.0, "optim.grad_clip must be >= 0");
  need(c.optim.iterations >= 0, "optim.iterations must be >= 0");
  need(c.optim.batch_size >= 1, "optim.batch_size must be >= 1");
  need(c.data.sr_factor >= 1, "data.sr_factor must be >= 1");
  need(c.data.patch_size >= 0, "data.patch_size must be >= 0");
  need(c.data.pairing == "same-category" || c.data.pairing == "random" || c.data.pairing == "noise",
       "data.pairing must be same-category, random or noise");
  need(c.train.log_every >= 1, "train.log_every must be >= 1");
  need(c.train.val_every >= 0 && c.train.checkpoint_every >= 0, "train cadences must be >= 0");
}

std::string config_hash(const ExperimentConfig& cfg) {
  const json j = to_json(cfg);
  const std::string canon = json{{"schedule", j["schedule"]}, {"model", j["model"]}}.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ttrd3
