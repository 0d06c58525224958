#include "mpbm/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace mpbm {

namespace {

uint64_t to_u64(const nlohmann::json& v) { return v.get<uint64_t>(); }

}  // namespace

RunConfig parse_config(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "lambda_adv",     "lambda_mix",    "N_b",           "T_sgld",
      "sgld_eta",       "outer_iters",   "generator_iters", "finetune_iters",
      "queries_per_outer", "batch_size", "epochs",        "lr",
      "lr_decay_factor", "gen_lr",       "disc_lr",       "seed",
      "label_softmax",  "arch",          "feature_dim",   "hidden",
      "manifest",       "out_dir",       "variant",       "pretrain_checkpoint",
      "eval_every",     "checkpoint_every"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw std::runtime_error("config: unknown field '" + key + "'");

  RunConfig c;
  if (!j.contains("manifest"))
    throw std::runtime_error("config: missing required field 'manifest'");
  c.manifest = j.at("manifest").get<std::string>();
  if (j.contains("lambda_adv")) c.lambda_adv = j.at("lambda_adv").get<double>();
  if (j.contains("lambda_mix")) c.lambda_mix = j.at("lambda_mix").get<double>();
  if (j.contains("N_b")) c.n_b = j.at("N_b").get<size_t>();
  if (j.contains("T_sgld")) c.t_sgld = j.at("T_sgld").get<int>();
  if (j.contains("sgld_eta")) c.sgld_eta = j.at("sgld_eta").get<double>();
  if (j.contains("outer_iters")) c.outer_iters = j.at("outer_iters").get<int>();
  if (j.contains("generator_iters")) c.generator_iters = j.at("generator_iters").get<int>();
  if (j.contains("finetune_iters")) c.finetune_iters = j.at("finetune_iters").get<int>();
  if (j.contains("queries_per_outer"))
    c.queries_per_outer = j.at("queries_per_outer").get<size_t>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<size_t>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("lr_decay_factor")) c.lr_decay_factor = j.at("lr_decay_factor").get<double>();
  if (j.contains("gen_lr")) c.gen_lr = j.at("gen_lr").get<double>();
  if (j.contains("disc_lr")) c.disc_lr = j.at("disc_lr").get<double>();
  if (j.contains("seed")) c.seed = to_u64(j.at("seed"));
  if (j.contains("label_softmax")) c.label_softmax = j.at("label_softmax").get<bool>();
  if (j.contains("arch")) c.arch = j.at("arch").get<std::string>();
  if (j.contains("feature_dim")) c.feature_dim = j.at("feature_dim").get<size_t>();
  if (j.contains("hidden")) c.hidden = j.at("hidden").get<size_t>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("variant")) c.variant = j.at("variant").get<std::string>();
  if (j.contains("pretrain_checkpoint"))
    c.pretrain_checkpoint = j.at("pretrain_checkpoint").get<std::string>();
  if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<int>();
  if (j.contains("checkpoint_every")) c.checkpoint_every = j.at("checkpoint_every").get<int>();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw std::runtime_error("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

void apply_override(RunConfig& c, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw std::runtime_error("override '" + kv + "' is not of the form key=value");
  std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
  auto as_double = [&] { return std::stod(val); };
  auto as_int = [&] { return std::stoi(val); };
  auto as_size = [&] { return static_cast<size_t>(std::stoull(val)); };
  try {
    if (key == "lambda_adv") c.lambda_adv = as_double();
    else if (key == "lambda_mix") c.lambda_mix = as_double();
    else if (key == "N_b") c.n_b = as_size();
    else if (key == "T_sgld" || key == "T") c.t_sgld = as_int();
    else if (key == "sgld_eta") c.sgld_eta = as_double();
    else if (key == "outer_iters") c.outer_iters = as_int();
    else if (key == "generator_iters") c.generator_iters = as_int();
    else if (key == "finetune_iters") c.finetune_iters = as_int();
    else if (key == "queries_per_outer") c.queries_per_outer = as_size();
    else if (key == "batch_size") c.batch_size = as_size();
    else if (key == "epochs") c.epochs = as_int();
    else if (key == "lr") c.lr = as_double();
    else if (key == "lr_decay_factor") c.lr_decay_factor = as_double();
    else if (key == "gen_lr") c.gen_lr = as_double();
    else if (key == "disc_lr") c.disc_lr = as_double();
    else if (key == "seed") c.seed = std::stoull(val);
    else if (key == "label_softmax") c.label_softmax = (val == "true" || val == "on" || val == "1");
    else if (key == "arch") c.arch = val;
    else if (key == "feature_dim") c.feature_dim = as_size();
    else if (key == "hidden") c.hidden = as_size();
    else if (key == "manifest") c.manifest = val;
    else if (key == "out_dir") c.out_dir = val;
    else if (key == "variant") c.variant = val;
    else if (key == "pretrain_checkpoint") c.pretrain_checkpoint = val;
    else if (key == "eval_every") c.eval_every = as_int();
    else if (key == "checkpoint_every") c.checkpoint_every = as_int();
    else throw std::runtime_error("override: unknown config field '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw std::runtime_error("override: cannot parse value '" + val + "' for '" + key + "'");
  }
}

void resolve_config(RunConfig& c) {
  static const std::set<std::string> variants = {"full",       "no_mix_tr", "no_adv",
                                                 "no_mix_gen", "no_sgld",   "erm"};
  if (!variants.count(c.variant))
    throw std::runtime_error("config: unknown variant '" + c.variant + "'");
  if (c.variant == "no_adv") c.lambda_adv = 0.0;
  if (c.variant == "no_mix_tr" || c.variant == "erm") c.lambda_mix = 0.0;
  if (c.outer_iters < 0) c.outer_iters = c.epochs;
  if (c.lambda_adv < 0.0 || c.lambda_mix < 0.0)
    throw std::runtime_error("config: lambdas must be >= 0");
  if (c.n_b < 1) throw std::runtime_error("config: N_b must be >= 1");
  if (c.t_sgld < 1) throw std::runtime_error("config: T_sgld must be >= 1");
  if (c.sgld_eta <= 0.0) throw std::runtime_error("config: sgld_eta must be > 0");
  if (c.batch_size < 1) throw std::runtime_error("config: batch_size must be >= 1");
  if (c.epochs < 0) throw std::runtime_error("config: epochs must be >= 0");
  if (c.generator_iters < 0) throw std::runtime_error("config: generator_iters must be >= 0");
  if (c.finetune_iters < 0) throw std::runtime_error("config: finetune_iters must be >= 0");
  if (c.queries_per_outer < 1)
    throw std::runtime_error("config: queries_per_outer must be >= 1");
  if (c.lr <= 0.0 || c.gen_lr <= 0.0 || c.disc_lr <= 0.0)
    throw std::runtime_error("config: learning rates must be > 0");
  if (c.eval_every < 1) throw std::runtime_error("config: eval_every must be >= 1");
  if (c.manifest.empty()) throw std::runtime_error("config: missing required field 'manifest'");
}

nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["manifest"] = c.manifest;
  j["arch"] = c.arch;
  j["feature_dim"] = c.feature_dim;
  j["hidden"] = c.hidden;
  j["variant"] = c.variant;
  j["seed"] = c.seed;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["gen_lr"] = c.gen_lr;
  j["disc_lr"] = c.disc_lr;
  j["lambda_adv"] = c.lambda_adv;
  j["lambda_mix"] = c.lambda_mix;
  j["N_b"] = c.n_b;
  j["T_sgld"] = c.t_sgld;
  j["sgld_eta"] = c.sgld_eta;
  j["outer_iters"] = c.outer_iters;
  j["generator_iters"] = c.generator_iters;
  j["finetune_iters"] = c.finetune_iters;
  j["queries_per_outer"] = c.queries_per_outer;
  j["label_softmax"] = c.label_softmax;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  j["pretrain_checkpoint"] = c.pretrain_checkpoint;
  j["out_dir"] = c.out_dir;
  return j;
}

}  // namespace mpbm
