#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mpbm/checkpoint.hpp"
#include "mpbm/config.hpp"
#include "mpbm/data.hpp"
#include "mpbm/trainer.hpp"

namespace fs = std::filesystem;
using namespace mpbm;

namespace {

constexpr int kExitConfigError = 2;
constexpr int kExitTrainingAbort = 3;

// shortest round-trip representation, shared with the JSON outputs
std::string num(double v) { return nlohmann::json(v).dump(); }

std::string out_root() {
  const char* env = std::getenv("MPBM_OUT_DIR");
  return env != nullptr && *env != '\0' ? std::string(env) : std::string("runs");
}

std::string config_stem(const std::string& path) { return fs::path(path).stem().string(); }

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << text;
}

struct RunResult {
  std::vector<std::pair<std::string, double>> eval;  // source first, then targets
  double pretrain_accuracy = 0.0;
  size_t store_size = 0;
};

// one full training run into cfg.out_dir; writes resolved_config.json,
// metrics.jsonl, checkpoints, and summary.json
RunResult run_one(RunConfig cfg, bool verbose) {
  DomainSet data = load_manifest(cfg.manifest);
  if (!cfg.out_dir.empty()) {
    nlohmann::ordered_json rc = config_to_json(cfg);
    rc["manifest_sha256"] = sha256_file(cfg.manifest);
    write_text(cfg.out_dir + "/resolved_config.json", rc.dump(2) + "\n");
  }
  Trainer trainer(cfg, data);
  if (verbose) {
    trainer.on_epoch = [](int epoch, double loss) {
      std::cout << "pretrain epoch " << epoch << "  loss " << num(loss) << "\n" << std::flush;
    };
    trainer.on_iter = [](const IterRecord& r) {
      std::cout << "iter " << r.iter << "  L_sup " << num(r.l_sup) << "  L_mix_gen "
                << num(r.l_mix_gen) << "  L_adv " << num(r.l_adv) << "  L_mix_tr "
                << num(r.l_mix_tr) << "  store " << r.store_size;
      for (const auto& [name, acc] : r.eval) std::cout << "  " << name << " " << num(acc);
      std::cout << "\n" << std::flush;
    };
  }
  const RunMetrics& metrics = trainer.run();

  RunResult res;
  res.pretrain_accuracy = metrics.pretrain_accuracy;
  res.store_size = trainer.store().size();
  for (auto it = metrics.iters.rbegin(); it != metrics.iters.rend(); ++it) {
    if (!it->eval.empty()) {
      res.eval = it->eval;
      break;
    }
  }
  if (res.eval.empty()) {
    res.eval.emplace_back(data.source.name, trainer.evaluate(data.source));
    for (const Dataset& tgt : data.targets) res.eval.emplace_back(tgt.name, trainer.evaluate(tgt));
  }
  if (!cfg.out_dir.empty()) {
    nlohmann::ordered_json s;
    s["pretrain_accuracy"] = metrics.pretrain_accuracy;
    s["pretrain_loss"] = metrics.pretrain_loss;
    s["outer_iters"] = metrics.iters.size();
    s["store_size"] = res.store_size;
    nlohmann::ordered_json e;
    for (const auto& [name, acc] : res.eval) e[name] = acc;
    s["final_eval"] = e;
    write_text(cfg.out_dir + "/summary.json", s.dump(2) + "\n");
  }
  return res;
}

double mean_target_accuracy(const RunResult& r) {
  if (r.eval.size() <= 1) return r.eval.empty() ? 0.0 : r.eval.front().second;
  double sum = 0.0;
  for (size_t i = 1; i < r.eval.size(); ++i) sum += r.eval[i].second;
  return sum / static_cast<double>(r.eval.size() - 1);
}

// pretraining-only run shared by every variant of an ablation/sweep seed
std::string shared_pretrain(RunConfig base, uint64_t seed, const std::string& dir, bool verbose) {
  base.seed = seed;
  base.variant = "erm";
  base.outer_iters = 0;
  base.pretrain_checkpoint.clear();
  base.out_dir = dir;
  resolve_config(base);
  run_one(base, verbose);
  return dir + "/pretrain.ckpt";
}

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

RunConfig build_config(const CommonArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.seed_set) cfg.seed = a.seed;
  for (const std::string& kv : a.overrides) apply_override(cfg, kv);
  resolve_config(cfg);
  return cfg;
}

int cmd_train(const CommonArgs& a) {
  RunConfig cfg;
  try {
    cfg = build_config(a);
    if (!a.out.empty())
      cfg.out_dir = a.out;
    else if (cfg.out_dir.empty())
      cfg.out_dir = out_root() + "/" + config_stem(a.config) + "-" + cfg.variant + "-seed" +
                    std::to_string(cfg.seed);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  }
  std::cout << "writing to " << cfg.out_dir << "\n";
  RunResult res = run_one(std::move(cfg), true);
  std::cout << "pretrain accuracy " << num(res.pretrain_accuracy) << "\n";
  for (const auto& [name, acc] : res.eval)
    std::cout << "final " << name << " accuracy " << num(acc) << "\n";
  return 0;
}

int cmd_eval(const std::vector<std::string>& checkpoints, const std::string& manifest,
             const std::string& out_csv) {
  DomainSet data = load_manifest(manifest);
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> per_domain;
  std::string csv = "domain,seed,accuracy\n";
  for (const std::string& path : checkpoints) {
    auto [meta, params] = load_checkpoint(path);
    if (meta.kind != "model")
      throw std::runtime_error("eval: '" + path + "' holds a " + meta.kind +
                               " checkpoint, not a model");
    RunConfig cfg;
    cfg.manifest = manifest;
    cfg.arch = meta.spec.arch;
    cfg.feature_dim = meta.spec.feature_dim;
    cfg.hidden = meta.spec.hidden;
    cfg.seed = meta.seed;
    Trainer trainer(cfg, data);
    trainer.load_model(path);
    auto record = [&](const Dataset& d) {
      double acc = trainer.evaluate(d);
      if (per_domain.find(d.name) == per_domain.end()) order.push_back(d.name);
      per_domain[d.name].push_back(acc);
      csv += d.name + "," + std::to_string(meta.seed) + "," + num(acc) + "\n";
    };
    record(data.source);
    for (const Dataset& tgt : data.targets) record(tgt);
  }
  for (const std::string& name : order) {
    const std::vector<double>& v = per_domain[name];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    double sd = std::sqrt(var / static_cast<double>(v.size()));
    csv += name + ",mean," + num(mean) + "\n";
    csv += name + ",std," + num(sd) + "\n";
  }
  if (out_csv.empty())
    std::cout << csv;
  else
    write_text(out_csv, csv);
  return 0;
}

int cmd_ablate(const CommonArgs& a, const std::vector<uint64_t>& seeds_arg) {
  RunConfig base = build_config(a);
  std::vector<uint64_t> seeds = seeds_arg.empty() ? std::vector<uint64_t>{base.seed} : seeds_arg;
  std::string root =
      !a.out.empty() ? a.out : out_root() + "/" + config_stem(a.config) + "-ablate";
  const std::vector<std::string> variants = {"full", "no_mix_tr", "no_adv", "no_mix_gen",
                                             "no_sgld"};
  std::string csv = "variant,seed,domain,accuracy\n";
  std::map<std::string, std::vector<double>> target_acc;
  for (uint64_t seed : seeds) {
    std::string sdir = root + "/s" + std::to_string(seed);
    std::string ckpt = shared_pretrain(base, seed, sdir + "/pretrain", false);
    for (const std::string& variant : variants) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.variant = variant;
      cfg.pretrain_checkpoint = ckpt;
      cfg.out_dir = sdir + "/" + variant;
      resolve_config(cfg);
      std::cout << "ablate " << variant << " seed " << seed << "\n" << std::flush;
      RunResult res = run_one(std::move(cfg), false);
      for (const auto& [name, acc] : res.eval)
        csv += variant + "," + std::to_string(seed) + "," + name + "," + num(acc) + "\n";
      target_acc[variant].push_back(mean_target_accuracy(res));
    }
  }
  for (const std::string& variant : variants) {
    double mean = 0.0;
    for (double x : target_acc[variant]) mean += x;
    mean /= static_cast<double>(target_acc[variant].size());
    csv += variant + ",mean,targets," + num(mean) + "\n";
    std::cout << variant << " mean target accuracy " << num(mean) << "\n";
  }
  write_text(root + "/ablate.csv", csv);
  std::cout << "wrote " << root << "/ablate.csv\n";
  return 0;
}

int cmd_sweep(const CommonArgs& a, const std::string& param,
              const std::vector<std::string>& values, const std::vector<uint64_t>& seeds_arg) {
  if (param != "lambda_adv" && param != "lambda_mix" && param != "T" && param != "N_b")
    throw std::runtime_error("sweep: unknown parameter '" + param +
                             "' (expected lambda_adv, lambda_mix, T, or N_b)");
  RunConfig base = build_config(a);
  std::vector<uint64_t> seeds = seeds_arg.empty() ? std::vector<uint64_t>{base.seed} : seeds_arg;
  std::string root =
      !a.out.empty() ? a.out : out_root() + "/" + config_stem(a.config) + "-sweep-" + param;
  std::string csv = "param,value,seed,accuracy\n";
  for (uint64_t seed : seeds) {
    std::string sdir = root + "/s" + std::to_string(seed);
    for (const std::string& value : values) {
      // full independent runs: a one-value sweep is exactly the plain run
      RunConfig cfg = base;
      cfg.seed = seed;
      apply_override(cfg, param + "=" + value);
      cfg.out_dir = sdir + "/" + param + "-" + value;
      resolve_config(cfg);
      std::cout << "sweep " << param << "=" << value << " seed " << seed << "\n" << std::flush;
      RunResult res = run_one(std::move(cfg), false);
      csv += param + "," + value + "," + std::to_string(seed) + "," +
             num(mean_target_accuracy(res)) + "\n";
    }
  }
  write_text(root + "/sweep.csv", csv);
  std::cout << "wrote " << root << "/sweep.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"model-aware parametric batch-wise mixup for single domain generalization"};
  app.require_subcommand(1);

  CommonArgs args;
  std::vector<uint64_t> seeds;
  std::vector<std::string> checkpoints, values;
  std::string manifest, param, out_csv;

  auto add_common = [&](CLI::App* sub, bool with_seed) {
    sub->add_option("--config", args.config, "JSON run configuration")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--override", args.overrides, "key=value config override (repeatable)");
    sub->add_option("--out", args.out, "output directory (default under $MPBM_OUT_DIR or runs/)");
    if (with_seed) sub->add_option("--seed", args.seed, "override the config seed");
  };

  CLI::App* train = app.add_subcommand("train", "run the full training loop");
  add_common(train, true);

  CLI::App* eval = app.add_subcommand("eval", "evaluate model checkpoints on a manifest");
  eval->add_option("--checkpoint", checkpoints, "model checkpoint (repeatable)")->required();
  eval->add_option("--manifest", manifest, "dataset manifest")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--out", out_csv, "CSV output path (default stdout)");

  CLI::App* ablate =
      app.add_subcommand("ablate", "run the full model and its four ablated variants");
  add_common(ablate, false);
  ablate->add_option("--seeds", seeds, "comma-separated seed list")->delimiter(',');

  CLI::App* sweep = app.add_subcommand("sweep", "sweep one hyper-parameter");
  add_common(sweep, false);
  sweep->add_option("--param", param, "lambda_adv | lambda_mix | T | N_b")->required();
  sweep->add_option("--values", values, "comma-separated value list")
      ->required()
      ->delimiter(',');
  sweep->add_option("--seeds", seeds, "comma-separated seed list")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitConfigError;
  }
  args.seed_set = train->count("--seed") > 0;

  try {
    if (*train) return cmd_train(args);
    if (*eval) return cmd_eval(checkpoints, manifest, out_csv);
    if (*ablate) return cmd_ablate(args, seeds);
    if (*sweep) return cmd_sweep(args, param, values, seeds);
  } catch (const TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitTrainingAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfigError;
  }
  return 0;
}
