#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fedscape/dataset.hpp"
#include "fedscape/harness.hpp"
#include "fedscape/report.hpp"
#include "fedscape/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedscape;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitSweepCellFailed = 1;
constexpr int kExitConfigError = 2;
constexpr int kExitRuntimeError = 3;

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
}

// Applies a dotted-key override, type-checked against the existing value.
void apply_override(json& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
  std::string key = kv.substr(0, eq);
  std::string val = kv.substr(eq + 1);

  std::vector<std::string> path;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) path.push_back(part);
  if (path.empty()) throw ConfigError("empty override key");

  json* node = &cfg;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->is_object() || !node->contains(path[i])) {
      throw ConfigError("unknown config key in override: " + key);
    }
    node = &(*node)[path[i]];
  }
  const std::string& leaf = path.back();
  if (!node->is_object() || !node->contains(leaf)) {
    throw ConfigError("unknown config key in override: " + key);
  }

  json parsed;
  try {
    parsed = json::parse(val);
  } catch (const json::parse_error&) {
    parsed = val;  // bare strings stay strings
  }
  const json& current = (*node)[leaf];
  bool type_ok = (current.is_number() && parsed.is_number()) ||
                 (current.is_boolean() && parsed.is_boolean()) ||
                 (current.is_string() && parsed.is_string()) ||
                 (current.is_array() && parsed.is_array());
  if (!type_ok) {
    throw ConfigError("override type mismatch for key " + key + " (config has " +
                      std::string(current.type_name()) + ")");
  }
  (*node)[leaf] = parsed;
}

ExperimentConfig config_from_cli(const std::string& config_path,
                                 const std::vector<std::string>& overrides,
                                 std::optional<std::uint64_t> run_seed, bool deterministic) {
  json raw = load_json_file(config_path);
  for (const auto& kv : overrides) apply_override(raw, kv);
  if (run_seed.has_value()) {
    if (!raw.contains("seeds")) raw["seeds"] = json::object();
    raw["seeds"]["run"] = *run_seed;
  }
  if (deterministic) raw["deterministic_resources"] = true;
  return ExperimentConfig::from_json(raw);
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::vector<std::string>& overrides, std::optional<std::uint64_t> run_seed,
            bool deterministic) {
  ExperimentConfig cfg =
      config_from_cli(config_path, overrides, run_seed, deterministic);
  RunResult result = run_experiment(cfg);
  emit_report(result, out_dir);
  const AggregateRecord* final_agg = result.aggregates.empty() ? nullptr : &result.aggregates.back();
  std::cout << result.method << ": " << (cfg.mode == "fl" ? cfg.rounds : 2 * cfg.rounds_per_task)
            << " rounds, " << cfg.n_clients << " clients\n";
  if (final_agg != nullptr) {
    std::printf("final [%s] loss=%.6f rmse=%.6f", final_agg->split.c_str(), final_agg->loss,
                final_agg->rmse);
    if (final_agg->pcc.has_value()) std::printf(" pcc=%.6f", *final_agg->pcc);
    std::printf("\n");
  }
  if (result.forgetting_mean.has_value()) {
    std::printf("forgetting delta (mean rmse) = %+.6f\n", *result.forgetting_mean);
  }
  std::cout << "wrote " << (fs::path(out_dir) / "result.json").string() << "\n";
  return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir,
              const std::vector<std::string>& overrides) {
  json raw = load_json_file(config_path);
  json base = raw.contains("base") ? raw.at("base") : raw;
  json grid = raw.contains("grid") ? raw.at("grid") : json::object();
  for (const auto& kv : overrides) apply_override(base, kv);

  auto list_or = [&](const char* key, std::vector<json> fallback) {
    if (!grid.contains(key)) return fallback;
    std::vector<json> out;
    for (const auto& v : grid.at(key)) out.push_back(v);
    return out;
  };
  std::vector<json> strategies = list_or("strategies", {base.value("strategy", "avg")});
  std::vector<json> scopes = list_or("scopes", {base.value("scope", "full")});
  std::vector<json> cl_methods = list_or("cl_methods", {base.value("cl_method", "none")});
  std::vector<json> clients = list_or("clients", {base.value("n_clients", 2)});
  std::vector<json> augments = list_or("augment", {base.value("augment", false)});

  fs::create_directories(out_dir);
  std::string combined = "method,scope,clients,augment,eval_point,loss,rmse,pcc,payload_bytes,cpu_s\n";
  int cell = 0;
  int failures = 0;
  for (const json& strategy : strategies) {
    for (const json& scope : scopes) {
      for (const json& cl : cl_methods) {
        for (const json& n : clients) {
          for (const json& aug : augments) {
            json cell_cfg = base;
            cell_cfg["strategy"] = strategy;
            cell_cfg["scope"] = scope;
            cell_cfg["cl_method"] = cl;
            cell_cfg["n_clients"] = n;
            cell_cfg["augment"] = aug;
            std::string cell_name = "cell_" + std::to_string(cell);
            ++cell;
            try {
              ExperimentConfig cfg = ExperimentConfig::from_json(cell_cfg);
              RunResult result = run_experiment(cfg);
              std::string cell_dir = (fs::path(out_dir) / cell_name).string();
              emit_report(result, cell_dir);
              std::string csv = result_csv_string(result);
              combined += csv.substr(csv.find('\n') + 1);  // drop per-cell header
              std::cout << cell_name << ": " << cfg.method_name() << " ok\n";
            } catch (const std::exception& e) {
              ++failures;
              std::cerr << cell_name << ": FAILED: " << e.what() << "\n";
            }
          }
        }
      }
    }
  }
  std::ofstream f(fs::path(out_dir) / "sweep.csv", std::ios::binary);
  f << combined;
  std::cout << "wrote " << (fs::path(out_dir) / "sweep.csv").string() << " (" << cell
            << " cells, " << failures << " failed)\n";
  return failures == 0 ? kExitOk : kExitSweepCellFailed;
}

int cmd_gen_data(const std::string& out_dir, std::int64_t n_scenes, std::int64_t image_size,
                 std::uint64_t seed, bool write_csv) {
  auto data = generate_dataset(n_scenes, image_size, seed);
  fs::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.n_scenes = n_scenes;
  manifest.image_size = image_size;
  manifest.coef = default_label_coefficients();
  {
    std::ofstream f(fs::path(out_dir) / "manifest.json");
    f << manifest.to_json().dump(2) << "\n";
  }
  if (write_csv) export_csv(data, out_dir, "scenes");
  std::cout << "generated " << data.size() << " scenes under " << out_dir << "\n";
  return kExitOk;
}

int cmd_report(const std::string& result_path, const std::string& format,
               const std::string& out_dir) {
  std::ifstream f(result_path);
  if (!f) throw ConfigError("cannot open result file: " + result_path);
  std::stringstream ss;
  ss << f.rdbuf();
  fs::create_directories(out_dir);
  if (format == "csv") {
    std::ofstream o(fs::path(out_dir) / "result.csv", std::ios::binary);
    o << csv_from_result_json(ss.str());
    std::cout << "wrote " << (fs::path(out_dir) / "result.csv").string() << "\n";
  } else if (format == "json") {
    std::ofstream o(fs::path(out_dir) / "result.json", std::ios::binary);
    o << ss.str();
    std::cout << "wrote " << (fs::path(out_dir) / "result.json").string() << "\n";
  } else {
    throw ConfigError("unknown report format: " + format);
  }
  return kExitOk;
}

int cmd_verify(const std::string& inject_fault) {
  VerifyOptions opts;
  opts.inject_fault = inject_fault;
  auto checks = run_verify_checks(opts);
  int width = 0;
  for (const auto& c : checks) {
    width = std::max(width, static_cast<int>(c.module.size() + c.name.size() + 1));
  }
  int passed = 0;
  for (const auto& c : checks) {
    std::string label = c.module + "/" + c.name;
    std::printf("%-*s  %s  %s\n", width, label.c_str(), c.pass ? "PASS" : "FAIL",
                c.detail.c_str());
    if (c.pass) ++passed;
  }
  std::printf("%d/%d checks passed (inventory size %d)\n", passed,
              static_cast<int>(checks.size()), verify_check_count());
  if (static_cast<int>(checks.size()) != verify_check_count()) {
    std::cerr << "check inventory drifted from the documented count\n";
    return kExitRuntimeError;
  }
  return passed == static_cast<int>(checks.size()) ? kExitOk : kExitRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedscape: deterministic federated / federated-continual learning simulator"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "run one experiment from a JSON config");
  std::string run_config, run_out = "out";
  std::vector<std::string> run_overrides;
  std::uint64_t seed_value = 0;
  bool seed_set = false, deterministic = false;
  run->add_option("--config", run_config, "experiment config path")->required();
  run->add_option("--out", run_out, "output directory");
  run->add_option("--override", run_overrides, "dotted-key override, key=value (repeatable)");
  run->add_option("--seed", seed_value, "override seeds.run")->each([&](const std::string&) {
    seed_set = true;
  });
  run->add_flag("--deterministic", deterministic,
                "record zeroed timings so outputs are byte-stable");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "run a strategy/method grid");
  std::string sweep_config, sweep_out = "sweep_out";
  std::vector<std::string> sweep_overrides;
  sweep->add_option("--config", sweep_config, "sweep config path (base + grid)")->required();
  sweep->add_option("--out", sweep_out, "output directory");
  sweep->add_option("--override", sweep_overrides, "override applied to the base config");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out = "data_out";
  std::int64_t gen_scenes = 512, gen_size = 32;
  std::uint64_t gen_seed = 1;
  bool gen_csv = false;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--n-scenes", gen_scenes, "number of scenes");
  gen->add_option("--image-size", gen_size, "square image size (power of two)");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_flag("--csv", gen_csv, "also export CSV + tensor files");

  // report
  auto* rep = app.add_subcommand("report", "re-render a result file");
  std::string rep_result, rep_format = "csv", rep_out = "report_out";
  rep->add_option("--result", rep_result, "path to result.json")->required();
  rep->add_option("--format", rep_format, "csv or json");
  rep->add_option("--out", rep_out, "output directory");

  // verify
  auto* ver = app.add_subcommand("verify", "run the oracle verification suite");
  std::string inject_fault;
  ver->add_option("--inject-fault", inject_fault,
                  "test hook: inject a known fault (agg-unweighted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      return cmd_run(run_config, run_out, run_overrides,
                     seed_set ? std::optional<std::uint64_t>(seed_value) : std::nullopt,
                     deterministic);
    }
    if (sweep->parsed()) return cmd_sweep(sweep_config, sweep_out, sweep_overrides);
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_scenes, gen_size, gen_seed, gen_csv);
    if (rep->parsed()) return cmd_report(rep_result, rep_format, rep_out);
    if (ver->parsed()) return cmd_verify(inject_fault);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kExitRuntimeError;
  }
  return kExitOk;
}
