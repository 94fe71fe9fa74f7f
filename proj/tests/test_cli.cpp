#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* cli_path() { return FEDSCAPE_CLI_PATH; }

int run_cli(const std::string& args) {
  std::string cmd = std::string(cli_path()) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("fedscape_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const json& j) {
  fs::path p = dir / "config.json";
  std::ofstream f(p);
  f << j.dump(2);
  return p;
}

json small_config() {
  return json{
      {"mode", "fl"},
      {"strategy", "avg"},
      {"scope", "full"},
      {"n_clients", 2},
      {"rounds", 2},
      {"local_epochs", 1},
      {"batch_size", 4},
      {"dataset", {{"n_scenes", 32}, {"image_size", 16}}},
      {"model", {{"conv_channels", {4, 8}}, {"top_hidden", 8}}},
      {"seeds", {{"data", 1}, {"model", 2}, {"run", 3}}},
  };
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cli run: missing config exits 2, valid config exits 0 with artifacts") {
  CHECK(run_cli("run --config /nonexistent/cfg.json") == 2);

  fs::path dir = fresh_dir("run");
  fs::path cfg = write_config(dir, small_config());
  CHECK(run_cli("run --config " + cfg.string() + " --out " + (dir / "out").string() +
                " --deterministic") == 0);
  CHECK(fs::exists(dir / "out" / "result.json"));
  CHECK(fs::exists(dir / "out" / "result.csv"));

  // The emitted result embeds the fully resolved config for audit.
  json result = json::parse(slurp(dir / "out" / "result.json"));
  CHECK(result["config"]["n_clients"] == 2);
  CHECK(result["config"]["batch_size"] == 4);
  CHECK(result["schema_version"] == "1");
}

TEST_CASE("cli run: unknown override key exits 2 and names the key") {
  fs::path dir = fresh_dir("override_bad");
  fs::path cfg = write_config(dir, small_config());
  CHECK(run_cli("run --config " + cfg.string() + " --override rouds=3") == 2);
  CHECK(run_cli("run --config " + cfg.string() + " --override hyper.lrr=0.1") == 2);
  CHECK(run_cli("run --config " + cfg.string() + " --override rounds=true") == 2);  // type clash
}

TEST_CASE("cli run: root-scope override shrinks the payload column") {
  fs::path dir = fresh_dir("override_scope");
  json cfg_json = small_config();
  cfg_json["hyper"] = {{"lr", 0.001}};
  fs::path cfg = write_config(dir, cfg_json);
  REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (dir / "full").string() +
                  " --deterministic") == 0);
  REQUIRE(run_cli("run --config " + cfg.string() + " --override scope=root --out " +
                  (dir / "root").string() + " --deterministic") == 0);
  json full = json::parse(slurp(dir / "full" / "result.json"));
  json root = json::parse(slurp(dir / "root" / "result.json"));
  double full_payload = full["table"][0]["payload_bytes"].get<double>();
  double root_payload = root["table"][0]["payload_bytes"].get<double>();
  CHECK(root_payload < full_payload);
  CHECK(root["config"]["scope"] == "root");
}

TEST_CASE("cli run twice: byte-identical outputs under --deterministic") {
  fs::path dir = fresh_dir("repeat");
  fs::path cfg = write_config(dir, small_config());
  REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (dir / "a").string() +
                  " --deterministic") == 0);
  REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (dir / "b").string() +
                  " --deterministic") == 0);
  CHECK(slurp(dir / "a" / "result.json") == slurp(dir / "b" / "result.json"));
  CHECK(slurp(dir / "a" / "result.csv") == slurp(dir / "b" / "result.csv"));
}

TEST_CASE("cli sweep: 1x1 grid matches a plain run; 2x2 grid yields 4 rows") {
  fs::path dir = fresh_dir("sweep");
  json base = small_config();
  json sweep_cfg = {{"base", base}};
  fs::path cfg1 = dir / "sweep1.json";
  {
    std::ofstream f(cfg1);
    f << sweep_cfg.dump(2);
  }
  REQUIRE(run_cli("sweep --config " + cfg1.string() + " --out " + (dir / "s1").string()) == 0);
  // single cell: sweep.csv == the cell's result.csv
  CHECK(slurp(dir / "s1" / "sweep.csv") == slurp(dir / "s1" / "cell_0" / "result.csv"));

  sweep_cfg["grid"] = {{"strategies", {"avg", "prox"}}, {"scopes", {"full", "root"}}};
  fs::path cfg4 = dir / "sweep4.json";
  {
    std::ofstream f(cfg4);
    f << sweep_cfg.dump(2);
  }
  REQUIRE(run_cli("sweep --config " + cfg4.string() + " --out " + (dir / "s4").string()) == 0);
  std::string csv = slurp(dir / "s4" / "sweep.csv");
  int rows = -1;  // header
  for (char c : csv) {
    if (c == '\n') ++rows;
  }
  CHECK(rows == 4);
}

TEST_CASE("cli sweep: a failing cell is recorded and exits 1") {
  fs::path dir = fresh_dir("sweep_fail");
  json base = small_config();
  json sweep_cfg = {{"base", base},
                    {"grid", {{"cl_methods", {"none", "ewc"}}}}};  // ewc invalid in fl mode
  fs::path cfg = dir / "sweep.json";
  {
    std::ofstream f(cfg);
    f << sweep_cfg.dump(2);
  }
  CHECK(run_cli("sweep --config " + cfg.string() + " --out " + (dir / "out").string()) == 1);
  CHECK(fs::exists(dir / "out" / "sweep.csv"));
}

TEST_CASE("cli gen-data: manifest and csv round trip") {
  fs::path dir = fresh_dir("gendata");
  REQUIRE(run_cli("gen-data --out " + dir.string() + " --n-scenes 16 --image-size 16 --seed 9 "
                  "--csv") == 0);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "scenes.csv"));
  json manifest = json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["n_scenes"] == 16);
  CHECK(manifest["seed"] == 9);
  CHECK(manifest.contains("label_w"));
}

TEST_CASE("cli report: csv re-render matches the original emission") {
  fs::path dir = fresh_dir("report");
  fs::path cfg = write_config(dir, small_config());
  REQUIRE(run_cli("run --config " + cfg.string() + " --out " + (dir / "out").string() +
                  " --deterministic") == 0);
  REQUIRE(run_cli("report --result " + (dir / "out" / "result.json").string() + " --format csv "
                  "--out " + (dir / "re").string()) == 0);
  CHECK(slurp(dir / "re" / "result.csv") == slurp(dir / "out" / "result.csv"));
}

TEST_CASE("cli verify: clean pass, seeded fault detected") {
  CHECK(run_cli("verify") == 0);
  CHECK(run_cli("verify --inject-fault agg-unweighted") == 3);
}

TEST_CASE("cli run honors FEDSCAPE_THREADS") {
  fs::path dir = fresh_dir("threads");
  fs::path cfg = write_config(dir, small_config());
  std::string cmd = "FEDSCAPE_THREADS=1 " + std::string(cli_path()) + " run --config " +
                    cfg.string() + " --out " + (dir / "one").string() +
                    " --deterministic >/dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  std::string cmd2 = "FEDSCAPE_THREADS=4 " + std::string(cli_path()) + " run --config " +
                     cfg.string() + " --out " + (dir / "four").string() +
                     " --deterministic >/dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd2.c_str())) == 0);
  CHECK(slurp(dir / "one" / "result.json") == slurp(dir / "four" / "result.json"));
}
