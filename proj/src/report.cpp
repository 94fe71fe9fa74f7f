#include "fedscape/report.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fedscape {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// All reported metric values are quantized to 6 decimals before any
// serialization, so JSON and CSV renderings of the same result agree exactly.
double round6(double v) { return std::round(v * 1e6) / 1e6; }

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

ordered_json aggregate_json(const AggregateRecord& a) {
  ordered_json j;
  j["round"] = a.round;
  j["phase"] = a.phase;
  j["split"] = a.split;
  j["loss"] = round6(a.loss);
  j["rmse"] = round6(a.rmse);
  if (a.pcc.has_value()) {
    j["pcc"] = round6(*a.pcc);
  } else {
    j["pcc"] = nullptr;
  }
  j["pcc_undefined"] = a.pcc_undefined;
  return j;
}

struct TableRow {
  std::string eval_point;
  double loss = 0.0, rmse = 0.0;
  std::optional<double> pcc;
  double payload_bytes = 0.0;
  double cpu_s = 0.0;
};

std::vector<TableRow> build_table(const RunResult& r) {
  double payload_mean = 0.0, cpu_mean = 0.0;
  if (!r.resources.empty()) {
    for (const auto& res : r.resources) {
      payload_mean += static_cast<double>(res.payload_bytes);
      cpu_mean += res.train_cpu_s + res.comm_cpu_s;
    }
    payload_mean /= static_cast<double>(r.resources.size());
    cpu_mean /= static_cast<double>(r.resources.size());
  }

  auto row_from = [&](const AggregateRecord* a, const std::string& name) {
    TableRow row;
    row.eval_point = name;
    if (a != nullptr) {
      row.loss = a->loss;
      row.rmse = a->rmse;
      row.pcc = a->pcc;
    }
    row.payload_bytes = payload_mean;
    row.cpu_s = cpu_mean;
    return row;
  };

  std::vector<TableRow> rows;
  bool fcl = false;
  int end_of_task1 = 0;
  for (const auto& a : r.aggregates) {
    if (a.phase == "task1" && a.round > end_of_task1) end_of_task1 = a.round;
    if (a.phase != "fl") fcl = true;
  }
  if (!fcl) {
    rows.push_back(row_from(last_aggregate(r, "test"), "final"));
  } else {
    rows.push_back(row_from(find_aggregate(r, end_of_task1, "test_t1"), "after_task1"));
    rows.push_back(row_from(last_aggregate(r, "test_union"), "after_task2"));
    rows.push_back(row_from(last_aggregate(r, "test_t1"), "after_task2_t1"));
  }
  return rows;
}

ordered_json table_json(const RunResult& r) {
  ordered_json rows = ordered_json::array();
  const json& cfg = r.config_echo;
  for (const TableRow& row : build_table(r)) {
    ordered_json j;
    j["method"] = r.method;
    j["scope"] = cfg.at("scope");
    j["clients"] = cfg.at("n_clients");
    j["augment"] = cfg.at("augment").get<bool>() ? 1 : 0;
    j["eval_point"] = row.eval_point;
    j["loss"] = round6(row.loss);
    j["rmse"] = round6(row.rmse);
    if (row.pcc.has_value()) {
      j["pcc"] = round6(*row.pcc);
    } else {
      j["pcc"] = nullptr;
    }
    j["payload_bytes"] = round6(row.payload_bytes);
    j["cpu_s"] = round6(row.cpu_s);
    rows.push_back(j);
  }
  return rows;
}

std::string render_csv(const json& table) {
  std::string out = "method,scope,clients,augment,eval_point,loss,rmse,pcc,payload_bytes,cpu_s\n";
  for (const auto& row : table) {
    out += row.at("method").get<std::string>();
    out += ",";
    out += row.at("scope").get<std::string>();
    out += ",";
    out += std::to_string(row.at("clients").get<int>());
    out += ",";
    out += std::to_string(row.at("augment").get<int>());
    out += ",";
    out += row.at("eval_point").get<std::string>();
    out += ",";
    out += fixed6(row.at("loss").get<double>());
    out += ",";
    out += fixed6(row.at("rmse").get<double>());
    out += ",";
    out += row.at("pcc").is_null() ? "UNDEFINED" : fixed6(row.at("pcc").get<double>());
    out += ",";
    out += fixed6(row.at("payload_bytes").get<double>());
    out += ",";
    out += fixed6(row.at("cpu_s").get<double>());
    out += "\n";
  }
  return out;
}

}  // namespace

std::string result_json_string(const RunResult& r) {
  ordered_json j;
  j["schema_version"] = r.schema_version;
  j["conventions"] = {{"loss", "mse on raw predictions"},
                      {"rmse_pcc", "computed on predictions clamped to [1,5]"}};
  j["method"] = r.method;
  j["config"] = r.config_echo;

  ordered_json aggs = ordered_json::array();
  for (const auto& a : r.aggregates) aggs.push_back(aggregate_json(a));
  j["aggregates"] = aggs;

  ordered_json recs = ordered_json::array();
  for (const auto& rec : r.records) {
    ordered_json je;
    je["client"] = rec.client;
    je["round"] = rec.round;
    je["phase"] = rec.phase;
    je["split"] = rec.split;
    je["loss"] = round6(rec.metrics.loss);
    je["rmse"] = round6(rec.metrics.rmse);
    ordered_json pcc_arr = ordered_json::array();
    for (const auto& p : rec.metrics.pcc_per_action) {
      if (p.has_value()) {
        pcc_arr.push_back(round6(*p));
      } else {
        pcc_arr.push_back(nullptr);
      }
    }
    je["pcc_per_action"] = pcc_arr;
    if (rec.metrics.pcc_mean.has_value()) {
      je["pcc_mean"] = round6(*rec.metrics.pcc_mean);
    } else {
      je["pcc_mean"] = nullptr;
    }
    je["pcc_undefined"] = rec.metrics.pcc_undefined;
    recs.push_back(je);
  }
  j["records"] = recs;

  ordered_json resources = ordered_json::array();
  for (const auto& res : r.resources) {
    ordered_json je;
    je["client"] = res.client;
    je["round"] = res.round;
    je["payload_bytes"] = res.payload_bytes;
    je["train_cpu_s"] = round6(res.train_cpu_s);
    je["comm_cpu_s"] = round6(res.comm_cpu_s);
    resources.push_back(je);
  }
  j["resources"] = resources;
  j["wall_s"] = round6(r.wall_s);

  if (!r.forgetting_per_client.empty()) {
    ordered_json f;
    ordered_json per = ordered_json::object();
    for (const auto& [client, delta] : r.forgetting_per_client) {
      per[std::to_string(client)] = round6(delta);
    }
    f["per_client"] = per;
    f["mean"] = r.forgetting_mean.has_value() ? ordered_json(round6(*r.forgetting_mean))
                                              : ordered_json(nullptr);
    j["forgetting"] = f;
  }

  j["table"] = table_json(r);
  return j.dump(2) + "\n";
}

std::string result_csv_string(const RunResult& r) { return render_csv(table_json(r)); }

std::string csv_from_result_json(const std::string& json_text) {
  json j = json::parse(json_text);
  return render_csv(j.at("table"));
}

void emit_report(const RunResult& result, const std::string& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream f(fs::path(out_dir) / "result.json", std::ios::binary);
    if (!f) throw TensorError("cannot write result.json under " + out_dir);
    f << result_json_string(result);
  }
  {
    std::ofstream f(fs::path(out_dir) / "result.csv", std::ios::binary);
    if (!f) throw TensorError("cannot write result.csv under " + out_dir);
    f << result_csv_string(result);
  }
}

}  // namespace fedscape
