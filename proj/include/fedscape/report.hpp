#pragma once

#include <string>

#include "fedscape/harness.hpp"

namespace fedscape {

// Renders a RunResult into its serialized forms: stable key order, fixed
// 6-decimal values, schema version header. Emission is pure, so writing the
// same result twice produces byte-identical files.
std::string result_json_string(const RunResult& result);
std::string result_csv_string(const RunResult& result);

// Writes result.json and result.csv (plus resources.json when timings were
// captured) under out_dir.
void emit_report(const RunResult& result, const std::string& out_dir);

// Re-render a previously written result.json into CSV form.
std::string csv_from_result_json(const std::string& json_text);

}  // namespace fedscape
