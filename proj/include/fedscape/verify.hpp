#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedscape/flstrat.hpp"

namespace fedscape {

struct VerifyCheck {
  std::string module;
  std::string name;
  bool pass = false;
  std::string detail;  // observed vs expected on failure, short note on success
};

struct VerifyOptions {
  // Test hook: "agg-unweighted" swaps the aggregator under test for an
  // unweighted mean so the oracle check demonstrably fails.
  std::string inject_fault;
};

// The full oracle suite. Check count is fixed; see verify_check_count().
std::vector<VerifyCheck> run_verify_checks(const VerifyOptions& opts = {});
int verify_check_count();

namespace oracle {

// Extended-precision (long double) weighted mean, kept independent of the
// production aggregation path.
ParamSet weighted_mean_reference(const std::vector<ClientUpdate>& updates);

// Extended-precision Pearson correlation over double columns.
std::optional<long double> pcc_reference(std::span<const double> x, std::span<const double> y);

// Extended-precision root mean squared error.
long double rmse_reference(std::span<const double> pred, std::span<const double> target);

}  // namespace oracle

}  // namespace fedscape
