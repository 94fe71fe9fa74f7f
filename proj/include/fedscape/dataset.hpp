#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedscape/rng.hpp"
#include "fedscape/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

namespace fedscape {

class DatasetError : public std::exception {
 public:
  explicit DatasetError(std::string msg) : msg_(std::move(msg)) {}
  const char* what() const noexcept override { return msg_.c_str(); }

 private:
  std::string msg_;
};

// Scene factors the labels are computed from. Retained on each sample so the
// label function stays independently checkable.
struct LatentFactors {
  float crowd_density = 0.0f;  // in [0,1]
  float min_distance = 0.0f;   // in [0,1]; 0 = closest
  std::array<bool, 4> context_flags = {false, false, false, false};
};

constexpr int kTaskCircle = 1;
constexpr int kTaskArrow = 2;
constexpr int kNumActions = 8;

struct SceneSample {
  Tensor image;   // [3, H, W]
  Tensor labels;  // [8], values in [1,5]
  int task_id = kTaskCircle;
  LatentFactors factors;
  int owner = -1;  // client tag; set when partitioned
};

// Fixed label-function coefficients, published via the dataset manifest so a
// run can be regenerated bit-identically.
struct LabelCoefficients {
  std::array<std::array<float, 6>, 8> w;
  std::array<float, 8> b;
  std::array<float, 8> task_offset;  // added to the logit for arrow scenes
};
const LabelCoefficients& default_label_coefficients();

// Closed-form label: label[a] = clamp(1 + 4*sigmoid(w_a . phi + b_a + off_a), 1, 5)
// with phi = (crowd_density, min_distance, flags...).
Tensor label_oracle(const LatentFactors& f, int task_id,
                    const LabelCoefficients& coef = default_label_coefficients());

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::int64_t n_scenes = 0;
  std::int64_t image_size = 32;
  LabelCoefficients coef;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

// Renders n_scenes synthetic scenes: blobs on channel 0 (count tracks crowd
// density, brightness tracks proximity), context-flag corner squares on
// channel 1, and a circle/arrow task marker on channel 2. Even indices are
// circle scenes, odd are arrow scenes.
std::vector<SceneSample> generate_dataset(std::int64_t n_scenes, std::int64_t image_size,
                                          std::uint64_t seed);

// p=0.5 horizontal flip, p=0.5 rotation by a uniform angle up to 10 degrees
// (bilinear, zero fill). Labels are never touched.
SceneSample augment(const SceneSample& sample, Rng& rng);

// Rotation about the image center, bilinear interpolation, zero fill.
// A zero-degree rotation reproduces the input bitwise (bilinear weights are
// exact on the integer grid).
Tensor rotate_image_bilinear(const Tensor& image, double degrees);

// Per-client train index lists (per task) plus the shared test list (per
// task). Indices refer to the generating sample vector.
struct FederatedSplit {
  std::vector<std::vector<std::vector<std::size_t>>> client_train;  // [client][task]
  std::vector<std::vector<std::size_t>> shared_test;                // [task]
  int n_clients = 0;

  std::size_t train_size() const;
  std::size_t test_size() const;
};

// 3:1 train/test split per task, then equal shards per client with per-task
// balance; remainder is dealt round-robin. non_iid sorts each task by crowd
// density before sharding instead of shuffling uniformly.
FederatedSplit partition(const std::vector<SceneSample>& data, int n_clients, std::uint64_t seed,
                         bool non_iid = false);

// CSV schema: image_file, task_id, label_1..label_8; image files are FSTN
// tensors resolved relative to the CSV's directory.
std::vector<SceneSample> ingest_csv(const std::string& csv_path);
void export_csv(const std::vector<SceneSample>& data, const std::string& dir,
                const std::string& stem);

}  // namespace fedscape
