#include "fedscape/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fedscape {

namespace fs = std::filesystem;
using nlohmann::json;

const LabelCoefficients& default_label_coefficients() {
  static const LabelCoefficients coef = {
      // w rows: crowd_density, min_distance, flag1..flag4
      {{{2.0f, -1.5f, 0.8f, -0.6f, 0.4f, -0.9f},
        {-1.8f, 2.2f, -0.5f, 0.7f, -1.1f, 0.6f},
        {1.2f, 1.0f, -1.4f, 0.5f, 0.9f, -0.7f},
        {-0.9f, -1.3f, 1.6f, 1.1f, -0.4f, 0.8f},
        {2.4f, -0.8f, -1.0f, -1.2f, 0.7f, 0.5f},
        {-1.5f, 0.9f, 1.3f, -0.8f, -1.0f, 1.4f},
        {0.7f, -2.0f, 0.6f, 1.5f, 1.2f, -1.1f},
        {-1.1f, 1.7f, -0.9f, 0.9f, -1.3f, -0.5f}}},
      {{-0.4f, 0.3f, -1.0f, 0.2f, -0.6f, 0.1f, -0.2f, 0.5f}},
      // Arrow scenes flip the logit sign hard enough to force a task shift.
      {{2.2f, -2.4f, 1.8f, -2.0f, 2.6f, -1.9f, 2.1f, -2.3f}},
  };
  return coef;
}

Tensor label_oracle(const LatentFactors& f, int task_id, const LabelCoefficients& coef) {
  if (task_id != kTaskCircle && task_id != kTaskArrow) {
    throw DatasetError("task_id must be 1 or 2");
  }
  std::array<double, 6> phi = {
      static_cast<double>(f.crowd_density), static_cast<double>(f.min_distance),
      f.context_flags[0] ? 1.0 : 0.0,       f.context_flags[1] ? 1.0 : 0.0,
      f.context_flags[2] ? 1.0 : 0.0,       f.context_flags[3] ? 1.0 : 0.0,
  };
  Tensor labels({kNumActions});
  for (int a = 0; a < kNumActions; ++a) {
    double z = static_cast<double>(coef.b[static_cast<std::size_t>(a)]);
    for (int k = 0; k < 6; ++k) {
      z += static_cast<double>(coef.w[static_cast<std::size_t>(a)][static_cast<std::size_t>(k)]) *
           phi[static_cast<std::size_t>(k)];
    }
    if (task_id == kTaskArrow) z += static_cast<double>(coef.task_offset[static_cast<std::size_t>(a)]);
    double sig = 1.0 / (1.0 + std::exp(-z));
    double v = 1.0 + 4.0 * sig;
    labels[a] = static_cast<float>(std::clamp(v, 1.0, 5.0));
  }
  return labels;
}

json DatasetManifest::to_json() const {
  json j;
  j["seed"] = seed;
  j["n_scenes"] = n_scenes;
  j["image_size"] = image_size;
  json w = json::array();
  for (const auto& row : coef.w) w.push_back(row);
  j["label_w"] = w;
  j["label_b"] = coef.b;
  j["task_offset"] = coef.task_offset;
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.n_scenes = j.at("n_scenes").get<std::int64_t>();
  m.image_size = j.at("image_size").get<std::int64_t>();
  const json& w = j.at("label_w");
  for (std::size_t a = 0; a < 8; ++a) m.coef.w[a] = w.at(a).get<std::array<float, 6>>();
  m.coef.b = j.at("label_b").get<std::array<float, 8>>();
  m.coef.task_offset = j.at("task_offset").get<std::array<float, 8>>();
  return m;
}

namespace {

void add_gaussian_blob(Tensor& image, int channel, double cy, double cx, double radius,
                       double amplitude) {
  std::int64_t h = image.dim(1), w = image.dim(2);
  double inv2r2 = 1.0 / (2.0 * radius * radius);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      double v = amplitude * std::exp(-d2 * inv2r2);
      float& px = image.at(channel, y, x);
      px = std::min(1.0f, px + static_cast<float>(v));
    }
  }
}

void draw_flag_square(Tensor& image, int flag, std::int64_t size) {
  std::int64_t h = image.dim(1), w = image.dim(2);
  std::int64_t y0 = (flag / 2 == 0) ? 0 : h - size;
  std::int64_t x0 = (flag % 2 == 0) ? 0 : w - size;
  for (std::int64_t y = y0; y < y0 + size; ++y) {
    for (std::int64_t x = x0; x < x0 + size; ++x) image.at(1, y, x) = 1.0f;
  }
}

void draw_task_marker(Tensor& image, int task_id) {
  std::int64_t h = image.dim(1), w = image.dim(2);
  double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  if (task_id == kTaskCircle) {
    double r = h / 4.0;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
        if (std::abs(d - r) < 1.5) image.at(2, y, x) = 1.0f;
      }
    }
  } else {
    // Horizontal shaft plus a right-pointing head.
    std::int64_t mid = h / 2;
    for (std::int64_t x = w / 4; x < w - w / 4; ++x) {
      image.at(2, mid - 1, x) = 1.0f;
      image.at(2, mid, x) = 1.0f;
    }
    std::int64_t tip = w - w / 4;
    for (std::int64_t k = 0; k < h / 8 + 2; ++k) {
      for (std::int64_t y = mid - k; y <= mid + k; ++y) {
        std::int64_t x = tip - k;
        if (y >= 0 && y < h && x >= 0 && x < w) image.at(2, y, x) = 1.0f;
      }
    }
  }
}

}  // namespace

std::vector<SceneSample> generate_dataset(std::int64_t n_scenes, std::int64_t image_size,
                                          std::uint64_t seed) {
  if (n_scenes < 8) throw DatasetError("n_scenes must be >= 8");
  Rng root(seed);
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(n_scenes));
  for (std::int64_t i = 0; i < n_scenes; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    SceneSample s;
    s.task_id = (i % 2 == 0) ? kTaskCircle : kTaskArrow;
    s.factors.crowd_density = static_cast<float>(rng.uniform());
    s.factors.min_distance = static_cast<float>(rng.uniform());
    for (int fgi = 0; fgi < 4; ++fgi) s.factors.context_flags[static_cast<std::size_t>(fgi)] = rng.bernoulli(0.5);

    s.image = Tensor({3, image_size, image_size});
    int blobs = 1 + static_cast<int>(std::min(4.0, std::floor(s.factors.crowd_density * 5.0)));
    double amplitude = 0.25 + 0.75 * (1.0 - static_cast<double>(s.factors.min_distance));
    double margin = static_cast<double>(image_size) / 8.0;
    for (int bi = 0; bi < blobs; ++bi) {
      double cy = rng.uniform(margin, static_cast<double>(image_size) - margin);
      double cx = rng.uniform(margin, static_cast<double>(image_size) - margin);
      add_gaussian_blob(s.image, 0, cy, cx, static_cast<double>(image_size) / 12.0, amplitude);
    }
    for (int fgi = 0; fgi < 4; ++fgi) {
      if (s.factors.context_flags[static_cast<std::size_t>(fgi)]) {
        draw_flag_square(s.image, fgi, std::max<std::int64_t>(3, image_size / 6));
      }
    }
    draw_task_marker(s.image, s.task_id);
    s.labels = label_oracle(s.factors, s.task_id);
    out.push_back(std::move(s));
  }
  return out;
}

Tensor rotate_image_bilinear(const Tensor& image, double degrees) {
  std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  double rad = degrees * M_PI / 180.0;
  double cs = std::cos(rad), sn = std::sin(rad);
  double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor out({c, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      // Inverse mapping: sample the source at the back-rotated position.
      double dy = y - cy, dx = x - cx;
      double sy = cs * dy + sn * dx + cy;
      double sx = -sn * dy + cs * dx + cx;
      double fy = std::floor(sy), fx = std::floor(sx);
      double wy = sy - fy, wx = sx - fx;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        auto at = [&](double yy, double xx) -> double {
          std::int64_t iy = static_cast<std::int64_t>(yy), ix = static_cast<std::int64_t>(xx);
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) return 0.0;  // zero fill
          return static_cast<double>(image.at(ch, iy, ix));
        };
        double v = (1.0 - wy) * ((1.0 - wx) * at(fy, fx) + wx * at(fy, fx + 1)) +
                   wy * ((1.0 - wx) * at(fy + 1, fx) + wx * at(fy + 1, fx + 1));
        out.at(ch, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

SceneSample augment(const SceneSample& sample, Rng& rng) {
  SceneSample out = sample;
  bool flip = rng.bernoulli(0.5);
  bool rotate = rng.bernoulli(0.5);
  if (flip) {
    std::int64_t c = out.image.dim(0), h = out.image.dim(1), w = out.image.dim(2);
    Tensor flipped({c, h, w});
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) flipped.at(ch, y, x) = out.image.at(ch, y, w - 1 - x);
      }
    }
    out.image = std::move(flipped);
  }
  if (rotate) {
    double degrees = rng.uniform(-10.0, 10.0);
    out.image = rotate_image_bilinear(out.image, degrees);
  }
  return out;
}

std::size_t FederatedSplit::train_size() const {
  std::size_t n = 0;
  for (const auto& c : client_train) {
    for (const auto& t : c) n += t.size();
  }
  return n;
}

std::size_t FederatedSplit::test_size() const {
  std::size_t n = 0;
  for (const auto& t : shared_test) n += t.size();
  return n;
}

FederatedSplit partition(const std::vector<SceneSample>& data, int n_clients, std::uint64_t seed,
                         bool non_iid) {
  if (n_clients < 2 || n_clients > 10) throw DatasetError("n_clients must be in [2,10]");
  if (data.size() < static_cast<std::size_t>(n_clients)) {
    throw DatasetError("fewer samples than clients");
  }

  FederatedSplit split;
  split.n_clients = n_clients;
  split.client_train.assign(static_cast<std::size_t>(n_clients),
                            std::vector<std::vector<std::size_t>>(2));
  split.shared_test.assign(2, {});

  Rng rng(seed);
  for (int task = kTaskCircle; task <= kTaskArrow; ++task) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].task_id == task) idx.push_back(i);
    }
    Rng task_rng = rng.fork(static_cast<std::uint64_t>(task));
    task_rng.shuffle(idx);

    // 3:1 split; the tail quarter is the shared test set.
    std::size_t n_train = (idx.size() * 3) / 4;
    std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.shared_test[static_cast<std::size_t>(task - 1)]
        .assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());

    if (non_iid) {
      std::sort(train.begin(), train.end(), [&](std::size_t a, std::size_t b) {
        float da = data[a].factors.crowd_density, db = data[b].factors.crowd_density;
        return da != db ? da < db : a < b;
      });
    }
    for (std::size_t i = 0; i < train.size(); ++i) {
      std::size_t client = non_iid
          ? std::min<std::size_t>(i * static_cast<std::size_t>(n_clients) / train.size(),
                                  static_cast<std::size_t>(n_clients) - 1)
          : i % static_cast<std::size_t>(n_clients);
      split.client_train[client][static_cast<std::size_t>(task - 1)].push_back(train[i]);
    }
  }
  return split;
}

// --- CSV ingestion --------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<SceneSample> ingest_csv(const std::string& csv_path) {
  std::ifstream f(csv_path);
  if (!f) throw DatasetError("cannot open csv: " + csv_path);
  fs::path base = fs::path(csv_path).parent_path();

  std::string line;
  if (!std::getline(f, line)) throw DatasetError("empty csv: " + csv_path);
  std::vector<std::string> header = split_csv_row(line);
  std::vector<std::string> expect = {"image_file", "task_id", "label_1", "label_2", "label_3",
                                     "label_4",    "label_5", "label_6", "label_7", "label_8"};
  if (header != expect) throw DatasetError("csv header mismatch in " + csv_path);

  std::vector<SceneSample> out;
  int row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cols = split_csv_row(line);
    if (cols.size() != expect.size()) {
      throw DatasetError("malformed row " + std::to_string(row) + " in " + csv_path);
    }
    SceneSample s;
    fs::path img = base / cols[0];
    try {
      s.image = load_tensor(img.string());
    } catch (const std::exception& e) {
      throw DatasetError("row " + std::to_string(row) + ": " + e.what());
    }
    if (s.image.rank() != 3) {
      throw DatasetError("row " + std::to_string(row) + ": image tensor must be rank 3");
    }
    try {
      s.task_id = std::stoi(cols[1]);
    } catch (const std::exception&) {
      throw DatasetError("row " + std::to_string(row) + ": bad task_id");
    }
    if (s.task_id != kTaskCircle && s.task_id != kTaskArrow) {
      throw DatasetError("row " + std::to_string(row) + ": task_id outside {1,2}");
    }
    s.labels = Tensor({kNumActions});
    for (int a = 0; a < kNumActions; ++a) {
      float v = 0.0f;
      try {
        v = std::stof(cols[static_cast<std::size_t>(2 + a)]);
      } catch (const std::exception&) {
        throw DatasetError("row " + std::to_string(row) + ": bad label_" + std::to_string(a + 1));
      }
      if (!(v >= 1.0f && v <= 5.0f)) {
        throw DatasetError("row " + std::to_string(row) + ": label_" + std::to_string(a + 1) +
                           " outside [1,5]");
      }
      s.labels[a] = v;
    }
    out.push_back(std::move(s));
  }
  return out;
}

void export_csv(const std::vector<SceneSample>& data, const std::string& dir,
                const std::string& stem) {
  fs::create_directories(dir);
  fs::path csv = fs::path(dir) / (stem + ".csv");
  std::ofstream f(csv);
  if (!f) throw DatasetError("cannot write csv: " + csv.string());
  f << "image_file,task_id,label_1,label_2,label_3,label_4,label_5,label_6,label_7,label_8\n";
  char buf[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::string img_name = stem + "_" + std::to_string(i) + ".fstn";
    save_tensor((fs::path(dir) / img_name).string(), data[i].image);
    f << img_name << "," << data[i].task_id;
    for (int a = 0; a < kNumActions; ++a) {
      // 9 significant digits round-trips binary32 exactly.
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(data[i].labels[a]));
      f << "," << buf;
    }
    f << "\n";
  }
}

}  // namespace fedscape
