#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include <json.hpp>

#include "splitnas/tensor.hpp"

namespace splitnas {

// Desk-scale stand-in for a superclass/fine-class image task: the coarse
// label picks the shape layout, the hidden fine attribute flips the global
// polarity. rho couples fine to coarse (0 = independent, 1 = determined).
struct DatasetSpec {
  int n = 4000;
  int h = 16, w = 16, channels = 1;
  int coarse_classes = 4;
  int fine_classes = 2;
  double rho = 0.0;
  double noise = 0.05;
  int train_n = 2400, aux_n = 800, eval_n = 800;
  uint64_t seed = 7;
};

template <class T>
struct SyntheticDataset {
  DatasetSpec spec;
  Tensor<T> images;  // [N, C, H, W], values in [0,1]
  std::vector<int> coarse, fine;
  std::vector<int> train_idx, aux_idx, eval_idx;
};

namespace detail {

// Shape painters; all draw fg-on-bg into a h*w buffer.
template <class T>
void paint_shape(std::vector<T>& img, int h, int w, int shape, int cy, int cx, int s, T fg, T bg) {
  std::fill(img.begin(), img.end(), bg);
  auto put = [&](int r, int c) {
    if (r >= 0 && r < h && c >= 0 && c < w) img[static_cast<size_t>(r * w + c)] = fg;
  };
  switch (shape % 4) {
    case 0:  // filled block
      for (int r = cy - s; r <= cy + s; ++r)
        for (int c = cx - s; c <= cx + s; ++c) put(r, c);
      break;
    case 1:  // disk
      for (int r = cy - s - 1; r <= cy + s + 1; ++r)
        for (int c = cx - s - 1; c <= cx + s + 1; ++c)
          if ((r - cy) * (r - cy) + (c - cx) * (c - cx) <= s * s) put(r, c);
      break;
    case 2:  // X cross
      for (int d = -s - 2; d <= s + 2; ++d) {
        put(cy + d, cx + d);
        put(cy + d, cx + d + 1);
        put(cy + d, cx - d);
        put(cy + d, cx - d + 1);
      }
      break;
    case 3:  // horizontal stripes
      for (int r = 0; r < h; ++r)
        if (r % 4 < 2)
          for (int c = 0; c < w; ++c) put(r, c);
      break;
  }
}

}  // namespace detail

template <class T>
SyntheticDataset<T> generate_dataset(const DatasetSpec& spec) {
  if (spec.n < 1 || spec.h < 8 || spec.w < 8) throw ConfigError("dataset too small to draw patterns");
  if (spec.channels != 1) throw ConfigError("synthetic dataset is single-channel");
  if (spec.coarse_classes < 2 || spec.coarse_classes > 4)
    throw ConfigError("coarse class count outside the representable 2..4 patterns");
  if (spec.fine_classes != 2) throw ConfigError("fine attribute is binary");
  if (spec.rho < 0.0 || spec.rho > 1.0) throw ConfigError("rho must be in [0,1]");
  if (spec.train_n + spec.aux_n + spec.eval_n > spec.n)
    throw ConfigError("split sizes exceed dataset size");

  SyntheticDataset<T> ds;
  ds.spec = spec;
  int n = spec.n;
  ds.coarse.resize(static_cast<size_t>(n));
  ds.fine.resize(static_cast<size_t>(n));

  // balanced-by-construction assignment: coarse round-robin, fine base
  // pattern independent of coarse; rho overrides an evenly chosen subset
  // with the coarse-determined value.
  for (int i = 0; i < n; ++i) {
    ds.coarse[static_cast<size_t>(i)] = i % spec.coarse_classes;
    ds.fine[static_cast<size_t>(i)] = (i / spec.coarse_classes) % spec.fine_classes;
  }
  if (spec.rho > 0.0) {
    std::mt19937_64 rng(derive_seed(spec.seed, 11));
    for (int c = 0; c < spec.coarse_classes; ++c) {
      std::vector<int> members;
      for (int i = 0; i < n; ++i)
        if (ds.coarse[static_cast<size_t>(i)] == c) members.push_back(i);
      for (size_t j = members.size(); j > 1; --j) {  // Fisher-Yates
        size_t r = rng() % j;
        std::swap(members[j - 1], members[r]);
      }
      size_t overrides = static_cast<size_t>(spec.rho * static_cast<double>(members.size()));
      for (size_t j = 0; j < overrides; ++j)
        ds.fine[static_cast<size_t>(members[j])] = c % spec.fine_classes;
    }
  }

  ds.images = Tensor<T>({n, 1, spec.h, spec.w});
  std::vector<T> img(static_cast<size_t>(spec.h * spec.w));
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, 101, static_cast<uint64_t>(i)));
    std::uniform_int_distribution<int> jitter(-2, 2);
    std::uniform_int_distribution<int> size_jitter(-1, 1);
    std::uniform_real_distribution<double> u(-spec.noise, spec.noise);
    int cy = spec.h / 2 + jitter(rng);
    int cx = spec.w / 2 + jitter(rng);
    int s = 4 + size_jitter(rng);
    detail::paint_shape(img, spec.h, spec.w, ds.coarse[static_cast<size_t>(i)], cy, cx, s, T(0.85),
                        T(0.15));
    bool invert = ds.fine[static_cast<size_t>(i)] == 1;
    for (int px = 0; px < spec.h * spec.w; ++px) {
      double v = static_cast<double>(img[static_cast<size_t>(px)]);
      if (invert) v = 1.0 - v;
      v += u(rng);
      v = std::clamp(v, 0.0, 1.0);
      ds.images.v()[static_cast<size_t>(i * spec.h * spec.w + px)] = static_cast<T>(v);
    }
  }

  // shuffle the sample order once, then slice disjoint splits
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed(spec.seed, 7));
  for (size_t j = order.size(); j > 1; --j) {
    size_t r = rng() % j;
    std::swap(order[j - 1], order[r]);
  }
  ds.train_idx.assign(order.begin(), order.begin() + spec.train_n);
  ds.aux_idx.assign(order.begin() + spec.train_n, order.begin() + spec.train_n + spec.aux_n);
  ds.eval_idx.assign(order.begin() + spec.train_n + spec.aux_n,
                     order.begin() + spec.train_n + spec.aux_n + spec.eval_n);
  return ds;
}

// Slices a batch [count, C, H, W] starting at `offset` within `indices`.
template <class T>
Tensor<T> gather_images(const SyntheticDataset<T>& ds, const std::vector<int>& indices, size_t offset,
                        size_t count) {
  int64_t chw = static_cast<int64_t>(ds.spec.channels) * ds.spec.h * ds.spec.w;
  Tensor<T> out({static_cast<int64_t>(count), ds.spec.channels, ds.spec.h, ds.spec.w});
  for (size_t i = 0; i < count; ++i) {
    int src = indices[offset + i];
    std::copy_n(ds.images.v().begin() + src * chw, chw, out.v().begin() + static_cast<int64_t>(i) * chw);
  }
  return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<int>& indices,
                                      size_t offset, size_t count) {
  std::vector<int> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = labels[static_cast<size_t>(indices[offset + i])];
  return out;
}

// ---------------------------------------------------------------------------
// persistence: images blob + one JSON for labels, splits and the spec

template <class T>
void save_dataset(const std::filesystem::path& dir, const SyntheticDataset<T>& ds) {
  std::filesystem::create_directories(dir);
  blob::save(dir / "images.tblb", ds.images);
  nlohmann::json j;
  j["schema_version"] = 1;
  j["spec"] = {{"n", ds.spec.n},       {"h", ds.spec.h},
               {"w", ds.spec.w},       {"channels", ds.spec.channels},
               {"coarse_classes", ds.spec.coarse_classes},
               {"fine_classes", ds.spec.fine_classes},
               {"rho", ds.spec.rho},   {"noise", ds.spec.noise},
               {"train_n", ds.spec.train_n}, {"aux_n", ds.spec.aux_n},
               {"eval_n", ds.spec.eval_n},   {"seed", ds.spec.seed}};
  j["coarse"] = ds.coarse;
  j["fine"] = ds.fine;
  j["train_idx"] = ds.train_idx;
  j["aux_idx"] = ds.aux_idx;
  j["eval_idx"] = ds.eval_idx;
  std::ofstream os(dir / "dataset.json");
  if (!os) throw FormatError("cannot write " + (dir / "dataset.json").string());
  os << j.dump(2) << "\n";
}

template <class T>
SyntheticDataset<T> load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) throw FormatError("cannot open " + (dir / "dataset.json").string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset.json is not valid JSON: " + std::string(e.what()));
  }
  SyntheticDataset<T> ds;
  auto s = j.at("spec");
  ds.spec.n = s.at("n");
  ds.spec.h = s.at("h");
  ds.spec.w = s.at("w");
  ds.spec.channels = s.at("channels");
  ds.spec.coarse_classes = s.at("coarse_classes");
  ds.spec.fine_classes = s.at("fine_classes");
  ds.spec.rho = s.at("rho");
  ds.spec.noise = s.at("noise");
  ds.spec.train_n = s.at("train_n");
  ds.spec.aux_n = s.at("aux_n");
  ds.spec.eval_n = s.at("eval_n");
  ds.spec.seed = s.at("seed");
  ds.coarse = j.at("coarse").get<std::vector<int>>();
  ds.fine = j.at("fine").get<std::vector<int>>();
  ds.train_idx = j.at("train_idx").get<std::vector<int>>();
  ds.aux_idx = j.at("aux_idx").get<std::vector<int>>();
  ds.eval_idx = j.at("eval_idx").get<std::vector<int>>();
  ds.images = blob::load<T>(dir / "images.tblb");
  // split disjointness is a load-time contract, not only a generation-time one
  std::vector<int> seen(static_cast<size_t>(ds.spec.n), 0);
  for (const auto* split : {&ds.train_idx, &ds.aux_idx, &ds.eval_idx})
    for (int idx : *split) {
      if (idx < 0 || idx >= ds.spec.n) throw DataError("split index out of range");
      if (seen[static_cast<size_t>(idx)]++) throw DataError("train/aux/eval splits overlap");
    }
  return ds;
}

}  // namespace splitnas
