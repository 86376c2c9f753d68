#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabdu/dtf.hpp"
#include "dabdu/rng.hpp"

namespace dabdu::data {

enum class Split : std::uint64_t { Train = 0, Val = 1 };

inline std::string split_name(Split s) { return s == Split::Train ? "train" : "val"; }

/// Synthetic lesion images: smooth background, elliptical bright blobs,
/// additive Gaussian noise.
struct DatasetSpec {
  std::size_t n_train = 200;
  std::size_t n_val = 40;
  std::size_t size = 32;
  std::size_t blobs_min = 1;
  std::size_t blobs_max = 3;
  double radius_min = 3.0;
  double radius_max = 6.0;
  double contrast = 0.3;
  double noise = 0.08;
  std::uint64_t seed = 2024;

  void validate() const {
    if (size < 1) throw ConfigError("image size must be positive");
    if (blobs_min > blobs_max) throw ConfigError("blob count range is empty");
    if (!(radius_min > 0.0) || radius_min > radius_max) throw ConfigError("radius range must satisfy 0 < min <= max");
    if (2.0 * radius_max > static_cast<double>(size)) {
      throw ConfigError("radius " + std::to_string(radius_max) + " does not fit a " + std::to_string(size) +
                        "-pixel image");
    }
    if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
  }

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DatasetSpec, n_train, n_val, size, blobs_min, blobs_max, radius_min, radius_max,
                                   contrast, noise, seed)

struct Ellipse {
  double cx, cy, rx, ry, angle;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Ellipse, cx, cy, rx, ry, angle)

struct Sample {
  Tensor image;  // [1,H,W] in [0,1]
  Tensor mask;   // [1,H,W] in {0,1}
  std::uint64_t seed = 0;
  std::size_t index = 0;
  std::vector<Ellipse> blobs;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

// Distinct (split, index) pairs map to distinct salts, so the two splits never
// share a generation stream.
inline std::uint64_t sample_seed(std::uint64_t master, Split split, std::size_t index) {
  return derive_seed(master, (static_cast<std::uint64_t>(split) << 40) ^ index);
}

enum Stream : std::uint64_t { kBackground = 1, kBlobs = 2, kNoise = 3 };

/// 0.4 plus three low-frequency sinusoids of amplitude <= 0.05.
inline std::vector<double> background_field(std::uint64_t seed, std::size_t size) {
  Rng rng(derive_seed(seed, kBackground));
  struct Wave {
    double amp, fx, fy, phase;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k) {
    waves.push_back({rng.uniform(0.0, 0.05), static_cast<double>(rng.uniform_int(0, 2)),
                     static_cast<double>(rng.uniform_int(0, 2)), rng.uniform(0.0, 2.0 * std::numbers::pi)});
  }
  std::vector<double> field(size * size);
  const double n = static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double v = 0.4;
      for (const auto& w : waves) {
        v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y)) / n + w.phase);
      }
      field[y * size + x] = v;
    }
  }
  return field;
}

inline bool inside(const Ellipse& e, double px, double py) {
  const double dx = px - e.cx, dy = py - e.cy;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double u = (dx * c + dy * s) / e.rx, v = (-dx * s + dy * c) / e.ry;
  return u * u + v * v <= 1.0;
}

inline Sample generate_sample(const DatasetSpec& spec, Split split, std::size_t index) {
  spec.validate();
  Sample s;
  s.index = index;
  s.seed = sample_seed(spec.seed, split, index);
  const std::size_t n = spec.size;

  Rng blob_rng(derive_seed(s.seed, kBlobs));
  const auto count = static_cast<std::size_t>(
      blob_rng.uniform_int(static_cast<std::int64_t>(spec.blobs_min), static_cast<std::int64_t>(spec.blobs_max)));
  for (std::size_t b = 0; b < count; ++b) {
    Ellipse e{};
    e.rx = blob_rng.uniform(spec.radius_min, spec.radius_max);
    e.ry = blob_rng.uniform(spec.radius_min, spec.radius_max);
    e.angle = blob_rng.uniform(0.0, std::numbers::pi);
    const double margin = std::max(e.rx, e.ry);
    e.cx = blob_rng.uniform(margin, static_cast<double>(n) - margin);
    e.cy = blob_rng.uniform(margin, static_cast<double>(n) - margin);
    s.blobs.push_back(e);
  }

  std::vector<double> image = background_field(s.seed, n);
  std::vector<double> mask(n * n, 0.0);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      for (const auto& e : s.blobs) {
        if (inside(e, px, py)) {
          mask[y * n + x] = 1.0;
          break;
        }
      }
    }
  }
  Rng noise_rng(derive_seed(s.seed, kNoise));
  for (std::size_t i = 0; i < image.size(); ++i) {
    double v = image[i] + spec.contrast * mask[i];
    if (spec.noise > 0.0) v += spec.noise * noise_rng.normal();
    image[i] = std::clamp(v, 0.0, 1.0);
  }
  s.image = Tensor({1, n, n}, std::move(image));
  s.mask = Tensor({1, n, n}, std::move(mask));
  return s;
}

inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d{spec, {}, {}};
  for (std::size_t i = 0; i < spec.n_train; ++i) d.train.push_back(generate_sample(spec, Split::Train, i));
  for (std::size_t i = 0; i < spec.n_val; ++i) d.val.push_back(generate_sample(spec, Split::Val, i));
  return d;
}

// ---------------------------------------------------------------------------
// Files

inline std::string pgm_bytes(std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw ShapeError("PGM pixel count does not match extents");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (double v : values) out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const Tensor& plane) {
  const std::size_t h = plane.dim(plane.rank() - 2), w = plane.dim(plane.rank() - 1);
  dtf::detail::spit(path, pgm_bytes(plane.values(), h, w));
}

/// Image with the boundary of a binary prediction drawn in white. A boundary
/// pixel is foreground with a 4-neighbour that is background or off-image.
inline void write_overlay_pgm(const std::filesystem::path& path, const Tensor& image, const Tensor& pred) {
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (pred.numel() != h * w) throw ShapeError("overlay prediction does not match image extents");
  const auto img = image.values();
  const auto p = pred.values();
  std::vector<double> out(img.begin(), img.end());
  auto fg = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return false;
    return p[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] == 1.0;
  };
  for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(h); ++y) {
    for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(w); ++x) {
      if (fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))) {
        out[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = 1.0;
      }
    }
  }
  dtf::detail::spit(path, pgm_bytes(out, h, w));
}

inline std::filesystem::path image_path(const std::filesystem::path& dir, std::size_t index) {
  return dir / (std::to_string(index) + ".img.dtf");
}

inline std::filesystem::path mask_path(const std::filesystem::path& dir, std::size_t index) {
  return dir / (std::to_string(index) + ".mask.dtf");
}

inline void write_sample(const std::filesystem::path& dir, const Sample& s, bool emit_pgm = false) {
  dtf::write_tensor(image_path(dir, s.index), s.image);
  dtf::write_tensor(mask_path(dir, s.index), s.mask);
  if (emit_pgm) {
    write_pgm(dir / (std::to_string(s.index) + ".img.pgm"), s.image);
    write_pgm(dir / (std::to_string(s.index) + ".mask.pgm"), s.mask);
  }
}

/// Both files are decoded before anything is returned.
inline Sample read_sample(const std::filesystem::path& dir, std::size_t index) {
  Sample s;
  s.index = index;
  s.image = dtf::read_tensor(image_path(dir, index));
  s.mask = dtf::read_tensor(mask_path(dir, index));
  if (s.image.shape() != s.mask.shape()) {
    throw FormatError("image and mask " + std::to_string(index) + " differ in shape", 0);
  }
  return s;
}

// Indices of every "<index>.img.dtf" in `dir`, ascending.
inline std::vector<std::size_t> list_indices(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a dataset directory: " + dir.string());
  std::vector<std::size_t> out;
  const std::string suffix = ".img.dtf";
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() <= suffix.size() || !name.ends_with(suffix)) continue;
    const std::string stem = name.substr(0, name.size() - suffix.size());
    std::size_t index = 0;
    const auto [ptr, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), index);
    if (ec == std::errc{} && ptr == stem.data() + stem.size()) out.push_back(index);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<Sample> read_split(const std::filesystem::path& dir) {
  std::vector<Sample> out;
  for (auto index : list_indices(dir)) out.push_back(read_sample(dir, index));
  return out;
}

inline void write_dataset(const std::filesystem::path& root, const Dataset& d, bool emit_pgm = false) {
  for (const auto& s : d.train) write_sample(root / "train", s, emit_pgm);
  for (const auto& s : d.val) write_sample(root / "val", s, emit_pgm);
  auto meta = [](const std::vector<Sample>& split) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : split) arr.push_back({{"index", s.index}, {"seed", s.seed}, {"blobs", s.blobs}});
    return arr;
  };
  nlohmann::json manifest{{"spec", d.spec}, {"train", meta(d.train)}, {"val", meta(d.val)}};
  dtf::detail::spit(root / "dataset.json", manifest.dump(2) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& root) {
  Dataset d;
  const auto manifest = root / "dataset.json";
  if (std::filesystem::exists(manifest)) {
    auto j = nlohmann::json::parse(dtf::detail::slurp(manifest), nullptr, false);
    if (j.is_discarded()) throw FormatError("dataset.json is not valid JSON", 0);
    d.spec = j.at("spec").get<DatasetSpec>();
  }
  d.train = read_split(root / "train");
  d.val = read_split(root / "val");
  return d;
}

}  // namespace dabdu::data
