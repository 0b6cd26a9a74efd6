#pragma once

// Synthetic co-occurrence segmentation benchmark, PPM/PGM sample IO and the
// training-time geometric augmentation.
//
// Blob classes 1..K-1 are grouped: each texture pair forms one group, every
// other class is a group of its own. All classes of a group share one
// texture, so a paired blob is told apart only by its surroundings: its label
// is decided by the group of the nearest blob belonging to another group.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rethseg/config.hpp"
#include "rethseg/rng.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

/// Missing, unreadable or malformed dataset files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kIgnoreIndex = 255;

struct SegSample {
  Tensor<double> image;   // (H, W, 3), values in [0, 1]
  std::vector<int> mask;  // H*W row-major class ids, or kIgnoreIndex
  [[nodiscard]] std::size_t height() const { return image.dim(0); }
  [[nodiscard]] std::size_t width() const { return image.dim(1); }
};

struct CoOccurrenceSpec {
  std::size_t num_classes = 6;
  std::size_t grid = 3;       // blobs are placed in a grid x grid layout of cells
  double occupancy = 0.85;    // probability that a cell holds a blob
  std::vector<std::pair<int, int>> texture_pairs{{2, 3}, {4, 5}};
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;

  friend bool operator==(const CoOccurrenceSpec&, const CoOccurrenceSpec&) = default;

  void validate() const {
    if (num_classes < 4) throw DataError("co-occurrence spec needs at least 4 classes");
    if (num_classes > 255) throw DataError("class ids must fit below the ignore index 255");
    if (grid == 0 || height / grid < 8 || width / grid < 8) throw DataError("grid cells must be at least 8 pixels");
    if (!(occupancy > 0 && occupancy <= 1)) throw DataError("occupancy must lie in (0, 1]");
    if (!(noise_sigma >= 0)) throw DataError("noise_sigma must be non-negative");
    std::vector<bool> used(num_classes, false);
    for (const auto& [a, b] : texture_pairs) {
      for (int c : {a, b}) {
        if (c < 1 || static_cast<std::size_t>(c) >= num_classes) {
          throw DataError("texture pair class " + std::to_string(c) + " is not a blob class in [1, " +
                          std::to_string(num_classes) + ")");
        }
        if (used[c]) throw DataError("class " + std::to_string(c) + " appears in more than one texture pair");
        used[c] = true;
      }
      if (a == b) throw DataError("texture pair repeats class " + std::to_string(a));
    }
  }

  [[nodiscard]] KeyValues to_keyvalues() const {
    KeyValues kv;
    kv.set_number("num_classes", num_classes);
    kv.set_number("grid", grid);
    kv.set_number("occupancy", occupancy);
    std::string pairs;
    for (const auto& [a, b] : texture_pairs) {
      if (!pairs.empty()) pairs += ",";
      pairs += std::to_string(a) + ":" + std::to_string(b);
    }
    kv.set("texture_pairs", pairs.empty() ? "none" : pairs);
    kv.set_number("noise_sigma", noise_sigma);
    kv.set_number("seed", seed);
    kv.set_number("height", height);
    kv.set_number("width", width);
    return kv;
  }

  static CoOccurrenceSpec from_keyvalues(const KeyValues& kv) {
    CoOccurrenceSpec s;
    s.num_classes = kv.number_or<std::size_t>("num_classes", s.num_classes);
    s.grid = kv.number_or<std::size_t>("grid", s.grid);
    s.occupancy = kv.number_or<double>("occupancy", s.occupancy);
    s.noise_sigma = kv.number_or<double>("noise_sigma", s.noise_sigma);
    s.seed = kv.number_or<std::uint64_t>("seed", s.seed);
    s.height = kv.number_or<std::size_t>("height", s.height);
    s.width = kv.number_or<std::size_t>("width", s.width);
    if (kv.contains("texture_pairs")) {
      s.texture_pairs.clear();
      const std::string text = kv.get("texture_pairs");
      if (text != "none") {
        for (const std::string& item : split(text, ',')) {
          const auto parts = split(item, ':');
          if (parts.size() != 2) throw ConfigError("texture pair '" + item + "' is not of the form a:b");
          KeyValues tmp;
          tmp.set("a", parts[0]);
          tmp.set("b", parts[1]);
          s.texture_pairs.emplace_back(tmp.number<int>("a"), tmp.number<int>("b"));
        }
      }
    }
    s.validate();
    return s;
  }

  /// Texture group of every class; 0 is the background, groups are numbered
  /// from 1 in order of their smallest class.
  [[nodiscard]] std::vector<int> class_groups() const {
    std::vector<int> group(num_classes, -1);
    group[0] = 0;
    int next = 1;
    for (std::size_t c = 1; c < num_classes; ++c) {
      if (group[c] >= 0) continue;
      group[c] = next;
      for (const auto& [a, b] : texture_pairs) {
        if (a == static_cast<int>(c)) group[b] = next;
        if (b == static_cast<int>(c)) group[a] = next;
      }
      ++next;
    }
    return group;
  }

  /// Member classes of each group, ascending.
  [[nodiscard]] std::vector<std::vector<int>> group_members() const {
    const auto group = class_groups();
    std::vector<std::vector<int>> members(*std::max_element(group.begin(), group.end()) + 1);
    for (std::size_t c = 0; c < num_classes; ++c) members[group[c]].push_back(static_cast<int>(c));
    return members;
  }

  /// Classes that share their texture with another class.
  [[nodiscard]] std::vector<int> paired_classes() const {
    std::vector<int> out;
    for (const auto& [a, b] : texture_pairs) {
      out.push_back(a);
      out.push_back(b);
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Colour of texture group `group` at absolute pixel (y, x); group 0 is the
/// flat gray background.
inline std::array<double, 3> texture_color(int group, long y, long x) {
  if (group == 0) return {0.5, 0.5, 0.5};
  static constexpr std::array<std::array<double, 3>, 8> palette{{{0.90, 0.25, 0.20},
                                                                 {0.20, 0.80, 0.30},
                                                                 {0.25, 0.35, 0.95},
                                                                 {0.95, 0.85, 0.20},
                                                                 {0.75, 0.30, 0.85},
                                                                 {0.20, 0.85, 0.85},
                                                                 {0.95, 0.55, 0.15},
                                                                 {0.60, 0.60, 0.95}}};
  const auto& base = palette[(group - 1) % palette.size()];
  const long py = ((y % 4) + 4) % 4 / 2, px = ((x % 4) + 4) % 4 / 2;
  bool on = false;
  switch ((group - 1) % 3) {
    case 0: on = py == 0; break;          // horizontal stripes
    case 1: on = px == 0; break;          // vertical stripes
    default: on = (py + px) % 2 == 0;     // checkerboard
  }
  const double k = on ? 1.0 : 0.45;
  return {base[0] * k, base[1] * k, base[2] * k};
}

struct Blob {
  double cy = 0, cx = 0, radius = 0;
  int group = 0;
  int label = 0;
};

namespace detail {

inline std::uint64_t sample_seed(const CoOccurrenceSpec& spec, std::uint64_t index) {
  return mix_seed(spec.seed, index);
}

}  // namespace detail

/// Blob placement and labels of sample `index`.
inline std::vector<Blob> generate_layout(const CoOccurrenceSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(detail::sample_seed(spec, index));
  const auto members = spec.group_members();
  const int groups = static_cast<int>(members.size()) - 1;
  const double cell_h = static_cast<double>(spec.height) / static_cast<double>(spec.grid);
  const double cell_w = static_cast<double>(spec.width) / static_cast<double>(spec.grid);
  const double cell = std::min(cell_h, cell_w);
  std::vector<Blob> blobs;
  for (std::size_t gy = 0; gy < spec.grid; ++gy) {
    for (std::size_t gx = 0; gx < spec.grid; ++gx) {
      const bool occupied = rng.bernoulli(spec.occupancy);
      Blob b;
      b.radius = rng.uniform(0.22 * cell, 0.36 * cell);
      const double jitter_y = cell_h / 2 - b.radius - 1, jitter_x = cell_w / 2 - b.radius - 1;
      b.cy = (static_cast<double>(gy) + 0.5) * cell_h - 0.5 + rng.uniform(-jitter_y, jitter_y);
      b.cx = (static_cast<double>(gx) + 0.5) * cell_w - 0.5 + rng.uniform(-jitter_x, jitter_x);
      b.group = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(groups)));
      if (occupied) blobs.push_back(b);
    }
  }
  // Context needs at least two groups.
  if (blobs.size() >= 2 && std::all_of(blobs.begin(), blobs.end(), [&](const Blob& b) { return b.group == blobs[0].group; })) {
    blobs.back().group = 1 + (blobs[0].group + static_cast<int>(rng.below(static_cast<std::uint64_t>(groups - 1)))) % groups;
  }
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const auto& own = members[blobs[i].group];
    if (own.size() == 1) {
      blobs[i].label = own[0];
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    int context = -1;
    for (std::size_t j = 0; j < blobs.size(); ++j) {
      if (blobs[j].group == blobs[i].group) continue;
      const double d = std::hypot(blobs[i].cy - blobs[j].cy, blobs[i].cx - blobs[j].cx);
      if (d < best) {
        best = d;
        context = blobs[j].group;
      }
    }
    // Rank of the context group among the groups other than the blob's own.
    const int rank = context < 0 ? 0 : context - 1 - (context > blobs[i].group ? 1 : 0);
    blobs[i].label = own[static_cast<std::size_t>(rank) % own.size()];
  }
  return blobs;
}

/// Renders blobs over the background, then adds clamped Gaussian noise.
inline SegSample generate_sample(const CoOccurrenceSpec& spec, std::uint64_t index) {
  const auto blobs = generate_layout(spec, index);
  const std::size_t h = spec.height, w = spec.width;
  SegSample s{Tensor<double>({h, w, 3}), std::vector<int>(h * w, 0)};
  std::vector<int> group(h * w, 0);
  for (const Blob& b : blobs) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
        if (dy * dy + dx * dx <= b.radius * b.radius) {
          s.mask[y * w + x] = b.label;
          group[y * w + x] = b.group;
        }
      }
    }
  }
  Rng noise(mix_seed(detail::sample_seed(spec, index), 1));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto c = texture_color(group[y * w + x], static_cast<long>(y), static_cast<long>(x));
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = c[ch];
        if (spec.noise_sigma > 0) v = std::clamp(v + spec.noise_sigma * noise.normal(), 0.0, 1.0);
        s.image.at(y, x, ch) = v;
      }
    }
  }
  return s;
}

/// Classifies every pixel by the class whose clean texture best matches the
/// k x k window around it (sum of squared differences, edge-clamped window,
/// ties to the lower class). It only sees local appearance, so paired classes
/// always collapse onto the lower member.
inline std::vector<int> window_oracle_predict(const CoOccurrenceSpec& spec, const Tensor<double>& image,
                                              int window = 9) {
  const auto group = spec.class_groups();
  const long h = static_cast<long>(image.dim(0)), w = static_cast<long>(image.dim(1)), r = window / 2;
  std::vector<int> out(static_cast<std::size_t>(h * w), 0);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double best = std::numeric_limits<double>::infinity();
      int best_class = 0;
      for (std::size_t c = 0; c < spec.num_classes; ++c) {
        double sse = 0;
        for (long dy = -r; dy <= r; ++dy) {
          for (long dx = -r; dx <= r; ++dx) {
            const long yy = std::clamp(y + dy, 0L, h - 1), xx = std::clamp(x + dx, 0L, w - 1);
            const auto t = texture_color(group[c], yy, xx);
            for (std::size_t ch = 0; ch < 3; ++ch) {
              const double d = image.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), ch) - t[ch];
              sse += d * d;
            }
          }
        }
        if (sse < best) {
          best = sse;
          best_class = static_cast<int>(c);
        }
      }
      out[static_cast<std::size_t>(y * w + x)] = best_class;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  double theta_deg = 0;
  double zoom = 1;
  bool flip = false;
  std::size_t crop_y = 0, crop_x = 0;
};

inline AugmentParams draw_augment(Rng& rng, std::size_t height, std::size_t width, std::size_t crop_h,
                                  std::size_t crop_w) {
  if (crop_h > height || crop_w > width || crop_h == 0 || crop_w == 0) {
    throw ShapeError("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) + " does not fit in sample " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  AugmentParams p;
  p.theta_deg = rng.uniform(-15.0, 15.0);
  p.zoom = rng.uniform(0.8, 1.2);
  p.flip = rng.bernoulli(0.5);
  p.crop_y = rng.below(height - crop_h + 1);
  p.crop_x = rng.below(width - crop_w + 1);
  return p;
}

/// Rotation and zoom about the image centre, then horizontal flip, then the
/// crop. Output pixels map back through the inverse transform; the image is
/// sampled bilinearly (zero outside), the mask by nearest neighbour with
/// kIgnoreIndex outside.
inline SegSample apply_augment(const SegSample& s, const AugmentParams& p, std::size_t crop_h, std::size_t crop_w) {
  const std::size_t h = s.height(), w = s.width(), ch = s.image.dim(2);
  if (crop_h > h || crop_w > w || p.crop_y + crop_h > h || p.crop_x + crop_w > w) {
    throw ShapeError("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) + " at (" +
                     std::to_string(p.crop_y) + "," + std::to_string(p.crop_x) + ") does not fit in sample " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double theta = p.theta_deg * 3.14159265358979323846 / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const bool identity_geometry = p.theta_deg == 0 && p.zoom == 1;
  SegSample out{Tensor<double>({crop_h, crop_w, ch}), std::vector<int>(crop_h * crop_w, kIgnoreIndex)};
  for (std::size_t y = 0; y < crop_h; ++y) {
    for (std::size_t x = 0; x < crop_w; ++x) {
      const double ty = static_cast<double>(y + p.crop_y);
      double tx = static_cast<double>(x + p.crop_x);
      if (p.flip) tx = static_cast<double>(w) - 1 - tx;
      double sy = ty, sx = tx;
      if (!identity_geometry) {
        const double dy = (ty - cy) / p.zoom, dx = (tx - cx) / p.zoom;
        sy = cy + cos_t * dy + sin_t * dx;
        sx = cx - sin_t * dy + cos_t * dx;
      }
      const long ny = std::lround(sy), nx = std::lround(sx);
      if (ny >= 0 && nx >= 0 && ny < static_cast<long>(h) && nx < static_cast<long>(w)) {
        out.mask[y * crop_w + x] = s.mask[static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx)];
      }
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double wy = sy - fy, wx = sx - fx;
      for (std::size_t c = 0; c < ch; ++c) {
        double v = 0;
        for (int a = 0; a < 2; ++a) {
          for (int b = 0; b < 2; ++b) {
            const double weight = (a ? wy : 1 - wy) * (b ? wx : 1 - wx);
            if (weight == 0) continue;
            const long yy = static_cast<long>(fy) + a, xx = static_cast<long>(fx) + b;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            v += weight * s.image.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
          }
        }
        out.image.at(y, x, c) = v;
      }
    }
  }
  return out;
}

inline SegSample augment(const SegSample& s, Rng& rng, std::size_t crop_h, std::size_t crop_w) {
  return apply_augment(s, draw_augment(rng, s.height(), s.width(), crop_h, crop_w), crop_h, crop_w);
}

// ---------------------------------------------------------------------------
// Binary PPM (P6) images and PGM (P5) masks, maxval 255.

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::string& header, const std::vector<unsigned char>& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw DataError("write failed for '" + path + "'");
}

struct NetpbmImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;
};

class NetpbmParser {
 public:
  NetpbmParser(const std::vector<unsigned char>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  NetpbmImage parse(const char* magic, std::size_t channels) {
    if (bytes_.size() < 2 || bytes_[0] != magic[0] || bytes_[1] != magic[1]) {
      fail(0, std::string("expected magic '") + magic + "'");
    }
    pos_ = 2;
    NetpbmImage img;
    img.channels = channels;
    img.width = number();
    img.height = number();
    const std::size_t maxval = number();
    if (maxval != 255) fail(pos_, "unsupported maxval " + std::to_string(maxval));
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail(pos_, "expected whitespace after header");
    ++pos_;
    if (img.width == 0 || img.height == 0) fail(pos_, "zero image extent");
    const std::size_t need = img.width * img.height * channels;
    if (bytes_.size() - pos_ < need) {
      fail(bytes_.size(), "truncated pixel data: expected " + std::to_string(need) + " bytes, found " +
                              std::to_string(bytes_.size() - pos_));
    }
    img.pixels.assign(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + need));
    return img;
  }

 private:
  [[noreturn]] void fail(std::size_t offset, const std::string& what) const {
    throw DataError("'" + path_ + "' at byte " + std::to_string(offset) + ": " + what);
  }

  std::size_t number() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
    if (pos_ >= bytes_.size()) fail(pos_, "unexpected end of header");
    if (!std::isdigit(bytes_[pos_])) fail(pos_, "expected a decimal number in header");
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1u << 24)) fail(pos_, "header number too large");
      ++pos_;
    }
    return v;
  }

  const std::vector<unsigned char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

inline void save_image_ppm(const std::string& path, const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("PPM images are (H,W,3), got " + to_string(image.shape()));
  std::vector<unsigned char> body(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) body[i] = detail::quantize(image[i]);
  detail::write_bytes(path, "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n",
                      body);
}

inline void save_mask_pgm(const std::string& path, const std::vector<int>& mask, std::size_t height,
                          std::size_t width) {
  if (mask.size() != height * width) throw ShapeError("mask size does not match " + std::to_string(height) + "x" +
                                                      std::to_string(width));
  std::vector<unsigned char> body(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] > 255) throw DataError("mask value " + std::to_string(mask[i]) + " does not fit a byte");
    body[i] = static_cast<unsigned char>(mask[i]);
  }
  detail::write_bytes(path, "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n", body);
}

inline Tensor<double> load_image_ppm(const std::string& path) {
  const auto bytes = detail::read_bytes(path);
  const auto img = detail::NetpbmParser(bytes, path).parse("P6", 3);
  Tensor<double> t({img.height, img.width, 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = img.pixels[i] / 255.0;
  return t;
}

/// Returns the mask and its (height, width).
inline std::pair<std::vector<int>, std::pair<std::size_t, std::size_t>> load_mask_pgm(const std::string& path) {
  const auto bytes = detail::read_bytes(path);
  const auto img = detail::NetpbmParser(bytes, path).parse("P5", 1);
  return {std::vector<int>(img.pixels.begin(), img.pixels.end()), {img.height, img.width}};
}

inline void save_sample(const std::string& image_path, const std::string& mask_path, const SegSample& s) {
  save_image_ppm(image_path, s.image);
  save_mask_pgm(mask_path, s.mask, s.height(), s.width());
}

inline SegSample load_sample(const std::string& image_path, const std::string& mask_path) {
  SegSample s{load_image_ppm(image_path), {}};
  auto [mask, extent] = load_mask_pgm(mask_path);
  if (extent.first != s.height() || extent.second != s.width()) {
    throw DataError("'" + mask_path + "' is " + std::to_string(extent.first) + "x" + std::to_string(extent.second) +
                    " but its image is " + std::to_string(s.height()) + "x" + std::to_string(s.width()));
  }
  s.mask = std::move(mask);
  return s;
}

// ---------------------------------------------------------------------------
// Dataset directories: root/{train,val,test}/img_%05d.ppm + msk_%05d.pgm, with
// the generating spec in root/spec.txt.

inline std::string sample_file(const std::filesystem::path& dir, const char* stem, std::size_t i, const char* ext) {
  char name[32];
  std::snprintf(name, sizeof name, "%s_%05zu.%s", stem, i, ext);
  return (dir / name).string();
}

struct SplitCounts {
  std::size_t train = 400, val = 50, test = 100;
};

/// Sample indices of the three splits are disjoint and consecutive.
inline void write_dataset(const std::filesystem::path& root, const CoOccurrenceSpec& spec, const SplitCounts& counts) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw DataError("cannot create '" + root.string() + "': " + ec.message());
  {
    std::ofstream out(root / "spec.txt");
    if (!out) throw DataError("cannot write '" + (root / "spec.txt").string() + "'");
    out << spec.to_keyvalues().dump();
  }
  std::uint64_t index = 0;
  for (const auto& [split, count] : {std::pair{"train", counts.train}, {"val", counts.val}, {"test", counts.test}}) {
    const auto dir = root / split;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());
    for (std::size_t i = 0; i < count; ++i, ++index) {
      save_sample(sample_file(dir, "img", i, "ppm"), sample_file(dir, "msk", i, "pgm"), generate_sample(spec, index));
    }
  }
}

inline CoOccurrenceSpec load_dataset_spec(const std::filesystem::path& root) {
  const auto path = root / "spec.txt";
  if (!std::filesystem::exists(path)) throw DataError("dataset spec '" + path.string() + "' not found");
  try {
    return CoOccurrenceSpec::from_keyvalues(KeyValues::load(path.string()));
  } catch (const ConfigError& e) {
    throw DataError(std::string("dataset spec: ") + e.what());
  }
}

/// Loads img_00000.ppm, img_00001.ppm, ... until the first gap.
inline std::vector<SegSample> load_split(const std::filesystem::path& root, const std::string& split) {
  const auto dir = root / split;
  if (!std::filesystem::is_directory(dir)) throw DataError("split directory '" + dir.string() + "' not found");
  std::vector<SegSample> samples;
  for (std::size_t i = 0;; ++i) {
    const std::string img = sample_file(dir, "img", i, "ppm");
    if (!std::filesystem::exists(img)) break;
    samples.push_back(load_sample(img, sample_file(dir, "msk", i, "pgm")));
  }
  if (samples.empty()) throw DataError("split '" + dir.string() + "' holds no samples");
  return samples;
}

}  // namespace rethseg
