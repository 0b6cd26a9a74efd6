#pragma once

// Confusion-matrix segmentation metrics. Rows are ground truth, columns are
// predictions; everything is computed in double.

#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rethseg/config.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw UsageError("confusion matrix needs at least one class");
  }

  [[nodiscard]] std::size_t num_classes() const { return k_; }
  [[nodiscard]] std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }

  /// Pixels whose truth equals ignore_index are skipped.
  void accumulate(std::span<const int> pred, std::span<const int> truth, int ignore_index = 255) {
    if (pred.size() != truth.size()) {
      throw ShapeError("prediction has " + std::to_string(pred.size()) + " pixels, truth has " +
                       std::to_string(truth.size()));
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == ignore_index) continue;
      check_class(truth[i], "truth", i);
      check_class(pred[i], "prediction", i);
      ++counts_[static_cast<std::size_t>(truth[i]) * k_ + static_cast<std::size_t>(pred[i])];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  [[nodiscard]] std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  [[nodiscard]] std::uint64_t row_sum(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < k_; ++j) s += at(k, j);
    return s;
  }
  [[nodiscard]] std::uint64_t col_sum(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += at(i, k);
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  void check_class(int c, const char* which, std::size_t pixel) const {
    if (c < 0 || static_cast<std::size_t>(c) >= k_) {
      throw ShapeError(std::string(which) + " class " + std::to_string(c) + " at pixel " + std::to_string(pixel) +
                       " is outside [0, " + std::to_string(k_) + ")");
    }
  }

  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

namespace detail {

inline void require_scored(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw UsageError("metrics need at least one scored pixel");
}

}  // namespace detail

/// IoU per class; NaN where the class is absent from truth and prediction.
inline std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  detail::require_scored(cm);
  std::vector<double> iou(cm.num_classes());
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    const double tp = static_cast<double>(cm.at(k, k));
    const double denom = static_cast<double>(cm.row_sum(k) + cm.col_sum(k)) - tp;
    iou[k] = denom > 0 ? tp / denom : std::numeric_limits<double>::quiet_NaN();
  }
  return iou;
}

inline std::vector<double> per_class_dice(const ConfusionMatrix& cm) {
  detail::require_scored(cm);
  std::vector<double> dice(cm.num_classes());
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    const double denom = static_cast<double>(cm.row_sum(k) + cm.col_sum(k));
    dice[k] = denom > 0 ? 2.0 * static_cast<double>(cm.at(k, k)) / denom : std::numeric_limits<double>::quiet_NaN();
  }
  return dice;
}

/// Mean over the non-NaN entries.
inline double nan_mean(std::span<const double> values) {
  double sum = 0;
  std::size_t n = 0;
  for (double v : values) {
    if (v == v) {
      sum += v;
      ++n;
    }
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

inline double miou(const ConfusionMatrix& cm) { return nan_mean(per_class_iou(cm)); }
inline double dice(const ConfusionMatrix& cm) { return nan_mean(per_class_dice(cm)); }

/// Mean IoU over the listed classes that occur in truth or prediction.
inline double miou_over(const ConfusionMatrix& cm, std::span<const int> classes) {
  const auto iou = per_class_iou(cm);
  std::vector<double> picked;
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= iou.size()) {
      throw ShapeError("class " + std::to_string(c) + " outside [0, " + std::to_string(iou.size()) + ")");
    }
    picked.push_back(iou[static_cast<std::size_t>(c)]);
  }
  return nan_mean(picked);
}

inline double pixel_acc(const ConfusionMatrix& cm) {
  detail::require_scored(cm);
  std::uint64_t trace = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) trace += cm.at(k, k);
  return static_cast<double>(trace) / static_cast<double>(cm.total());
}

struct MetricReport {
  double miou = 0, pixel_acc = 0, dice = 0;
  std::vector<double> iou;
  std::uint64_t pixels = 0;

  [[nodiscard]] KeyValues to_keyvalues() const {
    KeyValues kv;
    kv.set_number("miou", miou);
    kv.set_number("pixel_acc", pixel_acc);
    kv.set_number("dice", dice);
    kv.set_number("pixels", pixels);
    for (std::size_t k = 0; k < iou.size(); ++k) kv.set_number("iou." + std::to_string(k), iou[k]);
    return kv;
  }

  /// Header plus one row: miou,pixel_acc,dice,pixels,iou_0,...,iou_{K-1}.
  [[nodiscard]] std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "miou,pixel_acc,dice,pixels";
    for (std::size_t k = 0; k < iou.size(); ++k) os << ",iou_" << k;
    os << "\n" << miou << "," << pixel_acc << "," << dice << "," << pixels;
    for (double v : iou) os << "," << v;
    os << "\n";
    return os.str();
  }
};

inline MetricReport make_report(const ConfusionMatrix& cm) {
  return MetricReport{miou(cm), pixel_acc(cm), dice(cm), per_class_iou(cm), cm.total()};
}

}  // namespace rethseg
