#ifndef SPINELAB_LABELS_HPP_
#define SPINELAB_LABELS_HPP_

#include <array>
#include <string>

#include "spinelab/error.hpp"

namespace spinelab {

// Channel convention: 0 is background, 1..24 are C1..C7, T1..T12, L1..L5 in
// cranio-caudal order.
constexpr int kNumChannels = 25;
constexpr int kNumVertebrae = 24;

/// One vertebra label (or background), identified by its channel index.
class VertebraLabel {
 public:
  VertebraLabel() : index_(0) {}

  static VertebraLabel from_index(int index) {
    if (index < 0 || index >= kNumChannels)
      throw RangeError("vertebra index out of range: " + std::to_string(index));
    VertebraLabel l;
    l.index_ = index;
    return l;
  }

  static VertebraLabel from_name(const std::string& name) {
    const auto& names = all_names();
    for (int i = 0; i < kNumChannels; ++i) {
      if (names[static_cast<size_t>(i)] == name) return from_index(i);
    }
    throw FormatError("unknown vertebra label: '" + name + "'");
  }

  static VertebraLabel background() { return from_index(0); }

  int index() const { return index_; }
  const std::string& name() const {
    return all_names()[static_cast<size_t>(index_)];
  }
  bool is_background() const { return index_ == 0; }

  bool operator==(const VertebraLabel& o) const { return index_ == o.index_; }
  bool operator!=(const VertebraLabel& o) const { return index_ != o.index_; }
  bool operator<(const VertebraLabel& o) const { return index_ < o.index_; }

  static const std::array<std::string, kNumChannels>& all_names() {
    static const std::array<std::string, kNumChannels> names = {
        "BG",  "C1",  "C2",  "C3",  "C4",  "C5", "C6", "C7", "T1",
        "T2",  "T3",  "T4",  "T5",  "T6",  "T7", "T8", "T9", "T10",
        "T11", "T12", "L1",  "L2",  "L3",  "L4", "L5"};
    return names;
  }

 private:
  int index_;
};

/// Heatmap channel of a label; inverse of channel_to_label.
inline int label_to_channel(const VertebraLabel& label) { return label.index(); }

inline VertebraLabel channel_to_label(int channel) {
  return VertebraLabel::from_index(channel);
}

}  // namespace spinelab

#endif  // SPINELAB_LABELS_HPP_
