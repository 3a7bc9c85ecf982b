#pragma once

// Synthetic caption-conditioned 2-D trajectories. Each caption names a shape
// and a speed; samples differ by placement, heading, handedness and jitter.

#include "cmdm/motion.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cmdm::data {

enum class Shape : int { circle = 0, line = 1, zigzag = 2, spiral = 3 };
enum class Speed : int { slow = 0, fast = 1 };

// Token ids: shapes 0..3, speeds 4..5, null 6.
inline constexpr int kNullToken = 6;
inline constexpr int kVocabSize = 7;
inline constexpr int kNumCaptions = 8;

inline constexpr double kSlowSpeed = 0.75;  // units per second
inline constexpr double kFastSpeed = 1.5;
inline constexpr double kCircleRadius = 0.5;

struct ToyCaption {
  Shape shape = Shape::circle;
  Speed speed = Speed::slow;

  std::array<int, 2> tokens() const { return {static_cast<int>(shape), 4 + static_cast<int>(speed)}; }
  TextCondition condition() const;
  /// 0..7, shape-major.
  int index() const { return 2 * static_cast<int>(shape) + static_cast<int>(speed); }
  std::string name() const;

  static ToyCaption from_index(int index);
  /// Inverse of tokens(); throws InputError on invalid ids.
  static ToyCaption from_tokens(std::span<const int> tokens);
  /// Accepts "fast circle", "circle fast", "circle-fast", "circle_fast".
  static std::optional<ToyCaption> parse(const std::string& text);

  bool operator==(const ToyCaption&) const = default;
};

std::vector<ToyCaption> all_captions();
double speed_value(Speed s);

struct DatasetSpec {
  int samples_per_caption = 64;
  int frames = 64;
  double fps = 20.0;
  double noise_std = 0.01;
  std::uint64_t seed = 7;

  void validate() const;
};

struct Sample {
  ToyCaption caption;
  MotionSequence motion;
};

/// Deterministic trajectory: positions follow the shape at the caption's speed,
/// velocity channels are forward differences of the clean positions (units/s),
/// then every channel receives N(0, noise_std^2) jitter.
MotionSequence generate_trajectory(const ToyCaption& caption, int frames, double fps, double noise_std,
                                   std::uint64_t seed);

std::vector<Sample> build_dataset(const DatasetSpec& spec);

/// Summary statistics the classifier decides on; exposed for calibration tests.
struct OracleFeatures {
  double mean_speed = 0;
  double lateral_rms = 0;     // sqrt of the minor principal variance of positions
  double turn_consistency = 0;  // |net turning| / total turning
  double radius_ratio = 0;    // fitted circle radius, second half / first half
};

OracleFeatures oracle_features(const MotionSequence& x);

/// Shape and speed classifier on positions. nullopt means unclassifiable
/// (motion too small to carry a shape).
std::optional<ToyCaption> caption_oracle(const MotionSequence& x);

}  // namespace cmdm::data
