#include "cmdm/data/toy_motion.hpp"

#include "cmdm/errors.hpp"
#include "cmdm/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <numbers>

namespace cmdm::data {

namespace {

using nn::Mat;
using Point = Eigen::Vector2d;

constexpr double kZigzagAmplitude = 0.3;
constexpr double kZigzagWavelength = 1.2;
constexpr double kSpiralStartRadius = 0.1;
constexpr double kSpiralGrowth = 0.16;  // radius gained per radian

constexpr int kChordLag = 6;
constexpr double kMinSpeed = 0.1;
constexpr double kLineLateralRms = 0.1;
constexpr double kZigzagConsistency = 0.6;
constexpr double kSpiralRadiusRatio = 1.4;

const char* const kShapeNames[] = {"circle", "line", "zigzag", "spiral"};
const char* const kSpeedNames[] = {"slow", "fast"};

Point local_curve(Shape shape, double u) {
  switch (shape) {
    case Shape::line:
      return {u, 0.0};
    case Shape::circle:
      return {kCircleRadius * std::sin(u / kCircleRadius), kCircleRadius * (1.0 - std::cos(u / kCircleRadius))};
    case Shape::zigzag:
      return {u, kZigzagAmplitude * std::sin(2.0 * std::numbers::pi * u / kZigzagWavelength)};
    case Shape::spiral: {
      const double r = kSpiralStartRadius + kSpiralGrowth * u;
      return {r * std::sin(u), kSpiralStartRadius - r * std::cos(u)};
    }
  }
  return {0.0, 0.0};
}

// Walks the curve in small parameter steps and returns the points at the
// requested (ascending) arc lengths.
std::vector<Point> sample_by_arc_length(Shape shape, const std::vector<double>& targets) {
  constexpr double du = 1e-3;
  std::vector<Point> out;
  out.reserve(targets.size());
  double u = 0.0;
  double s = 0.0;
  Point p = local_curve(shape, 0.0);
  for (double target : targets) {
    while (true) {
      const Point next = local_curve(shape, u + du);
      const double step = (next - p).norm();
      if (s + step >= target) {
        const double frac = step > 0 ? (target - s) / step : 0.0;
        out.push_back(p + frac * (next - p));
        break;
      }
      s += step;
      u += du;
      p = next;
    }
  }
  return out;
}

// Algebraic (Kasa) circle fit; returns the radius.
double fit_circle_radius(const Mat& p) {
  Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
  Eigen::Vector3d b = Eigen::Vector3d::Zero();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Eigen::Vector3d row(p(i, 0), p(i, 1), 1.0);
    const double rhs = -(p(i, 0) * p(i, 0) + p(i, 1) * p(i, 1));
    a += row * row.transpose();
    b += row * rhs;
  }
  const Eigen::Vector3d sol = a.ldlt().solve(b);
  const double r2 = (sol(0) * sol(0) + sol(1) * sol(1)) / 4.0 - sol(2);
  return r2 > 0 ? std::sqrt(r2) : 0.0;
}

double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a < -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

TextCondition ToyCaption::condition() const {
  const auto t = tokens();
  return TextCondition{{t[0], t[1]}, false};
}

std::string ToyCaption::name() const {
  return std::string(kSpeedNames[static_cast<int>(speed)]) + " " + kShapeNames[static_cast<int>(shape)];
}

ToyCaption ToyCaption::from_index(int index) {
  if (index < 0 || index >= kNumCaptions) throw InputError("caption index out of range: " + std::to_string(index));
  return ToyCaption{static_cast<Shape>(index / 2), static_cast<Speed>(index % 2)};
}

ToyCaption ToyCaption::from_tokens(std::span<const int> tokens) {
  if (tokens.size() != 2 || tokens[0] < 0 || tokens[0] > 3 || tokens[1] < 4 || tokens[1] > 5) {
    throw InputError("invalid caption token ids");
  }
  return ToyCaption{static_cast<Shape>(tokens[0]), static_cast<Speed>(tokens[1] - 4)};
}

std::optional<ToyCaption> ToyCaption::parse(const std::string& text) {
  std::string s = lower(text);
  std::replace_if(s.begin(), s.end(), [](char c) { return c == '-' || c == '_' || c == ','; }, ' ');
  std::optional<Shape> shape;
  std::optional<Speed> speed;
  std::size_t pos = 0;
  while (pos < s.size()) {
    while (pos < s.size() && s[pos] == ' ') ++pos;
    std::size_t end = s.find(' ', pos);
    if (end == std::string::npos) end = s.size();
    const std::string word = s.substr(pos, end - pos);
    pos = end;
    if (word.empty()) continue;
    bool matched = false;
    for (int i = 0; i < 4; ++i) {
      if (word == kShapeNames[i]) {
        if (shape) return std::nullopt;
        shape = static_cast<Shape>(i);
        matched = true;
      }
    }
    for (int i = 0; i < 2; ++i) {
      if (word == kSpeedNames[i]) {
        if (speed) return std::nullopt;
        speed = static_cast<Speed>(i);
        matched = true;
      }
    }
    if (!matched) return std::nullopt;
  }
  if (!shape || !speed) return std::nullopt;
  return ToyCaption{*shape, *speed};
}

std::vector<ToyCaption> all_captions() {
  std::vector<ToyCaption> out;
  for (int i = 0; i < kNumCaptions; ++i) out.push_back(ToyCaption::from_index(i));
  return out;
}

double speed_value(Speed s) { return s == Speed::slow ? kSlowSpeed : kFastSpeed; }

void DatasetSpec::validate() const {
  if (frames < 16 || frames % 4 != 0) throw ConfigError("data.frames must be a multiple of 4 and at least 16");
  if (samples_per_caption < 1) throw ConfigError("data.samples_per_caption must be positive");
  if (!(fps > 0)) throw ConfigError("data.fps must be positive");
  if (!(noise_std >= 0)) throw ConfigError("data.noise_std must be non-negative");
}

MotionSequence generate_trajectory(const ToyCaption& caption, int frames, double fps, double noise_std,
                                   std::uint64_t seed) {
  if (frames < 2) throw InputError("generate_trajectory: need at least 2 frames");
  const RngKey key{seed};
  const Point start{key.uniform(DrawKind::data, 0, 0) - 0.5, key.uniform(DrawKind::data, 0, 1) - 0.5};
  const double heading = 2.0 * std::numbers::pi * key.uniform(DrawKind::data, 0, 2);
  const double hand = key.uniform(DrawKind::data, 0, 3) < 0.5 ? -1.0 : 1.0;
  const double v = speed_value(caption.speed);

  std::vector<double> arc(static_cast<std::size_t>(frames) + 1);
  for (int i = 0; i <= frames; ++i) arc[static_cast<std::size_t>(i)] = v * i / fps;
  const std::vector<Point> local = sample_by_arc_length(caption.shape, arc);

  Eigen::Matrix2d rot;
  rot << std::cos(heading), -std::sin(heading), std::sin(heading), std::cos(heading);
  std::vector<Point> pos(local.size());
  for (std::size_t i = 0; i < local.size(); ++i) pos[i] = start + rot * Point(local[i].x(), hand * local[i].y());

  MotionSequence m;
  m.fps = fps;
  m.frames = Mat(frames, 4);
  for (int i = 0; i < frames; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const Point vel = (pos[ui + 1] - pos[ui]) * fps;
    m.frames.row(i) << pos[ui].x(), pos[ui].y(), vel.x(), vel.y();
  }
  if (noise_std > 0) m.frames += key.normal(DrawKind::data, 1, 0, frames, 4) * noise_std;
  return m;
}

std::vector<Sample> build_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.samples_per_caption * kNumCaptions));
  for (const ToyCaption& c : all_captions()) {
    for (int i = 0; i < spec.samples_per_caption; ++i) {
      const std::uint64_t seed = hash_combine(hash_combine(spec.seed, static_cast<std::uint64_t>(c.index())),
                                              static_cast<std::uint64_t>(i));
      out.push_back(Sample{c, generate_trajectory(c, spec.frames, spec.fps, spec.noise_std, seed)});
    }
  }
  return out;
}

OracleFeatures oracle_features(const MotionSequence& x) {
  const int n = x.length();
  if (n < 16 || x.dim() < 2) throw InputError("caption_oracle: need at least 16 frames with 2 position channels");
  const Mat p = x.frames.leftCols(2);

  Mat smooth(n, 2);
  for (int i = 0; i < n; ++i) {
    const int a = std::max(0, i - 2), b = std::min(n - 1, i + 2);
    smooth.row(i) = p.middleRows(a, b - a + 1).colwise().mean();
  }

  OracleFeatures f;
  double path = 0;
  for (int i = 0; i + 1 < n; ++i) path += (smooth.row(i + 1) - smooth.row(i)).norm();
  f.mean_speed = path * x.fps / (n - 1);

  const Eigen::RowVector2d mu = p.colwise().mean();
  const Mat centered = p.rowwise() - mu;
  const Eigen::Matrix2d cov = centered.transpose() * centered / static_cast<double>(n);
  const double tr = cov.trace();
  const double det = cov.determinant();
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
  f.lateral_rms = std::sqrt(std::max(0.0, tr / 2.0 - disc));

  std::vector<double> headings;
  for (int j = 0; (j + 1) * kChordLag < n; ++j) {
    const Eigen::RowVector2d d = smooth.row((j + 1) * kChordLag) - smooth.row(j * kChordLag);
    headings.push_back(std::atan2(d.y(), d.x()));
  }
  std::vector<double> turns;
  for (std::size_t j = 0; j + 1 < headings.size(); ++j) turns.push_back(wrap_angle(headings[j + 1] - headings[j]));
  double net = 0, total = 0;
  for (double t : turns) {
    net += t;
    total += std::abs(t);
  }
  f.turn_consistency = total > 1e-12 ? std::abs(net) / total : 1.0;

  const int half = n / 2;
  const double r_first = fit_circle_radius(smooth.topRows(half));
  const double r_second = fit_circle_radius(smooth.bottomRows(n - half));
  f.radius_ratio = r_first > 1e-12 ? r_second / r_first : 0.0;
  return f;
}

std::optional<ToyCaption> caption_oracle(const MotionSequence& x) {
  const OracleFeatures f = oracle_features(x);
  if (!(f.mean_speed >= kMinSpeed)) return std::nullopt;
  ToyCaption c;
  c.speed = f.mean_speed > std::sqrt(kSlowSpeed * kFastSpeed) ? Speed::fast : Speed::slow;
  if (f.lateral_rms < kLineLateralRms) {
    c.shape = Shape::line;
  } else if (f.turn_consistency < kZigzagConsistency) {
    c.shape = Shape::zigzag;
  } else if (f.radius_ratio > kSpiralRadiusRatio) {
    c.shape = Shape::spiral;
  } else {
    c.shape = Shape::circle;
  }
  return c;
}

}  // namespace cmdm::data
