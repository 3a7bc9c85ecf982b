#include "cmdm/rng.hpp"

#include <cmath>
#include <numbers>

namespace cmdm {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (splitmix64(b) + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2)));
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

namespace {

double to_unit(std::uint64_t bits) {
  // 53 random bits, shifted off zero so log() stays finite.
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace

std::uint64_t RngKey::stream(DrawKind kind, std::int64_t frame, std::int64_t step) const {
  std::uint64_t h = hash_combine(seed, static_cast<std::uint64_t>(kind));
  h = hash_combine(h, static_cast<std::uint64_t>(frame));
  return hash_combine(h, static_cast<std::uint64_t>(step));
}

double RngKey::uniform(DrawKind kind, std::int64_t frame, std::int64_t step, std::uint64_t index) const {
  return to_unit(splitmix64(stream(kind, frame, step) + index * 0xD1B54A32D192ED03ull));
}

std::int64_t RngKey::uniform_int(DrawKind kind, std::int64_t frame, std::int64_t step, std::int64_t lo,
                                 std::int64_t hi) const {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  const std::uint64_t bits = splitmix64(stream(kind, frame, step));
  // Multiply-shift keeps the bias below 2^-64 * span.
  const auto scaled = static_cast<std::uint64_t>((static_cast<unsigned __int128>(bits) * span) >> 64);
  return lo + static_cast<std::int64_t>(scaled);
}

nn::Mat RngKey::normal(DrawKind kind, std::int64_t frame, std::int64_t step, Eigen::Index rows,
                       Eigen::Index cols) const {
  nn::Mat out(rows, cols);
  const std::uint64_t base = stream(kind, frame, step);
  const Eigen::Index n = rows * cols;
  for (Eigen::Index i = 0; i < n; i += 2) {
    const auto pair = static_cast<std::uint64_t>(i / 2);
    const double u1 = to_unit(splitmix64(base + (2 * pair) * 0xD1B54A32D192ED03ull));
    const double u2 = to_unit(splitmix64(base + (2 * pair + 1) * 0xD1B54A32D192ED03ull));
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    out.data()[i] = r * std::cos(a);
    if (i + 1 < n) out.data()[i + 1] = r * std::sin(a);
  }
  return out;
}

}  // namespace cmdm
