#pragma once

// Procedural (prompt, motion) pairs on a six-joint toy skeleton.
//
// Feature layout per frame (D = 21):
//   [0]      root height above the standing pose, metres
//   [1], [2] root planar velocity (x, z), metres per frame
//   [3 + 3j .. 5 + 3j] offset of joint j relative to the root
//
// Repetitive actions (jump, wave, squat) are trains of raised-cosine bumps
// centred on integer frames, so each repetition has exactly one strict
// maximum in its driving feature curve.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mclr/error.hpp"
#include "mclr/rng.hpp"
#include "mclr/tensor.hpp"

namespace mclr {

inline constexpr int kJoints = 6;
inline constexpr int kFeatureDim = 3 + 3 * kJoints;
inline constexpr int kFps = 20;
inline constexpr int kMinFrames = 16;
inline constexpr int kMaxFrames = 200;
inline constexpr int kBlendFrames = 4;
inline constexpr double kJumpHeight = 0.3;
inline constexpr double kPelvisHeight = 0.95;

enum Joint : int { kRoot = 0, kHead = 1, kLeftHand = 2, kRightHand = 3, kLeftFoot = 4, kRightFoot = 5 };

// Column of joint j's offset component c (0 = x, 1 = y, 2 = z).
constexpr int offset_column(int joint, int component) { return 3 + 3 * joint + component; }

struct Skeleton {
  std::vector<std::string> joint_names;
  std::vector<int> parent_index;

  static Skeleton desk() {
    return {{"root", "head", "left_hand", "right_hand", "left_foot", "right_foot"}, {-1, 0, 0, 0, 0, 0}};
  }
};

struct MotionSequence {
  int fps = kFps;
  MatF features;  // frames x kFeatureDim

  int frames() const { return static_cast<int>(features.rows()); }
};

enum class Action { walk, run, jump, wave, squat, sit, stand };

inline const char* to_string(Action a) {
  switch (a) {
    case Action::walk: return "walk";
    case Action::run: return "run";
    case Action::jump: return "jump";
    case Action::wave: return "wave";
    case Action::squat: return "squat";
    case Action::sit: return "sit";
    case Action::stand: return "stand";
  }
  return "?";
}

inline Action action_from_string(const std::string& s) {
  for (Action a : {Action::walk, Action::run, Action::jump, Action::wave, Action::squat, Action::sit, Action::stand}) {
    if (s == to_string(a)) return a;
  }
  throw RangeError("unknown action '" + s + "'");
}

struct ActionSpec {
  Action action = Action::stand;
  int count = 1;
  double amplitude = 1.0;
};

inline void validate(const ActionSpec& s) {
  if (s.count < 1 || s.count > 6) throw RangeError("action count must be in [1, 6]");
  if (!(s.amplitude > 0.0 && s.amplitude <= 2.0)) throw RangeError("action amplitude must be in (0, 2]");
}

namespace detail {

using Pose = std::array<double, kFeatureDim>;

inline Pose rest_pose() {
  Pose p{};
  const double rest[kJoints][3] = {{0, 0, 0},        {0, 0.65, 0},     {-0.25, 0.0, 0},
                                   {0.25, 0.0, 0},   {-0.12, -0.9, 0}, {0.12, -0.9, 0}};
  for (int j = 0; j < kJoints; ++j) {
    for (int c = 0; c < 3; ++c) p[static_cast<std::size_t>(offset_column(j, c))] = rest[j][c];
  }
  return p;
}

// Train of `count` raised-cosine bumps over a segment of `length` frames.
// Each bump is centred on an integer frame and spans `width_ratio` of its
// repetition period.
inline std::vector<double> bump_train(int length, int count, double width_ratio) {
  std::vector<double> out(static_cast<std::size_t>(length), 0.0);
  const double period = static_cast<double>(length) / count;
  const int half = std::max(2, static_cast<int>(std::floor(period * width_ratio / 2.0)));
  for (int r = 0; r < count; ++r) {
    const int centre = static_cast<int>(std::floor(r * period + period / 2.0));
    for (int i = centre - half + 1; i < centre + half; ++i) {
      if (i < 0 || i >= length) continue;
      out[static_cast<std::size_t>(i)] = 0.5 * (1.0 + std::cos(M_PI * (i - centre) / half));
    }
  }
  return out;
}

inline int min_segment_frames(const ActionSpec& s) {
  switch (s.action) {
    case Action::jump:
    case Action::wave:
    case Action::squat:
    case Action::walk:
    case Action::run:
      return 8 * s.count;
    default:
      return 8;
  }
}

inline std::vector<Pose> synth_segment(const ActionSpec& spec, int length, double heading) {
  std::vector<Pose> out(static_cast<std::size_t>(length), rest_pose());
  const double a = spec.amplitude;
  const double hx = std::sin(heading);
  const double hz = std::cos(heading);
  auto col = [](int j, int c) { return static_cast<std::size_t>(offset_column(j, c)); };

  switch (spec.action) {
    case Action::stand:
      break;
    case Action::walk:
    case Action::run: {
      const bool run = spec.action == Action::run;
      const double speed = (run ? 0.15 : 0.05) * a;
      const double stride = (run ? 0.35 : 0.25) * a;
      const double lift = (run ? 0.12 : 0.05) * a;
      const double swing = (run ? 0.25 : 0.15) * a;
      for (int i = 0; i < length; ++i) {
        const double phase = 2.0 * M_PI * spec.count * i / length;
        const double s = std::sin(phase);
        Pose& p = out[static_cast<std::size_t>(i)];
        p[1] = speed * hx;
        p[2] = speed * hz;
        if (run) p[0] = 0.02 * a * 0.5 * (1.0 - std::cos(2.0 * phase));
        p[col(kLeftFoot, 2)] += stride * s;
        p[col(kRightFoot, 2)] -= stride * s;
        p[col(kLeftFoot, 1)] += lift * std::max(0.0, s);
        p[col(kRightFoot, 1)] += lift * std::max(0.0, -s);
        p[col(kLeftHand, 2)] -= swing * s;
        p[col(kRightHand, 2)] += swing * s;
      }
      break;
    }
    case Action::jump: {
      const auto bumps = bump_train(length, spec.count, 0.5);
      for (int i = 0; i < length; ++i) {
        const double b = bumps[static_cast<std::size_t>(i)];
        Pose& p = out[static_cast<std::size_t>(i)];
        p[0] = kJumpHeight * a * b;
        p[col(kLeftFoot, 1)] += 0.25 * a * b;
        p[col(kRightFoot, 1)] += 0.25 * a * b;
        p[col(kLeftHand, 1)] += 0.4 * a * b;
        p[col(kRightHand, 1)] += 0.4 * a * b;
      }
      break;
    }
    case Action::wave: {
      const auto bumps = bump_train(length, spec.count, 0.9);
      for (int i = 0; i < length; ++i) {
        Pose& p = out[static_cast<std::size_t>(i)];
        p[col(kRightHand, 1)] = 0.55;
        p[col(kRightHand, 0)] = 0.3 + 0.15 * a * bumps[static_cast<std::size_t>(i)];
      }
      break;
    }
    case Action::squat: {
      const auto bumps = bump_train(length, spec.count, 0.6);
      for (int i = 0; i < length; ++i) {
        const double b = bumps[static_cast<std::size_t>(i)];
        Pose& p = out[static_cast<std::size_t>(i)];
        p[col(kHead, 1)] -= 0.2 * a * b;
        p[col(kLeftFoot, 1)] += 0.4 * a * b;
        p[col(kRightFoot, 1)] += 0.4 * a * b;
        p[col(kLeftHand, 2)] += 0.3 * a * b;
        p[col(kRightHand, 2)] += 0.3 * a * b;
      }
      break;
    }
    case Action::sit: {
      for (int i = 0; i < length; ++i) {
        const double s = std::min(1.0, i / (0.4 * length));
        const double e = 0.5 * (1.0 - std::cos(M_PI * s));
        Pose& p = out[static_cast<std::size_t>(i)];
        p[col(kLeftFoot, 2)] += 0.4 * a * e;
        p[col(kRightFoot, 2)] += 0.4 * a * e;
        p[col(kLeftFoot, 1)] += 0.45 * a * e;
        p[col(kRightFoot, 1)] += 0.45 * a * e;
        p[col(kHead, 1)] -= 0.1 * a * e;
      }
      break;
    }
  }
  return out;
}

}  // namespace detail

// Renders the specs back to back over `frames` frames. Segments split the
// frame budget evenly (the last one takes the remainder) and the first
// kBlendFrames frames of every later segment ramp linearly from the previous
// segment's final pose.
inline MotionSequence synth_motion(std::span<const ActionSpec> specs, int frames, std::uint64_t seed) {
  if (specs.empty()) throw RangeError("synth_motion: no action specs");
  if (frames < kMinFrames || frames > kMaxFrames) {
    throw RangeError("synth_motion: frames must be in [" + std::to_string(kMinFrames) + ", " +
                     std::to_string(kMaxFrames) + "], got " + std::to_string(frames));
  }
  for (const auto& s : specs) validate(s);

  const int n = static_cast<int>(specs.size());
  const int base = frames / n;
  std::vector<int> lengths(static_cast<std::size_t>(n), base);
  lengths.back() += frames - base * n;
  for (int i = 0; i < n; ++i) {
    const int need = detail::min_segment_frames(specs[static_cast<std::size_t>(i)]);
    if (lengths[static_cast<std::size_t>(i)] < need) {
      throw RangeError(std::string("synth_motion: ") + to_string(specs[static_cast<std::size_t>(i)].action) + " x" +
                       std::to_string(specs[static_cast<std::size_t>(i)].count) + " needs at least " +
                       std::to_string(need) + " frames but its segment has " +
                       std::to_string(lengths[static_cast<std::size_t>(i)]));
    }
  }

  Rng rng(seed);
  const double heading = rng.uniform(0.0, 2.0 * M_PI);

  std::vector<detail::Pose> poses;
  poses.reserve(static_cast<std::size_t>(frames));
  for (int i = 0; i < n; ++i) {
    auto seg = detail::synth_segment(specs[static_cast<std::size_t>(i)], lengths[static_cast<std::size_t>(i)], heading);
    if (!poses.empty()) {
      const detail::Pose prev = poses.back();
      const int blend = std::min(kBlendFrames, static_cast<int>(seg.size()));
      for (int f = 0; f < blend; ++f) {
        const double alpha = static_cast<double>(f + 1) / (kBlendFrames + 1);
        for (std::size_t c = 0; c < prev.size(); ++c) {
          seg[static_cast<std::size_t>(f)][c] = (1.0 - alpha) * prev[c] + alpha * seg[static_cast<std::size_t>(f)][c];
        }
      }
    }
    poses.insert(poses.end(), seg.begin(), seg.end());
  }

  MotionSequence m;
  m.features.resize(frames, kFeatureDim);
  for (int f = 0; f < frames; ++f) {
    for (int c = 0; c < kFeatureDim; ++c) {
      m.features(f, c) = static_cast<float>(poses[static_cast<std::size_t>(f)][static_cast<std::size_t>(c)]);
    }
  }
  return m;
}

inline MotionSequence synth_motion(std::initializer_list<ActionSpec> specs, int frames, std::uint64_t seed) {
  return synth_motion(std::span<const ActionSpec>(specs.begin(), specs.size()), frames, seed);
}

inline void validate(const MotionSequence& m) {
  if (m.features.cols() != kFeatureDim) throw DataError("motion: expected " + std::to_string(kFeatureDim) + " features");
  if (m.frames() < kMinFrames || m.frames() > kMaxFrames) throw DataError("motion: frame count out of range");
  if (!m.features.allFinite()) throw DataError("motion: non-finite features");
}

// Joint positions (frames x joints x 3, flattened per frame) from features:
// the root integrates its planar velocity and sits at pelvis height plus the
// root-height feature; other joints add their offsets to the root.
inline MatF forward_kinematics(const MatF& features) {
  const Eigen::Index frames = features.rows();
  MatF pos(frames, kJoints * 3);
  double x = 0.0;
  double z = 0.0;
  for (Eigen::Index f = 0; f < frames; ++f) {
    if (f > 0) {
      x += features(f, 1);
      z += features(f, 2);
    }
    const double y = kPelvisHeight + features(f, 0);
    for (int j = 0; j < kJoints; ++j) {
      pos(f, 3 * j + 0) = static_cast<float>(x + features(f, offset_column(j, 0)));
      pos(f, 3 * j + 1) = static_cast<float>(y + features(f, offset_column(j, 1)));
      pos(f, 3 * j + 2) = static_cast<float>(z + features(f, offset_column(j, 2)));
    }
  }
  return pos;
}

}  // namespace mclr
