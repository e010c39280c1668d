#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace reachpred {

// Errors raised by every module. Callers get a message that names the
// offending input; nothing is partially applied when one is thrown.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kSampleRate = 100.0;

// Channel layout of the full 28-feature frame: two IMUs (gyro + accel each)
// followed by the 16 EMG envelopes, 8 per armband.
inline constexpr std::size_t kImuChannels = 12;
inline constexpr std::size_t kEmgChannels = 16;
inline constexpr std::size_t kChannels = kImuChannels + kEmgChannels;

enum class Activity { rest = 0, motion = 1 };

inline std::string_view to_string(Activity a) { return a == Activity::rest ? "REST" : "MOTION"; }

struct SampleFrame {
  double t = 0.0;
  int trial_id = 0;
  std::array<double, 3> gyro_arm{};
  std::array<double, 3> accel_arm{};
  std::array<double, 3> gyro_forearm{};
  std::array<double, 3> accel_forearm{};
  std::array<double, kEmgChannels> emg{};
  // 0 = rest, 1..L = direction of the reach this frame belongs to.
  std::optional<int> label;

  // Flattened channel vector in the canonical order
  // gyro_arm, accel_arm, gyro_forearm, accel_forearm, emg[0..15].
  Eigen::VectorXd channels() const {
    Eigen::VectorXd v(kChannels);
    for (int i = 0; i < 3; ++i) {
      v[i] = gyro_arm[i];
      v[3 + i] = accel_arm[i];
      v[6 + i] = gyro_forearm[i];
      v[9 + i] = accel_forearm[i];
    }
    for (std::size_t i = 0; i < kEmgChannels; ++i) v[kImuChannels + i] = emg[i];
    return v;
  }

  void set_channels(const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (static_cast<std::size_t>(v.size()) != kChannels)
      throw Error("SampleFrame::set_channels: expected 28 channels, got " + std::to_string(v.size()));
    for (int i = 0; i < 3; ++i) {
      gyro_arm[i] = v[i];
      accel_arm[i] = v[3 + i];
      gyro_forearm[i] = v[6 + i];
      accel_forearm[i] = v[9 + i];
    }
    for (std::size_t i = 0; i < kEmgChannels; ++i) emg[i] = v[kImuChannels + i];
  }
};

inline const std::vector<std::string>& channel_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const char* dev : {"arm", "forearm"}) {
      for (const char* sensor : {"gyro", "accel"})
        for (const char* axis : {"x", "y", "z"}) n.push_back(std::string(sensor) + "_" + dev + "_" + axis);
    }
    for (std::size_t i = 0; i < kEmgChannels; ++i) n.push_back("emg_" + std::to_string(i));
    return n;
  }();
  return names;
}

// Reach directions. Cardinal ones come first so that L = 4 uses indices 1..4
// and L = 8 appends the diagonals.
inline const std::array<std::string_view, 8> kDirectionNames = {"N", "E", "S", "W", "NE", "SE", "SW", "NW"};

inline std::string direction_name(int index) {
  if (index < 1 || index > 8) return "?" + std::to_string(index);
  return std::string(kDirectionNames[index - 1]);
}

inline int direction_index(std::string_view name) {
  for (std::size_t i = 0; i < kDirectionNames.size(); ++i)
    if (kDirectionNames[i] == name) return static_cast<int>(i) + 1;
  throw Error("unknown direction '" + std::string(name) + "'");
}

// Planar heading of a direction in radians (E = 0, N = pi/2).
inline double direction_angle(int index) {
  constexpr double kPi = 3.14159265358979323846;
  static constexpr std::array<double, 8> deg = {90, 0, 270, 180, 45, 315, 225, 135};
  if (index < 1 || index > 8) throw Error("direction index out of range: " + std::to_string(index));
  return deg[index - 1] * kPi / 180.0;
}

// Stacks the channel vectors of frames[begin, end) into a row-per-sample matrix.
inline Eigen::MatrixXd stack_channels(const std::vector<SampleFrame>& frames, std::size_t begin, std::size_t end) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(end - begin), static_cast<Eigen::Index>(kChannels));
  for (std::size_t i = begin; i < end; ++i) m.row(static_cast<Eigen::Index>(i - begin)) = frames[i].channels().transpose();
  return m;
}

}  // namespace reachpred
