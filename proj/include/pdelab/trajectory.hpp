#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pdelab {

using Json = nlohmann::json;

/// Time-ordered frames of equal size sampled at a uniform interval.
/// Frames are kept in 64-bit memory and rounded to 32-bit on disk.
struct Trajectory {
  Json metadata = Json::object();
  std::vector<std::size_t> frame_shape;
  double t0 = 0.0;
  double snapshot_interval = 1.0;
  std::vector<double> data;

  Trajectory() = default;
  Trajectory(std::vector<std::size_t> shape, double interval, double start_time = 0.0);

  std::size_t frame_size() const noexcept;
  std::size_t n_frames() const noexcept;
  bool empty() const noexcept { return data.empty(); }

  std::span<const double> frame(std::size_t i) const;
  std::span<double> frame(std::size_t i);
  double time(std::size_t i) const noexcept { return t0 + snapshot_interval * static_cast<double>(i); }

  void append(std::span<const double> values);
  /// Frames [first, first + count) as a new trajectory with the same metadata.
  Trajectory slice(std::size_t first, std::size_t count) const;
};

/// PDET1 container. Layout (all integers little-endian):
///   0   5 bytes  "PDET1"
///   5   u8       format version (1)
///   6   2 bytes  reserved, zero
///   8   u64      J = byte length of the JSON header
///   16  J bytes  UTF-8 JSON header
///   ..  u64      frame count F
///   ..  u64      values per frame V
///   ..  F*V f32  frames in time order
/// The JSON header always carries "frame_shape", "t0", "snapshot_interval"
/// and "n_frames" next to the caller's metadata.
inline constexpr std::uint8_t kPdetVersion = 1;

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj);
Trajectory read_trajectory(const std::filesystem::path& path);
/// Reads only the JSON header.
Json read_trajectory_header(const std::filesystem::path& path);

}  // namespace pdelab
