#include "pdelab/trajectory.hpp"

#include <fstream>
#include <functional>
#include <numeric>

#include "pdelab/binary_io.hpp"
#include "pdelab/errors.hpp"

namespace pdelab {

namespace {

constexpr char kMagic[5] = {'P', 'D', 'E', 'T', '1'};

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Json read_header(std::istream& is) {
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0) throw FormatError("not a PDET1 file (bad magic)");
  const auto version = io::read_le<std::uint8_t>(is);
  if (version != kPdetVersion) throw FormatError("unsupported PDET1 version " + std::to_string(version));
  io::read_le<std::uint16_t>(is);
  const auto json_len = io::read_le<std::uint64_t>(is);
  if (json_len > (1ULL << 30)) throw FormatError("PDET1 header too large");
  try {
    return Json::parse(io::read_bytes(is, json_len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("PDET1 header is not valid JSON: ") + e.what());
  }
}

}  // namespace

Trajectory::Trajectory(std::vector<std::size_t> shape, double interval, double start_time)
    : frame_shape(std::move(shape)), t0(start_time), snapshot_interval(interval) {
  if (frame_shape.empty() || product(frame_shape) == 0) throw ShapeError("trajectory: empty frame shape");
}

std::size_t Trajectory::frame_size() const noexcept { return frame_shape.empty() ? 0 : product(frame_shape); }

std::size_t Trajectory::n_frames() const noexcept {
  const std::size_t fs = frame_size();
  return fs == 0 ? 0 : data.size() / fs;
}

std::span<const double> Trajectory::frame(std::size_t i) const {
  if (i >= n_frames()) throw std::out_of_range("trajectory frame index");
  const std::size_t fs = frame_size();
  return {data.data() + i * fs, fs};
}

std::span<double> Trajectory::frame(std::size_t i) {
  if (i >= n_frames()) throw std::out_of_range("trajectory frame index");
  const std::size_t fs = frame_size();
  return {data.data() + i * fs, fs};
}

void Trajectory::append(std::span<const double> values) {
  if (values.size() != frame_size()) throw ShapeError("trajectory: frame size mismatch");
  data.insert(data.end(), values.begin(), values.end());
}

Trajectory Trajectory::slice(std::size_t first, std::size_t count) const {
  if (first + count > n_frames()) throw std::out_of_range("trajectory slice");
  Trajectory out(frame_shape, snapshot_interval, time(first));
  out.metadata = metadata;
  const std::size_t fs = frame_size();
  out.data.assign(data.begin() + static_cast<std::ptrdiff_t>(first * fs),
                  data.begin() + static_cast<std::ptrdiff_t>((first + count) * fs));
  return out;
}

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  Json header = traj.metadata;
  header["frame_shape"] = traj.frame_shape;
  header["t0"] = traj.t0;
  header["snapshot_interval"] = traj.snapshot_interval;
  header["n_frames"] = traj.n_frames();
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 5);
  io::write_le<std::uint8_t>(os, kPdetVersion);
  io::write_le<std::uint16_t>(os, 0);
  io::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  io::write_le<std::uint64_t>(os, traj.n_frames());
  io::write_le<std::uint64_t>(os, traj.frame_size());
  io::write_f32_array(os, std::span<const double>(traj.data));
  if (!os) throw FormatError("write failed for " + path.string());
}

Json read_trajectory_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_header(is);
}

Trajectory read_trajectory(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  Json header = read_header(is);
  const auto n_frames = io::read_le<std::uint64_t>(is);
  const auto frame_size = io::read_le<std::uint64_t>(is);

  Trajectory traj;
  try {
    traj.frame_shape = header.at("frame_shape").get<std::vector<std::size_t>>();
    traj.t0 = header.at("t0").get<double>();
    traj.snapshot_interval = header.at("snapshot_interval").get<double>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("PDET1 header missing field: ") + e.what());
  }
  if (traj.frame_size() != frame_size) throw FormatError("PDET1 frame size disagrees with frame_shape");
  if (header.value("n_frames", n_frames) != n_frames) throw FormatError("PDET1 frame count disagrees with header");
  for (const char* key : {"frame_shape", "t0", "snapshot_interval", "n_frames"}) header.erase(key);
  traj.metadata = std::move(header);

  traj.data.resize(n_frames * frame_size);
  for (double& v : traj.data) v = io::read_le<float>(is);
  return traj;
}

}  // namespace pdelab
