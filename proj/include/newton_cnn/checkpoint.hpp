#pragma once

#include <newton_cnn/solver.hpp>

#include <cstring>
#include <fstream>
#include <string>

namespace newton_cnn {

// Checkpoint file: little-endian binary.
//   8 bytes  magic "NWCNCKPT"
//   u32      format version (1)
//   u32      iterations completed
//   f64      damping value entering the next iteration
//   u64      parameter count n
//   n * f64  parameter vector
//   u64      byte length of the serialized sampling-generator state
//   bytes    generator state (textual std::mt19937_64 stream)
inline constexpr char kCheckpointMagic[8] = {'N', 'W', 'C', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void read_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const ResumeState& st) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(st.iteration));
  detail::write_pod(out, st.lambda);
  detail::write_pod(out, static_cast<std::uint64_t>(st.theta.size()));
  out.write(reinterpret_cast<const char*>(st.theta.data()),
            static_cast<std::streamsize>(sizeof(double) * st.theta.size()));
  detail::write_pod(out, static_cast<std::uint64_t>(st.rng_state.size()));
  out.write(st.rng_state.data(), static_cast<std::streamsize>(st.rng_state.size()));
  if (!out) fail("short write while saving checkpoint: " + path);
}

inline ResumeState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    fail("not a checkpoint file: " + path);
  std::uint32_t version = 0, iteration = 0;
  detail::read_pod(in, version);
  if (version != kCheckpointVersion)
    fail("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  detail::read_pod(in, iteration);
  ResumeState st;
  st.iteration = static_cast<int>(iteration);
  detail::read_pod(in, st.lambda);
  std::uint64_t n = 0;
  detail::read_pod(in, n);
  if (!in || n > (1ull << 32)) fail("corrupt checkpoint header: " + path);
  st.theta.resize(static_cast<Index>(n));
  in.read(reinterpret_cast<char*>(st.theta.data()),
          static_cast<std::streamsize>(sizeof(double) * n));
  std::uint64_t rng_len = 0;
  detail::read_pod(in, rng_len);
  if (!in || rng_len > (1ull << 20)) fail("corrupt checkpoint trailer: " + path);
  st.rng_state.resize(rng_len);
  in.read(st.rng_state.data(), static_cast<std::streamsize>(rng_len));
  if (!in) fail("truncated checkpoint: " + path);
  return st;
}

}  // namespace newton_cnn
