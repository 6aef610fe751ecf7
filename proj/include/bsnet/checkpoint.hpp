#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsnet/train.hpp"

namespace bsnet {

/// Unreadable checkpoint or one that does not fit the model. The message of an
/// architecture mismatch lists every missing, unexpected and reshaped record.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

/// File layout (little-endian): "BSNETCKP", u32 version, u32 float bits
/// (32|64), u64 record count, then per record: u32 name length, name bytes,
/// u32 rank, u64 extents, values.
struct Checkpoint {
  NumericMode mode = NumericMode::f64;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[8] = {'B', 'S', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);
std::vector<char> serialize(const Checkpoint& checkpoint);
Checkpoint deserialize(const std::vector<char>& bytes);

/// Parameters ("param."), batchnorm buffers ("buffer."), optimizer moments
/// ("adam.m.", "adam.v.") and run metadata ("meta.").
Checkpoint capture(BisimModel& model, Adam* optimizer, std::size_t episodes_done,
                   NumericMode mode);
/// Loads state into the model (and optimizer when given); returns the number
/// of completed episodes stored in the checkpoint.
std::size_t restore(BisimModel& model, Adam* optimizer, const Checkpoint& checkpoint);

}  // namespace bsnet
