#include "bsnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace bsnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

namespace {

template <typename T>
void put(std::vector<char>& out, T value) {
  char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

constexpr std::uint64_t kMaxExtent = std::uint64_t{1} << 40;

}  // namespace

std::vector<char> serialize(const Checkpoint& checkpoint) {
  std::vector<char> out(kCheckpointMagic, kCheckpointMagic + 8);
  const bool single = checkpoint.mode == NumericMode::f32;
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, single ? 32 : 64);
  put<std::uint64_t>(out, checkpoint.records.size());
  for (const auto& r : checkpoint.records) {
    if (shape_size(r.shape) != r.data.size()) {
      throw CheckpointError("record " + r.name + " data does not match its shape");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) put<std::uint64_t>(out, e);
    for (double v : r.data) {
      if (single) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  return out;
}

Checkpoint deserialize(const std::vector<char>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  std::vector<char> body(bytes.begin() + 8, bytes.end());
  Reader in(body);
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto bits = in.get<std::uint32_t>();
  if (bits != 32 && bits != 64) throw CheckpointError("bad float width " + std::to_string(bits));
  Checkpoint ck;
  ck.mode = bits == 32 ? NumericMode::f32 : NumericMode::f64;
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = in.get_string(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = in.get<std::uint64_t>();
      if (e > kMaxExtent) throw CheckpointError("record " + r.name + " has an absurd extent");
      r.shape.push_back(static_cast<std::size_t>(e));
    }
    r.data.resize(shape_size(r.shape));
    for (auto& v : r.data) v = bits == 32 ? static_cast<double>(in.get<float>()) : in.get<double>();
    ck.records.push_back(std::move(r));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after the last record");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize(checkpoint);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

Checkpoint capture(BisimModel& model, Adam* optimizer, std::size_t episodes_done,
                   NumericMode mode) {
  Checkpoint ck;
  ck.mode = mode;
  const auto state = model.state();
  for (const auto& p : state.parameters) {
    const auto v = p.value.data();
    ck.records.push_back({"param." + p.name, p.value.shape(), {v.begin(), v.end()}});
  }
  for (const auto& b : state.buffers) {
    ck.records.push_back({"buffer." + b.name, {b.data->size()}, *b.data});
  }
  if (optimizer) {
    for (std::size_t i = 0; i < optimizer->params().size(); ++i) {
      const auto& p = optimizer->params()[i];
      ck.records.push_back({"adam.m." + p.name, p.value.shape(), optimizer->first_moments()[i]});
      ck.records.push_back({"adam.v." + p.name, p.value.shape(), optimizer->second_moments()[i]});
    }
    ck.records.push_back(
        {"meta.adam_steps", {1}, {static_cast<double>(optimizer->steps())}});
  }
  ck.records.push_back({"meta.episodes_done", {1}, {static_cast<double>(episodes_done)}});
  return ck;
}

std::size_t restore(BisimModel& model, Adam* optimizer, const Checkpoint& checkpoint) {
  auto state = model.state();
  std::map<std::string, Shape> expected;
  for (const auto& p : state.parameters) expected["param." + p.name] = p.value.shape();
  for (const auto& b : state.buffers) expected["buffer." + b.name] = {b.data->size()};

  std::map<std::string, const CheckpointRecord*> found;
  for (const auto& r : checkpoint.records) {
    if (r.name.rfind("param.", 0) == 0 || r.name.rfind("buffer.", 0) == 0) found[r.name] = &r;
  }
  std::string diff;
  for (const auto& [name, shape] : expected) {
    auto it = found.find(name);
    if (it == found.end()) {
      diff += "  missing:    " + name + " " + shape_string(shape) + "\n";
    } else if (it->second->shape != shape) {
      diff += "  shape:      " + name + " expected " + shape_string(shape) + ", found " +
              shape_string(it->second->shape) + "\n";
    }
  }
  for (const auto& [name, rec] : found) {
    if (!expected.count(name)) {
      diff += "  unexpected: " + name + " " + shape_string(rec->shape) + "\n";
    }
  }
  if (!diff.empty()) {
    throw CheckpointError("checkpoint does not match the configured architecture:\n" + diff);
  }

  for (auto& p : state.parameters) {
    const auto& src = found.at("param." + p.name)->data;
    auto dst = p.value.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  for (auto& b : state.buffers) *b.data = found.at("buffer." + b.name)->data;

  if (optimizer) {
    for (std::size_t i = 0; i < optimizer->params().size(); ++i) {
      const auto& name = optimizer->params()[i].name;
      const auto* m = checkpoint.find("adam.m." + name);
      const auto* v = checkpoint.find("adam.v." + name);
      if (m && v && m->data.size() == optimizer->first_moments()[i].size() &&
          v->data.size() == optimizer->second_moments()[i].size()) {
        optimizer->first_moments()[i] = m->data;
        optimizer->second_moments()[i] = v->data;
      }
    }
    if (const auto* s = checkpoint.find("meta.adam_steps")) {
      optimizer->set_steps(static_cast<std::uint64_t>(s->data.at(0)));
    }
  }
  const auto* done = checkpoint.find("meta.episodes_done");
  return done ? static_cast<std::size_t>(done->data.at(0)) : 0;
}

}  // namespace bsnet
