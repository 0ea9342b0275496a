#include "urnet/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <set>

#include "urnet/config.hpp"
#include "urnet/errors.hpp"

namespace urnet {

namespace {

constexpr const char* kFormatName = "urnet-checkpoint";

std::uint32_t crc32_of(const std::vector<unsigned char>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in pieces.
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

struct Entry {
  std::string name;
  std::string kind;  // param, buffer, moment1, moment2
  Shape shape;
  std::span<const double> values;
};

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

void save_checkpoint(UrnetModel& model, const Normalization& normalization, const TrainState& state,
                     const std::filesystem::path& path) {
  std::vector<Entry> entries;
  for (const auto& p : model.parameters()) entries.push_back({p.name, "param", p.tensor.shape(), p.tensor.data()});
  for (const auto& b : model.buffers()) entries.push_back({b.name, "buffer", {b.values->size()}, *b.values});
  Json steps = Json::object();
  for (const auto& [name, st] : state.optimizer) {
    steps[name] = st.step;
    if (!st.m.empty()) entries.push_back({name, "moment1", {st.m.size()}, st.m});
    if (!st.v.empty()) entries.push_back({name, "moment2", {st.v.size()}, st.v});
  }

  std::vector<unsigned char> payload;
  Json manifest = Json::array();
  for (const auto& e : entries) {
    manifest.push_back({{"name", e.name}, {"kind", e.kind}, {"shape", e.shape}, {"offset", payload.size()}});
    for (double v : e.values) put_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  const auto crc = crc32_of(payload);

  Json header{{"format", kFormatName},
              {"version", kCheckpointVersion},
              {"model", to_json(model.spec())},
              {"normalization", to_json(normalization)},
              {"tensors", manifest},
              {"train_state", {{"phase", state.phase}, {"next_epoch", state.next_epoch}, {"optimizer_steps", steps}}},
              {"payload_bytes", payload.size()},
              {"crc32", crc}};
  const auto text = header.dump();

  std::vector<unsigned char> out;
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

namespace {

Checkpoint load_impl(const std::filesystem::path& path, const ModelSpec* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw CheckpointLayoutError("checkpoint too short: " + std::to_string(bytes.size()) + " bytes");
  const auto header_len = get_u64(bytes.data());
  if (header_len > bytes.size() - 12) throw CheckpointLayoutError("header length exceeds file size");

  Json header;
  try {
    header = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const Json::exception& e) {
    throw CheckpointLayoutError(std::string("unreadable header: ") + e.what());
  }
  if (!header.is_object() || header.value("format", "") != kFormatName) {
    throw CheckpointLayoutError("not a checkpoint file: " + path.string());
  }
  const auto version = header.value("version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  }

  const std::size_t payload_begin = 8 + header_len;
  const std::size_t payload_size = bytes.size() - payload_begin - 4;
  if (header.value("payload_bytes", std::size_t{0}) != payload_size) {
    throw CheckpointLayoutError("payload is " + std::to_string(payload_size) + " bytes, header says " +
                                std::to_string(header.value("payload_bytes", std::size_t{0})));
  }
  const std::vector<unsigned char> payload(bytes.begin() + static_cast<std::ptrdiff_t>(payload_begin),
                                           bytes.end() - 4);
  const auto crc = crc32_of(payload);
  if (crc != get_u32(bytes.data() + bytes.size() - 4) || crc != header.value("crc32", std::uint32_t{0})) {
    throw ChecksumError("checkpoint payload checksum mismatch in " + path.string());
  }

  ModelSpec spec;
  Normalization norm;
  try {
    spec = model_spec_from_json(header.at("model"));
    norm = normalization_from_json(header.at("normalization"));
  } catch (const std::exception& e) {
    throw CheckpointLayoutError(std::string("bad header: ") + e.what());
  }
  if (expected && !spec.same_architecture(*expected)) {
    throw ArchitectureMismatchError("checkpoint has " + std::to_string(spec.num_blocks()) +
                                    " blocks, configuration expects " + std::to_string(expected->num_blocks()) + " blocks" +
                                    (spec.num_blocks() == expected->num_blocks() ? " (other architecture fields differ)" : ""));
  }

  Checkpoint ck{UrnetModel(spec), norm, {}};
  std::map<std::string, Tensor> params;
  for (auto& p : ck.model.parameters()) params.emplace(p.name, p.tensor);
  std::map<std::string, std::vector<double>*> buffers;
  for (auto& b : ck.model.buffers()) buffers.emplace(b.name, b.values);

  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::set<std::string> filled;
  try {
    const auto& ts = header.at("train_state");
    ck.state.phase = ts.at("phase").get<std::string>();
    ck.state.next_epoch = ts.at("next_epoch").get<std::size_t>();
    for (const auto& [name, step] : ts.at("optimizer_steps").items()) ck.state.optimizer[name].step = step.get<std::uint64_t>();

    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto kind = e.at("kind").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = numel_of(shape);
      if (offset % 4 != 0 || offset > payload.size() || count > (payload.size() - offset) / 4) {
        throw CheckpointLayoutError("tensor " + name + " lies outside the payload");
      }
      spans.emplace_back(offset, offset + 4 * count);
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = static_cast<double>(std::bit_cast<float>(get_u32(payload.data() + offset + 4 * i)));
      }
      if (kind == "param") {
        const auto it = params.find(name);
        if (it == params.end()) throw CheckpointLayoutError("unknown parameter " + name);
        if (it->second.shape() != shape) {
          throw CheckpointLayoutError("parameter " + name + " has shape " + shape_to_string(shape) + ", model expects " +
                                      shape_to_string(it->second.shape()));
        }
        std::copy(values.begin(), values.end(), it->second.mutable_data().begin());
      } else if (kind == "buffer") {
        const auto it = buffers.find(name);
        if (it == buffers.end()) throw CheckpointLayoutError("unknown buffer " + name);
        if (it->second->size() != count) throw CheckpointLayoutError("buffer " + name + " has the wrong length");
        *it->second = std::move(values);
      } else if (kind == "moment1" || kind == "moment2") {
        if (!params.count(name)) throw CheckpointLayoutError("optimizer state for unknown parameter " + name);
        auto& st = ck.state.optimizer[name];
        (kind == "moment1" ? st.m : st.v) = std::move(values);
        continue;
      } else {
        throw CheckpointLayoutError("unknown tensor kind " + kind);
      }
      if (!filled.insert(name).second) throw CheckpointLayoutError("tensor " + name + " appears twice");
    }
  } catch (const Json::exception& e) {
    throw CheckpointLayoutError(std::string("bad manifest: ") + e.what());
  }

  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw CheckpointLayoutError("manifest entries overlap");
  }
  if (filled.size() != params.size() + buffers.size()) {
    throw CheckpointLayoutError("checkpoint is missing " + std::to_string(params.size() + buffers.size() - filled.size()) +
                                " model tensors");
  }
  return ck;
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) { return load_impl(path, nullptr); }

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected) {
  return load_impl(path, &expected);
}

}  // namespace urnet
