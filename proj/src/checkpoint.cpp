#include <cstring>

#include "binio.hpp"
#include "dumamba/network.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace {

constexpr char kMagic[4] = {'D', 'U', 'M', 'C'};
constexpr char kBundleMagic[4] = {'D', 'U', 'M', 'T'};

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

struct Record {
  std::string name;
  DType dtype = DType::kU8;
  std::vector<std::uint32_t> dims;
  std::vector<char> payload;
};

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  return 0;
}

void write_record(binio::Writer& w, const Record& r) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
  w.str(r.name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.dims.size()));
  for (auto d : r.dims) w.put<std::uint32_t>(d);
  w.bytes(r.payload.data(), r.payload.size());
}

Record read_record(binio::Reader& rd) {
  Record r;
  r.name = rd.str(rd.get<std::uint32_t>());
  const auto tag = rd.get<std::uint8_t>();
  if (tag > 2) {
    throw FormatError(FormatError::Kind::kMismatch,
                      "record '" + r.name + "' has unknown dtype tag " + std::to_string(tag));
  }
  r.dtype = static_cast<DType>(tag);
  const auto rank = rd.get<std::uint32_t>();
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    r.dims.push_back(rd.get<std::uint32_t>());
    count *= r.dims.back();
  }
  const std::size_t n = count * dtype_size(r.dtype);
  rd.need(n);
  r.payload.resize(n);
  rd.bytes(r.payload.data(), n);
  return r;
}

Record tensor_record(const std::string& name, const Tensor& t) {
  Record r;
  r.name = name;
  r.dtype = kDoublePrecision ? DType::kF64 : DType::kF32;
  for (Index d : t.shape()) r.dims.push_back(static_cast<std::uint32_t>(d));
  const auto data = t.data();
  r.payload.resize(data.size_bytes());
  std::memcpy(r.payload.data(), data.data(), data.size_bytes());
  return r;
}

Record bytes_record(const std::string& name, const std::string& bytes) {
  Record r;
  r.name = name;
  r.dims = {static_cast<std::uint32_t>(bytes.size())};
  r.payload.assign(bytes.begin(), bytes.end());
  return r;
}

template <typename T>
std::vector<T> decode(const Record& r) {
  std::vector<T> v(r.payload.size() / sizeof(T));
  std::memcpy(v.data(), r.payload.data(), r.payload.size());
  return v;
}

Tensor record_tensor(const Record& r) {
  Shape shape(r.dims.begin(), r.dims.end());
  std::vector<Scalar> values;
  switch (r.dtype) {
    case DType::kF32: {
      auto v = decode<float>(r);
      values.assign(v.begin(), v.end());
      break;
    }
    case DType::kF64: {
      auto v = decode<double>(r);
      values.reserve(v.size());
      for (double x : v) values.push_back(static_cast<Scalar>(x));
      break;
    }
    case DType::kU8:
      throw FormatError(FormatError::Kind::kMismatch,
                        "record '" + r.name + "' holds bytes where a tensor was expected");
  }
  return Tensor::from(std::move(shape), std::move(values), true);
}

void write_block(binio::Writer& w, const std::vector<Record>& records) {
  w.put<std::uint64_t>(records.size());
  for (const auto& r : records) write_record(w, r);
}

std::vector<Record> read_block(binio::Reader& rd) {
  const auto n = rd.get<std::uint64_t>();
  // Every record needs at least 9 bytes; an absurd count is a truncated file.
  if (n > rd.remaining() / 9 + 1) {
    throw FormatError(FormatError::Kind::kTruncated,
                      "truncated payload in '" + rd.what() + "': record count " +
                          std::to_string(n) + " exceeds file size");
  }
  std::vector<Record> out;
  for (std::uint64_t i = 0; i < n; ++i) out.push_back(read_record(rd));
  return out;
}

const Record& find(const std::vector<Record>& rs, const std::string& name) {
  for (const auto& r : rs) {
    if (r.name == name) return r;
  }
  throw FormatError(FormatError::Kind::kMismatch, "checkpoint lacks record '" + name + "'");
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);

  std::vector<Record> tensors;
  for (const auto& [name, t] : ckpt.tensors) tensors.push_back(tensor_record(name, t));
  write_block(w, tensors);

  nlohmann::json cfg = {{"model", ckpt.config.to_json()}, {"meta", ckpt.meta}};
  write_block(w, {bytes_record("config", cfg.dump())});

  std::vector<Record> opt;
  for (const auto& [name, t] : ckpt.optimizer) opt.push_back(tensor_record(name, t));
  write_block(w, opt);

  std::string rng(24, '\0');
  std::memcpy(rng.data(), &ckpt.rng.seed, 8);
  std::memcpy(rng.data() + 8, &ckpt.rng.stream, 8);
  std::memcpy(rng.data() + 16, &ckpt.rng.counter, 8);
  std::string step(8, '\0');
  std::memcpy(step.data(), &ckpt.step, 8);
  write_block(w, {bytes_record("rng", rng), bytes_record("step", step)});
  w.save(path);
}

Checkpoint load_checkpoint(const std::string& path) {
  binio::Reader rd = binio::Reader::open(path);
  char magic[4];
  if (rd.remaining() < 4) {
    throw FormatError(FormatError::Kind::kBadMagic, "'" + path + "' is not a checkpoint");
  }
  rd.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::kBadMagic, "'" + path + "' has a corrupt magic");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kUnknownVersion,
                      "'" + path + "' has unknown checkpoint version " + std::to_string(version));
  }

  Checkpoint ck;
  for (const auto& r : read_block(rd)) ck.tensors.emplace_back(r.name, record_tensor(r));

  const auto cfg_block = read_block(rd);
  const Record& cfg = find(cfg_block, "config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(std::string(cfg.payload.begin(), cfg.payload.end()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kMismatch, "checkpoint config is not JSON: " +
                                                        std::string(e.what()));
  }
  ck.config = ModelConfig::from_json(j.at("model"));
  ck.meta = j.value("meta", nlohmann::json::object());

  for (const auto& r : read_block(rd)) ck.optimizer.emplace_back(r.name, record_tensor(r));

  const auto state = read_block(rd);
  const Record& rng = find(state, "rng");
  const Record& step = find(state, "step");
  if (rng.payload.size() != 24 || step.payload.size() != 8) {
    throw FormatError(FormatError::Kind::kMismatch, "checkpoint state block is malformed");
  }
  std::memcpy(&ck.rng.seed, rng.payload.data(), 8);
  std::memcpy(&ck.rng.stream, rng.payload.data() + 8, 8);
  std::memcpy(&ck.rng.counter, rng.payload.data() + 16, 8);
  std::memcpy(&ck.step, step.payload.data(), 8);
  if (rd.remaining() != 0) {
    throw FormatError(FormatError::Kind::kMismatch,
                      "'" + path + "' has " + std::to_string(rd.remaining()) + " trailing bytes");
  }
  return ck;
}

Checkpoint make_checkpoint(const Model& model) {
  Checkpoint ck;
  ck.config = model.config;
  for (const auto& [name, t] : model.named_parameters()) ck.tensors.emplace_back(name, t.clone());
  return ck;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m = build_model(ckpt.config);
  assign_tensors(ckpt.tensors, m.named_parameters());
  return m;
}

void save_tensors(const std::string& path, const NamedTensors& tensors, const nlohmann::json& meta) {
  binio::Writer w;
  w.bytes(kBundleMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  std::vector<Record> rs;
  for (const auto& [name, t] : tensors) rs.push_back(tensor_record(name, t));
  write_block(w, rs);
  write_block(w, {bytes_record("meta", meta.dump())});
  w.save(path);
}

TensorBundle load_tensors(const std::string& path) {
  binio::Reader rd = binio::Reader::open(path);
  char magic[4];
  if (rd.remaining() < 4) {
    throw FormatError(FormatError::Kind::kBadMagic, "'" + path + "' is not a tensor bundle");
  }
  rd.bytes(magic, 4);
  if (std::memcmp(magic, kBundleMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::kBadMagic, "'" + path + "' has a corrupt magic");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kUnknownVersion,
                      "'" + path + "' has unknown bundle version " + std::to_string(version));
  }
  TensorBundle b;
  for (const auto& r : read_block(rd)) b.tensors.emplace_back(r.name, record_tensor(r));
  const auto meta_block = read_block(rd);
  const Record& meta = find(meta_block, "meta");
  try {
    b.meta = nlohmann::json::parse(std::string(meta.payload.begin(), meta.payload.end()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kMismatch, "bundle metadata is not JSON");
  }
  if (rd.remaining() != 0) {
    throw FormatError(FormatError::Kind::kMismatch,
                      "'" + path + "' has " + std::to_string(rd.remaining()) + " trailing bytes");
  }
  return b;
}

DUMAMBA_END_NAMESPACE
