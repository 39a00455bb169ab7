#include "dumamba/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binio.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace data {

namespace fs = std::filesystem;

namespace {

Index plane(nn::Triple e) { return e[0] * e[1] * e[2]; }

}  // namespace

Tensor VolumeSample::label_tensor() const {
  std::vector<Scalar> v(label.begin(), label.end());
  return Tensor::from({extent[0], extent[1], extent[2]}, std::move(v));
}

void VolumeSample::validate(Index classes) const {
  if (!image.defined() || image.rank() != 4) throw ValueError("sample '" + id + "': image must be [C, D, H, W]");
  for (int a = 0; a < 3; ++a) {
    if (image.dim(a + 1) != extent[a]) {
      throw ValueError("sample '" + id + "': image " + shape_str(image.shape()) +
                       " and label extents differ");
    }
  }
  if (static_cast<Index>(label.size()) != plane(extent)) {
    throw ValueError("sample '" + id + "': label has " + std::to_string(label.size()) + " voxels");
  }
  for (auto v : label) {
    if (v >= classes) {
      throw ValueError("sample '" + id + "': label value " + std::to_string(v) + " out of range");
    }
  }
}

// ---------------------------------------------------------------------------
// Phantoms

std::vector<std::uint8_t> render_ellipsoid(nn::Triple extent, const Ellipsoid& e) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(plane(extent)), 0);
  for (Index z = 0; z < extent[0]; ++z) {
    const double dz = (z - e.center[0]) / e.radii[0];
    for (Index y = 0; y < extent[1]; ++y) {
      const double dy = (y - e.center[1]) / e.radii[1];
      for (Index x = 0; x < extent[2]; ++x) {
        const double dx = (x - e.center[2]) / e.radii[2];
        if (dz * dz + dy * dy + dx * dx <= 1.0) mask[(z * extent[1] + y) * extent[2] + x] = 1;
      }
    }
  }
  return mask;
}

std::vector<Ellipsoid> phantom_blobs(std::uint64_t seed, std::uint64_t index,
                                     const PhantomConfig& cfg) {
  Philox rng = Philox(seed).fork(index).fork(1);
  const int span = cfg.max_blobs - cfg.min_blobs + 1;
  const int count = cfg.min_blobs + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
  std::vector<Ellipsoid> blobs;
  for (int attempt = 0; attempt < 200 && static_cast<int>(blobs.size()) < count; ++attempt) {
    Ellipsoid e;
    for (int a = 0; a < 3; ++a) e.radii[a] = rng.uniform(cfg.min_radius, cfg.max_radius);
    for (int a = 0; a < 3; ++a) {
      const double margin = e.radii[a] + 1.0;
      e.center[a] = rng.uniform(margin, static_cast<double>(cfg.extent[a]) - 1.0 - margin);
    }
    e.contrast = rng.uniform(cfg.min_contrast, cfg.max_contrast);
    if (cfg.disjoint) {
      const double r = *std::max_element(e.radii.begin(), e.radii.end());
      const bool clash = std::any_of(blobs.begin(), blobs.end(), [&](const Ellipsoid& o) {
        const double ro = *std::max_element(o.radii.begin(), o.radii.end());
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (e.center[a] - o.center[a]) * (e.center[a] - o.center[a]);
        return std::sqrt(d2) <= r + ro + 2.0;
      });
      if (clash) continue;
    }
    blobs.push_back(e);
  }
  return blobs;
}

VolumeSample make_phantom(std::uint64_t seed, std::uint64_t index, const PhantomConfig& cfg) {
  VolumeSample s;
  s.id = "phantom_" + std::to_string(seed) + "_" + std::to_string(index);
  s.extent = cfg.extent;
  s.spacing = cfg.spacing;
  const Index n = plane(cfg.extent);
  s.label.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> img(static_cast<std::size_t>(n), 0.0);

  // Smooth texture: a few low-frequency plane waves.
  Philox tex = Philox(seed).fork(index).fork(2);
  constexpr int kWaves = 3;
  for (int w = 0; w < kWaves; ++w) {
    std::array<double, 3> k;
    for (int a = 0; a < 3; ++a) {
      k[a] = 2.0 * std::numbers::pi * tex.uniform(0.5, 2.0) / static_cast<double>(cfg.extent[a]);
    }
    const double phase = tex.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = cfg.texture_amplitude / kWaves;
    for (Index z = 0, i = 0; z < cfg.extent[0]; ++z) {
      for (Index y = 0; y < cfg.extent[1]; ++y) {
        for (Index x = 0; x < cfg.extent[2]; ++x, ++i) {
          img[i] += amp * std::sin(k[0] * z + k[1] * y + k[2] * x + phase);
        }
      }
    }
  }

  for (const Ellipsoid& e : phantom_blobs(seed, index, cfg)) {
    const auto mask = render_ellipsoid(cfg.extent, e);
    for (Index i = 0; i < n; ++i) {
      if (mask[i]) {
        img[i] += e.contrast;
        s.label[i] = 1;
      }
    }
  }

  Philox noise = Philox(seed).fork(index).fork(3);
  std::vector<Scalar> values(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    values[i] = static_cast<Scalar>(img[i] + cfg.noise_sigma * noise.normal_at(i));
  }
  s.image = Tensor::from({1, cfg.extent[0], cfg.extent[1], cfg.extent[2]}, std::move(values));
  return s;
}

std::vector<VolumeSample> gen_phantoms(std::size_t n, std::uint64_t seed,
                                       const PhantomConfig& cfg) {
  if (n < 1) throw ValueError("gen_phantoms needs n >= 1");
  std::vector<VolumeSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_phantom(seed, i, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Volume files

namespace {

constexpr char kMagic[4] = {'S', 'V', 'O', 'L'};

struct Header {
  std::uint8_t dtype;
  std::array<std::uint32_t, 4> dims;  // C, D, H, W
  Spacing spacing;
};

void write_header(binio::Writer& w, const Header& h) {
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVolumeVersion);
  w.put<std::uint8_t>(h.dtype);
  for (auto d : h.dims) w.put<std::uint32_t>(d);
  for (float s : h.spacing) w.put<float>(s);
}

Header read_header(binio::Reader& rd) {
  if (rd.remaining() < 4) {
    throw FormatError(FormatError::Kind::kBadMagic, "'" + rd.what() + "' is not a volume file");
  }
  char magic[4];
  rd.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::kBadMagic, "'" + rd.what() + "' has a bad magic");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kVolumeVersion) {
    throw FormatError(FormatError::Kind::kUnknownVersion,
                      "'" + rd.what() + "' has unknown volume version " + std::to_string(version));
  }
  Header h;
  h.dtype = rd.get<std::uint8_t>();
  if (h.dtype > 2) {
    throw FormatError(FormatError::Kind::kMismatch, "'" + rd.what() + "' has unknown dtype");
  }
  for (auto& d : h.dims) d = rd.get<std::uint32_t>();
  for (auto& s : h.spacing) s = rd.get<float>();
  return h;
}

std::size_t payload_bytes(const Header& h) {
  const std::size_t elem = h.dtype == 0 ? 4 : h.dtype == 1 ? 8 : 1;
  std::size_t n = elem;
  for (auto d : h.dims) n *= d;
  return n;
}

void check_payload(const binio::Reader& rd, const Header& h) {
  if (rd.remaining() != payload_bytes(h)) {
    throw FormatError(rd.remaining() < payload_bytes(h) ? FormatError::Kind::kTruncated
                                                        : FormatError::Kind::kMismatch,
                      "'" + rd.what() + "': header declares " + std::to_string(payload_bytes(h)) +
                          " payload bytes, file holds " + std::to_string(rd.remaining()));
  }
}

}  // namespace

void write_image(const std::string& path, const Tensor& image, const Spacing& spacing) {
  if (image.rank() != 4) throw ShapeError("write_image expects [C, D, H, W]");
  Header h{kDoublePrecision ? std::uint8_t{1} : std::uint8_t{0}, {}, spacing};
  for (int a = 0; a < 4; ++a) h.dims[a] = static_cast<std::uint32_t>(image.dim(a));
  binio::Writer w;
  write_header(w, h);
  const auto d = image.data();
  w.bytes(d.data(), d.size_bytes());
  w.save(path);
}

void write_label(const std::string& path, const std::vector<std::uint8_t>& label,
                 nn::Triple extent, const Spacing& spacing) {
  if (static_cast<Index>(label.size()) != plane(extent)) {
    throw ShapeError("write_label: label size does not match extent");
  }
  Header h{2, {1, static_cast<std::uint32_t>(extent[0]), static_cast<std::uint32_t>(extent[1]),
               static_cast<std::uint32_t>(extent[2])},
           spacing};
  binio::Writer w;
  write_header(w, h);
  w.bytes(label.data(), label.size());
  w.save(path);
}

ImageFile read_image(const std::string& path) {
  binio::Reader rd = binio::Reader::open(path);
  const Header h = read_header(rd);
  if (h.dtype == 2) throw FormatError(FormatError::Kind::kMismatch, "'" + path + "' is a label file");
  check_payload(rd, h);
  const std::size_t n = static_cast<std::size_t>(h.dims[0]) * h.dims[1] * h.dims[2] * h.dims[3];
  std::vector<Scalar> values(n);
  if (h.dtype == 0) {
    std::vector<float> raw(n);
    rd.bytes(raw.data(), n * 4);
    std::copy(raw.begin(), raw.end(), values.begin());
  } else {
    std::vector<double> raw(n);
    rd.bytes(raw.data(), n * 8);
    std::transform(raw.begin(), raw.end(), values.begin(),
                   [](double v) { return static_cast<Scalar>(v); });
  }
  Shape shape{h.dims[0], h.dims[1], h.dims[2], h.dims[3]};
  return {Tensor::from(std::move(shape), std::move(values)), h.spacing};
}

LabelFile read_label(const std::string& path) {
  binio::Reader rd = binio::Reader::open(path);
  const Header h = read_header(rd);
  if (h.dtype != 2 || h.dims[0] != 1) {
    throw FormatError(FormatError::Kind::kMismatch, "'" + path + "' is not a u8 label file");
  }
  check_payload(rd, h);
  LabelFile f;
  f.extent = {h.dims[1], h.dims[2], h.dims[3]};
  f.label.resize(static_cast<std::size_t>(plane(f.extent)));
  rd.bytes(f.label.data(), f.label.size());
  f.spacing = h.spacing;
  return f;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest '" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const fs::path fp(p);
    return fp.is_absolute() ? fp.string() : (base / fp).string();
  };
  std::vector<ManifestEntry> out;
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (fields.size() != 3) {
      throw ValueError("manifest '" + path + "' line " + std::to_string(lineno) +
                       ": expected 3 tab-separated fields");
    }
    out.push_back({fields[0], resolve(fields[1]), resolve(fields[2])});
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write manifest '" + path + "'");
  for (const auto& e : entries) os << e.id << '\t' << e.image_path << '\t' << e.label_path << '\n';
}

VolumeSample load_sample(const ManifestEntry& entry) {
  VolumeSample s;
  s.id = entry.id;
  ImageFile img = read_image(entry.image_path);
  LabelFile lbl = read_label(entry.label_path);
  s.image = img.image;
  s.spacing = img.spacing;
  s.extent = lbl.extent;
  s.label = std::move(lbl.label);
  s.validate(256);
  return s;
}

std::vector<VolumeSample> load_dataset(const std::string& manifest_path) {
  std::vector<VolumeSample> out;
  for (const auto& e : read_manifest(manifest_path)) out.push_back(load_sample(e));
  if (out.empty()) throw ValueError("manifest '" + manifest_path + "' lists no samples");
  return out;
}

std::string save_dataset(const std::string& dir, const std::vector<VolumeSample>& samples) {
  fs::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (const auto& s : samples) {
    const std::string img = s.id + "_img.svol", lbl = s.id + "_lbl.svol";
    write_image((fs::path(dir) / img).string(), s.image, s.spacing);
    write_label((fs::path(dir) / lbl).string(), s.label, s.extent, s.spacing);
    entries.push_back({s.id, img, lbl});
  }
  const std::string manifest = (fs::path(dir) / "manifest.tsv").string();
  write_manifest(manifest, entries);
  return manifest;
}

Tensor stack_images(const std::vector<const VolumeSample*>& batch) {
  if (batch.empty()) throw ValueError("empty batch");
  const Shape& s0 = batch[0]->image.shape();
  std::vector<Scalar> v;
  for (const auto* s : batch) {
    if (s->image.shape() != s0) throw ShapeError("batch images differ in shape");
    const auto d = s->image.data();
    v.insert(v.end(), d.begin(), d.end());
  }
  Shape shape{static_cast<Index>(batch.size())};
  shape.insert(shape.end(), s0.begin(), s0.end());
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor stack_labels(const std::vector<const VolumeSample*>& batch) {
  if (batch.empty()) throw ValueError("empty batch");
  std::vector<Scalar> v;
  for (const auto* s : batch) {
    if (s->extent != batch[0]->extent) throw ShapeError("batch labels differ in shape");
    v.insert(v.end(), s->label.begin(), s->label.end());
  }
  const auto e = batch[0]->extent;
  return Tensor::from({static_cast<Index>(batch.size()), e[0], e[1], e[2]}, std::move(v));
}

// ---------------------------------------------------------------------------
// Noise

std::string family_name(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::kGaussian: return "gaussian";
    case NoiseFamily::kSpeckle: return "speckle";
    case NoiseFamily::kPeriodic: return "periodic";
    case NoiseFamily::kSaltPepper: return "salt_pepper";
  }
  return "?";
}

NoiseFamily parse_family(const std::string& name) {
  for (NoiseFamily f : kNoiseFamilies) {
    if (family_name(f) == name) return f;
  }
  throw ValueError("unknown noise family '" + name + "'");
}

double NoiseSpec::parameter() const {
  static constexpr std::array<std::array<double, kNoiseLevels>, 4> kTable{{
      {0.0, 2.0, 5.0, 8.0, 10.0, 12.0},
      {0.0, 0.3, 0.5, 0.7, 0.9, 1.1},
      {0.0, 0.5, 1.0, 2.0, 3.5, 5.0},
      {0.0, 0.002, 0.005, 0.008, 0.01, 0.02},
  }};
  validate();
  return kTable[static_cast<std::size_t>(family)][static_cast<std::size_t>(level - 1)];
}

void NoiseSpec::validate() const {
  if (level < 1 || level > kNoiseLevels) {
    throw ValueError("noise level must be in 1.." + std::to_string(kNoiseLevels) + ", got " +
                     std::to_string(level));
  }
  if (static_cast<int>(family) < 0 || static_cast<int>(family) > 3) {
    throw ValueError("unknown noise family");
  }
}

Tensor inject_noise(const Tensor& features, const NoiseSpec& spec) {
  const double p = spec.parameter();
  const auto in = features.data();
  std::vector<Scalar> out(in.begin(), in.end());
  if (p == 0.0) return Tensor::from(features.shape(), std::move(out));
  if (features.rank() < 2) throw ShapeError("inject_noise expects [B, C, ...]");

  const Philox rng = Philox(spec.seed).fork(static_cast<std::uint64_t>(spec.family) + 1);
  Index tokens = 1;
  for (int a = 2; a < features.rank(); ++a) tokens *= features.dim(a);
  const std::size_t n = in.size();

  switch (spec.family) {
    case NoiseFamily::kGaussian:
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<Scalar>(in[i] + p * (2.0 * rng.uniform_at(i) - 1.0));
      }
      break;
    case NoiseFamily::kSpeckle:
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<Scalar>(in[i] * (1.0 + p * rng.normal_at(i)));
      }
      break;
    case NoiseFamily::kPeriodic:
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(static_cast<Index>(i) % tokens);
        out[i] = static_cast<Scalar>(in[i] + p * std::sin(2.0 * std::numbers::pi * t / kPeriodicTokens));
      }
      break;
    case NoiseFamily::kSaltPepper: {
      const auto [lo, hi] = std::minmax_element(in.begin(), in.end());
      for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform_at(2 * i) < p) out[i] = rng.uniform_at(2 * i + 1) < 0.5 ? *lo : *hi;
      }
      break;
    }
  }
  detail::check_finite(out, "inject_noise");
  return Tensor::from(features.shape(), std::move(out));
}

}  // namespace data

DUMAMBA_END_NAMESPACE
