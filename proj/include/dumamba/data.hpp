#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dumamba/nn.hpp"
#include "dumamba/tensor.hpp"

DUMAMBA_BEGIN_NAMESPACE

namespace data {

using Spacing = std::array<float, 3>;

struct VolumeSample {
  std::string id;
  Tensor image;                      // [C, D, H, W]
  std::vector<std::uint8_t> label;   // D * H * W, row-major
  nn::Triple extent{0, 0, 0};        // (D, H, W)
  Spacing spacing{1.0f, 1.0f, 1.0f}; // mm

  /// Labels as a [D, H, W] tensor of integral values.
  Tensor label_tensor() const;
  /// Throws ValueError on inconsistent shapes or labels >= classes.
  void validate(Index classes = 2) const;
};

struct Ellipsoid {
  std::array<double, 3> center;  // voxel coordinates (z, y, x)
  std::array<double, 3> radii;
  double contrast = 1.0;
};

/// Voxels whose centres satisfy sum(((p - c) / r)^2) <= 1.
std::vector<std::uint8_t> render_ellipsoid(nn::Triple extent, const Ellipsoid& e);

struct PhantomConfig {
  nn::Triple extent{32, 32, 32};
  Spacing spacing{1.0f, 1.0f, 1.0f};
  int min_blobs = 1;
  int max_blobs = 3;
  double min_radius = 3.0;
  double max_radius = 7.0;
  double min_contrast = 1.5;
  double max_contrast = 2.5;
  double texture_amplitude = 0.3;  // smooth background variation
  double noise_sigma = 0.1;        // additive white noise
  bool disjoint = true;            // blobs separated by at least one voxel
};

/// Blob layout of sample `index`, a pure function of (seed, index).
std::vector<Ellipsoid> phantom_blobs(std::uint64_t seed, std::uint64_t index,
                                     const PhantomConfig& cfg);
VolumeSample make_phantom(std::uint64_t seed, std::uint64_t index, const PhantomConfig& cfg);
std::vector<VolumeSample> gen_phantoms(std::size_t n, std::uint64_t seed,
                                       const PhantomConfig& cfg = {});

// ---------------------------------------------------------------------------
// .svol files: "SVOL", u32 version, u8 dtype {0 f32, 1 f64, 2 u8},
// u32 C, D, H, W, 3 x f32 spacing, little-endian payload.

inline constexpr std::uint32_t kVolumeVersion = 1;

void write_image(const std::string& path, const Tensor& image, const Spacing& spacing);
void write_label(const std::string& path, const std::vector<std::uint8_t>& label,
                 nn::Triple extent, const Spacing& spacing);

struct ImageFile {
  Tensor image;
  Spacing spacing;
};
struct LabelFile {
  std::vector<std::uint8_t> label;
  nn::Triple extent;
  Spacing spacing;
};
ImageFile read_image(const std::string& path);
LabelFile read_label(const std::string& path);

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string label_path;
};

/// One line per sample: "id\timage_path\tlabel_path". Relative paths are
/// resolved against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

VolumeSample load_sample(const ManifestEntry& entry);
std::vector<VolumeSample> load_dataset(const std::string& manifest_path);
/// Writes `<dir>/<id>_img.svol`, `<dir>/<id>_lbl.svol` and `<dir>/manifest.tsv`.
std::string save_dataset(const std::string& dir, const std::vector<VolumeSample>& samples);

/// Stacks images into [B, C, D, H, W] and labels into [B, D, H, W].
Tensor stack_images(const std::vector<const VolumeSample*>& batch);
Tensor stack_labels(const std::vector<const VolumeSample*>& batch);

// ---------------------------------------------------------------------------
// Feature-space noise.

enum class NoiseFamily { kGaussian, kSpeckle, kPeriodic, kSaltPepper };

inline constexpr int kNoiseLevels = 6;
inline constexpr std::array<NoiseFamily, 4> kNoiseFamilies{
    NoiseFamily::kGaussian, NoiseFamily::kSpeckle, NoiseFamily::kPeriodic,
    NoiseFamily::kSaltPepper};
/// Tokens per period of the periodic family.
inline constexpr double kPeriodicTokens = 16.0;

std::string family_name(NoiseFamily f);
NoiseFamily parse_family(const std::string& name);

struct NoiseSpec {
  NoiseFamily family = NoiseFamily::kGaussian;
  int level = 1;  // 1..6
  std::uint64_t seed = 0;

  /// Bound (gaussian), scale (speckle), amplitude (periodic) or probability
  /// (salt and pepper). Level 1 is always 0.
  double parameter() const;
  void validate() const;
};

/// Perturbs a [B, C, D, H, W] feature map. Draws are indexed by element, so
/// the same seed perturbs the same elements at every level. The result does
/// not participate in the tape.
Tensor inject_noise(const Tensor& features, const NoiseSpec& spec);

}  // namespace data

DUMAMBA_END_NAMESPACE
