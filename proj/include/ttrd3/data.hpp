#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ttrd3/nn.hpp"
#include "ttrd3/rddm.hpp"

namespace ttrd3 {

/// Separable cubic resampling (a = -0.5) with half-sample symmetric borders.
/// When shrinking, the kernel is stretched by the scale factor so the result
/// is antialiased.
ImagePlane resize_bicubic(const ImagePlane& img, int out_height, int out_width);

ImagePlane degrade_bicubic(const ImagePlane& img, int factor);
ImagePlane upsample_bicubic(const ImagePlane& img, int factor);

/// Ref down-then-up at the same size as `ref`.
ImagePlane make_ref_pair(const ImagePlane& ref, int factor);

enum class Split { Train, Reference, Validation };

std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string path;
  std::string category;
  Split split = Split::Train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  int sr_factor = 4;

  [[nodiscard]] std::vector<ManifestEntry> in_split(Split s) const;
};

/// Stratified 6:3:1 split. Categories are processed in sorted order and
/// shuffled with `seed`.
DatasetManifest split_dataset(const std::vector<std::pair<std::string, std::string>>& items, std::uint64_t seed,
                              int sr_factor = 4);

enum class PairingPolicy { SameCategory, Random, Noise };

PairingPolicy parse_pairing(const std::string& s);
std::string to_string(PairingPolicy p);

/// Prefix of the path token returned by the noise policy.
inline constexpr const char* kNoiseRefPrefix = "noise:";

/// Reference path for `item`, drawn deterministically from (seed, item path).
/// The noise policy returns "noise:<n>" where n seeds make_noise_reference.
std::string pair_reference(const ManifestEntry& item, const DatasetManifest& manifest, PairingPolicy policy,
                           std::uint64_t seed);

/// Standard-normal image.
ImagePlane make_noise_reference(int channels, int height, int width, std::uint64_t seed);

/// Seed encoded in a noise token, or false if `path` is not one.
bool parse_noise_token(const std::string& path, std::uint64_t* seed);

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

/// 8-bit RGB PNG to [0,1]; gray and alpha inputs are converted.
ImagePlane load_png(const std::string& path);
/// Clamps to [0,1] and quantizes with round-half-even. 1 or 3 channels.
void save_png(const ImagePlane& img, const std::string& path);

/// The four size x size corner crops: top-left, top-right, bottom-left, bottom-right.
std::array<ImagePlane, 4> corner_crops(const ImagePlane& img, int size);
ImagePlane pick_corner_crop(const ImagePlane& img, int size, Rng& rng);

ImagePlane crop(const ImagePlane& img, int top, int left, int height, int width);

/// Synthetic scene made of flat shapes and striped textures. Rendering is
/// continuous in (x + dx, y + dy), so the same seed with a different offset
/// gives a shifted view of the same scene.
ImagePlane render_toy_scene(int height, int width, std::uint64_t seed, double dx = 0.0, double dy = 0.0);

/// An HR scene and a shifted reference view of it.
std::pair<ImagePlane, ImagePlane> toy_pair(int size, std::uint64_t seed);

}  // namespace ttrd3
