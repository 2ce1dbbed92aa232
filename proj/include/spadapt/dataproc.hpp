#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spadapt/tensor.hpp"

namespace spadapt {

/// One k-channel image, values in [0,1].
struct HyperImage {
  Tensor data;  // [k, H, W]
  int label = 0;
  std::string source_id;
};

struct ColorCenters {
  std::vector<std::array<double, 3>> centers;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  /// Sum of squared distances to the nearest center.
  double objective = 0.0;

  std::size_t k() const { return centers.size(); }
  nlohmann::json to_json() const;
  static ColorCenters from_json(const nlohmann::json& j);
};

struct KMeansOptions {
  std::size_t max_iter = 100;
  /// Independent k-means++ seedings; the lowest objective wins.
  std::size_t n_init = 10;
};

/// Lloyd iterations from k-means++ seeding over pixels [M, 3]; an emptied
/// cluster is moved to the point farthest from its current center.
ColorCenters kmeans(const Tensor& pixels, std::size_t k, std::uint64_t seed,
                    const KMeansOptions& opts = {});

/// f[i](x,y) = exp(-||rgb(x,y) - c_i||^2) for an RGB image [3, H, W].
Tensor expand_channels(const Tensor& rgb, const ColorCenters& centers, DType dtype = DType::f32);
HyperImage expand_channels(const HyperImage& rgb, const ColorCenters& centers);

/// Per-pixel least-squares solution of the linearized trilateration system
///   -2 c_i . x + s = -ln f_i - ||c_i||^2,  s = ||x||^2
/// Needs k >= 4 centers that span 3-space affinely.
Tensor invert_expansion(const Tensor& expanded, const ColorCenters& centers);

/// out[c] = img[perm[c]]; `perm` must be a permutation of [0, k).
Tensor permute_channels(const Tensor& img, std::span<const std::size_t> perm);
/// ITU-R BT.601 luma replicated to 3 channels.
Tensor to_grayscale(const Tensor& img);
/// Box-filter downsample by `factor`, then nearest-neighbour upsample back.
Tensor low_resolution(const Tensor& img, std::size_t factor = 4);
Tensor hflip(const Tensor& img);

inline constexpr std::array<double, 3> kBt601{0.299, 0.587, 0.114};

struct Dataset {
  std::string name;
  std::vector<std::string> class_names;
  std::size_t channels = 3;
  std::vector<HyperImage> train;
  std::vector<HyperImage> test;
  /// Everything needed to regenerate the dataset: recipe, seeds, centers,
  /// transform chain.
  nlohmann::json generation;

  std::size_t num_classes() const { return class_names.size(); }
};

struct ToyDatasetParams {
  std::uint64_t seed = 0;
  std::size_t classes = 8;
  std::size_t per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t image_size = 32;
  /// First global class id. Datasets with disjoint [offset, offset+classes)
  /// ranges share no class.
  std::size_t class_offset = 0;

  nlohmann::json to_json() const;
  static ToyDatasetParams from_json(const nlohmann::json& j);
};

inline constexpr std::size_t kToyShapes = 8;
inline constexpr std::size_t kToyColors = 8;
std::string toy_class_name(std::size_t global_class);

/// Procedural shapes (disk, square, triangle, cross, ring, bar, star, half
/// disk) in palette colors over a textured background with achromatic clutter.
/// Global class g has shape g % 8 and color (g / 8) % 8.
Dataset gen_toy_color_dataset(const ToyDatasetParams& params);

/// Pixels sampled (deterministically) from the training images, [M, 3].
Tensor sample_pixels(const Dataset& rgb, std::size_t max_pixels, std::uint64_t seed);

/// Fits k color centers on the training pixels and applies expand_channels
/// to every image.
Dataset expand_dataset(const Dataset& rgb, std::size_t k, std::uint64_t seed,
                       std::size_t max_pixels = 20000);

enum class Degradation { permute, grayscale, low_resolution };

/// Applies one transform to every image of both splits.
Dataset permute_dataset(const Dataset& d, std::span<const std::size_t> perm);
Dataset grayscale_dataset(const Dataset& d);
Dataset low_resolution_dataset(const Dataset& d, std::size_t factor = 4);

/// Manifest (manifest.json) plus one tensor file per sample under images/.
void write_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset read_dataset(const std::filesystem::path& dir);

/// Stacks images into a batch tensor [n, k, H, W].
Tensor stack_images(const std::vector<HyperImage>& images, std::span<const std::size_t> rows,
                    DType dtype);

}  // namespace spadapt
