#pragma once

// Synthetic 3D world: volumes, target masks, multi-view rendering, the frozen
// segmentation executor and the Dice metric.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "skillloop/common.hpp"

namespace skillloop::volume {

struct Dims {
  int depth = 1;
  int height = 1;
  int width = 1;

  std::size_t voxels() const {
    return static_cast<std::size_t>(depth) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(height) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(width) +
           static_cast<std::size_t>(x);
  }
  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < depth && y < height && x < width;
  }
  std::string str() const;
  bool operator==(const Dims&) const = default;
};

struct Spacing {
  double dz = 1.0;
  double dy = 1.0;
  double dx = 1.0;
  bool operator==(const Spacing&) const = default;
};

/// Scalar volume, row-major (z, y, x), intensities in [0, 1].
struct Volume {
  std::string id;
  Dims dims;
  Spacing spacing;
  std::vector<float> intensities;

  float at(int z, int y, int x) const { return intensities[dims.index(z, y, x)]; }
  void validate() const;
  bool operator==(const Volume&) const = default;
};

struct Mask {
  Dims dims;
  std::vector<std::uint8_t> voxels;

  static Mask empty(Dims dims) { return Mask{dims, std::vector<std::uint8_t>(dims.voxels(), 0)}; }
  bool at(int z, int y, int x) const { return voxels[dims.index(z, y, x)] != 0; }
  void set(int z, int y, int x, bool v = true) { voxels[dims.index(z, y, x)] = v ? 1 : 0; }
  std::size_t count() const;
  bool is_subset_of(const Mask& other) const;
  /// Content digest used in episode logs in place of raw voxels.
  std::string digest() const;
  bool operator==(const Mask&) const = default;
};

struct TargetSpec {
  std::string target_id;
  std::vector<std::string> synonyms;
  std::optional<Laterality> laterality;
  std::vector<std::string> subregion_ids;
  Mask mask;
  bool operator==(const TargetSpec&) const = default;
};

struct SceneCase {
  std::string case_id;
  Volume volume;
  std::map<std::string, TargetSpec> targets;

  void validate() const;
  /// Case-insensitive lookup by target id or synonym.
  const TargetSpec* find(std::string_view name) const;
  /// The target listing `target_id` among its subregions, if any.
  const TargetSpec* parent_of(std::string_view target_id) const;
  bool operator==(const SceneCase&) const = default;
};

// ---------------- rendering ----------------

enum class Plane { axial, coronal, sagittal };
enum class ViewKind { mid_slice, mip };

std::string_view to_string(Plane p);
std::string_view to_string(ViewKind k);

struct View {
  Plane plane = Plane::axial;
  ViewKind kind = ViewKind::mid_slice;
  int rows = 0;
  int cols = 0;
  std::vector<float> pixels;  // row-major
  std::string caption;

  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)]; }
};

struct ViewConfig {
  std::vector<Plane> planes = {Plane::axial, Plane::coronal, Plane::sagittal};
  std::vector<ViewKind> kinds = {ViewKind::mid_slice, ViewKind::mip};
};

/// Axial views are (rows=y, cols=x), coronal (z, x), sagittal (z, y).
/// Mid-slices take index dim/2 along the collapsed axis.
std::vector<View> render_views(const Volume& volume, const ViewConfig& config = {});

std::string view_caption(Plane p, ViewKind k);
/// Captions produced by the default view configuration, in render order.
const std::vector<std::string>& standard_captions();

// ---------------- executor ----------------

struct NoiseConfig {
  int max_boundary_voxels = 0;
};

struct Resolution {
  const TargetSpec* target = nullptr;
  std::vector<std::string> issues;  // UNRESOLVED_TARGET, LATERALITY_UNSUPPORTED, ...
};

/// Resolves an answer against the case's target table: target id or synonym,
/// then the laterality filter, then the subregion filter.
Resolution resolve_answer(const SceneCase& scene, const CanonicalAnswer& answer);

struct Execution {
  Mask mask;
  bool unresolved = false;
  std::vector<std::string> issues;
};

/// Frozen segmentation executor. Returns the resolved ground-truth mask after
/// an optional seeded boundary perturbation; unresolvable answers yield an
/// empty mask with `unresolved` set.
Execution execute_segmentation(const SceneCase& scene, const CanonicalAnswer& answer,
                               const NoiseConfig& noise, std::uint64_t seed);

/// Boundary voxels eligible for erosion (inside, 6-adjacent to outside or the
/// volume border) or dilation (outside, 6-adjacent to inside), ascending index.
std::vector<std::size_t> surface_voxels(const Mask& mask, bool dilate);

/// The perturbation applied by execute_segmentation, exposed for reuse.
Mask perturb_boundary(const Mask& mask, int max_boundary_voxels, std::uint64_t seed);

/// 2|A∩B| / (|A|+|B|); both empty gives 1.0. Throws on dims mismatch.
double dice(const Mask& pred, const Mask& gt);

// ---------------- corpus ----------------

struct CorpusConfig {
  int cases = 50;
  Dims dims{12, 20, 20};
  Spacing spacing{};
  bool laterality = true;
  bool subregions = true;
  int lesions_per_side = 1;
  int min_radius = 2;
  int max_radius = 3;
};

/// Deterministic desk-scale phantoms: lateralized spherical lesions in the
/// upper half of the y range and a box-shaped fragment with superior/inferior
/// parts in the lower half. "left" means x below the mid-sagittal plane.
std::vector<SceneCase> synth_corpus(const CorpusConfig& config, std::uint64_t seed);

// ---------------- on-disk format ----------------

/// Writes `case.json`, `volume.f32` and `masks/<target>.u8` under `dir`.
void save_case(const SceneCase& scene, const std::filesystem::path& dir);
SceneCase load_case(const std::filesystem::path& dir);
/// Binary PGM (P5), 8-bit, pixel = round(255 * value).
void write_pgm(const View& view, const std::filesystem::path& path);
std::string encode_pgm(const View& view);

}  // namespace skillloop::volume
