#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ccm/image.hpp"
#include "ccm/random.hpp"

namespace ccm {

enum class PhantomKind { beads, neurons, glyphs };

struct BeadParams {
  double diameter_um = 4.0;
  std::size_t min_count = 1;
  std::size_t max_count = 4;
  double min_separation_um = 6.0;
};

struct NeuronParams {
  double soma_min_um = 4.0;
  double soma_max_um = 7.0;
  std::size_t min_somas = 1;
  std::size_t max_somas = 2;
  std::size_t min_branches = 2;
  std::size_t max_branches = 5;
  double branch_min_um = 8.0;
  double branch_max_um = 20.0;
  double branch_width_um = 2.0;  // at the soma; tapers towards the tip
  double branch_intensity = 0.7;
};

struct GlyphParams {
  std::size_t grid = 8;  // g x g blocks
  double fill = 0.5;
};

struct PhantomSpec {
  std::size_t img_h = 32;
  std::size_t img_w = 32;
  double pitch_um = 1.0;
  std::variant<BeadParams, NeuronParams, GlyphParams> params = BeadParams{};
  std::uint64_t seed = 0;

  PhantomKind kind() const noexcept { return static_cast<PhantomKind>(params.index()); }
  void validate() const;
};

std::string to_string(PhantomKind kind);
PhantomKind phantom_kind_from_string(const std::string& name);

/// Phantom number `index` of the family defined by `spec`; normalized to [0, 1].
ImageGrid generate_phantom(const PhantomSpec& spec, std::uint64_t index);
std::vector<ImageGrid> generate_phantoms(const PhantomSpec& spec, std::size_t count);

/// Max-composites an antialiased disk (pixel-area coverage times `value`). Center in pixel-index coordinates.
void render_disk(ImageGrid& img, double center_row, double center_col, double diameter_um, double value = 1.0);

/// Disks of equal diameter at the given centers, normalized to [0, 1].
ImageGrid render_beads(std::size_t height, std::size_t width, double pitch_um,
                       const std::vector<std::pair<double, double>>& centers, double diameter_um);

/// Row-major grid of FOV-masked square crops stepped by `step_um`. The crop side is the FOV
/// diameter in pixels and each crop is masked by a centered disk of that diameter.
std::vector<ImageGrid> raster_tile(const ImageGrid& large, const ApertureMask& fov, double step_um);

/// Number of raster positions along one axis.
std::size_t raster_positions(double extent_um, double fov_um, double step_um);

}  // namespace ccm
