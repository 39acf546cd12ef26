#include "ccm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ccm/error.hpp"

namespace ccm {

namespace {

constexpr int kSupersample = 16;
constexpr int kPlacementAttempts = 1000;

template <typename... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

std::size_t uniform_count(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform_real(Rng& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

ImageGrid make_beads(const PhantomSpec& spec, const BeadParams& p, Rng& rng) {
  ImageGrid img(spec.img_h, spec.img_w, spec.pitch_um);
  const double radius_px = p.diameter_um / (2.0 * spec.pitch_um);
  const double sep_px = p.min_separation_um / spec.pitch_um;
  const double row_hi = static_cast<double>(spec.img_h) - 1.0 - radius_px;
  const double col_hi = static_cast<double>(spec.img_w) - 1.0 - radius_px;
  if (row_hi < radius_px || col_hi < radius_px)
    throw Error(ErrorKind::invalid_argument, "infeasible bead placement: bead does not fit in the image");

  const std::size_t count = uniform_count(rng, p.min_count, p.max_count);
  std::vector<std::pair<double, double>> centers;
  for (std::size_t b = 0; b < count; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const double r = uniform_real(rng, radius_px, row_hi);
      const double c = uniform_real(rng, radius_px, col_hi);
      placed = std::all_of(centers.begin(), centers.end(),
                           [&](const auto& q) { return std::hypot(q.first - r, q.second - c) >= sep_px; });
      if (placed) centers.emplace_back(r, c);
    }
    if (!placed)
      throw Error(ErrorKind::invalid_argument,
                  "infeasible bead placement: minimum separation not met after " +
                      std::to_string(kPlacementAttempts) + " attempts");
  }
  for (const auto& [r, c] : centers) render_disk(img, r, c, p.diameter_um);
  return img;
}

ImageGrid make_neuron(const PhantomSpec& spec, const NeuronParams& p, Rng& rng) {
  ImageGrid img(spec.img_h, spec.img_w, spec.pitch_um);
  const double h = static_cast<double>(spec.img_h);
  const double w = static_cast<double>(spec.img_w);
  std::normal_distribution<double> turn(0.0, 0.3);
  const double step_px = 0.5;

  const std::size_t somas = uniform_count(rng, p.min_somas, p.max_somas);
  for (std::size_t s = 0; s < somas; ++s) {
    const double soma_um = uniform_real(rng, p.soma_min_um, p.soma_max_um);
    const double soma_r_px = soma_um / (2.0 * spec.pitch_um);
    const double r0 = uniform_real(rng, std::min(soma_r_px, h / 2), std::max(h - 1.0 - soma_r_px, h / 2));
    const double c0 = uniform_real(rng, std::min(soma_r_px, w / 2), std::max(w - 1.0 - soma_r_px, w / 2));

    const std::size_t branches = uniform_count(rng, p.min_branches, p.max_branches);
    for (std::size_t b = 0; b < branches; ++b) {
      double theta = uniform_real(rng, 0.0, 2.0 * std::numbers::pi);
      double r = r0 + soma_r_px * std::sin(theta);
      double c = c0 + soma_r_px * std::cos(theta);
      const double length_px = uniform_real(rng, p.branch_min_um, p.branch_max_um) / spec.pitch_um;
      const auto steps = static_cast<std::size_t>(length_px / step_px);
      for (std::size_t k = 0; k <= steps; ++k) {
        const double frac = steps ? static_cast<double>(k) / static_cast<double>(steps) : 0.0;
        const double width_um = std::max(p.branch_width_um * (1.0 - 0.7 * frac), spec.pitch_um * 0.5);
        render_disk(img, r, c, width_um, p.branch_intensity);
        theta += turn(rng);
        r += step_px * std::sin(theta);
        c += step_px * std::cos(theta);
        if (r < 0.0 || c < 0.0 || r > h - 1.0 || c > w - 1.0) break;
      }
    }
    render_disk(img, r0, c0, soma_um, 1.0);
  }
  return img;
}

ImageGrid make_glyph(const PhantomSpec& spec, const GlyphParams& p, Rng& rng) {
  std::bernoulli_distribution lit(p.fill);
  std::vector<char> blocks(p.grid * p.grid);
  for (auto& b : blocks) b = lit(rng) ? 1 : 0;
  ImageGrid img(spec.img_h, spec.img_w, spec.pitch_um);
  for (std::size_t r = 0; r < spec.img_h; ++r)
    for (std::size_t c = 0; c < spec.img_w; ++c) {
      const std::size_t br = r * p.grid / spec.img_h;
      const std::size_t bc = c * p.grid / spec.img_w;
      img.at(r, c) = blocks[br * p.grid + bc];
    }
  return img;
}

}  // namespace

void PhantomSpec::validate() const {
  if (img_h == 0 || img_w == 0) throw Error(ErrorKind::invalid_argument, "phantom image must be non-empty");
  if (!(pitch_um > 0.0)) throw Error(ErrorKind::invalid_argument, "phantom pitch must be positive");
  std::visit(Overloaded{
                 [&](const BeadParams& p) {
                   if (!(p.diameter_um > 0.0) || !(p.min_separation_um >= 0.0))
                     throw Error(ErrorKind::invalid_argument, "bead geometry must be positive");
                   if (p.diameter_um < pitch_um)
                     throw Error(ErrorKind::invalid_argument, "bead diameter must be at least one pixel");
                   if (p.min_count < 1 || p.max_count < p.min_count)
                     throw Error(ErrorKind::invalid_argument, "bead count range must satisfy 1 <= min <= max");
                 },
                 [&](const NeuronParams& p) {
                   if (!(p.soma_min_um > 0.0) || p.soma_max_um < p.soma_min_um || !(p.branch_min_um > 0.0) ||
                       p.branch_max_um < p.branch_min_um || !(p.branch_width_um > 0.0) ||
                       !(p.branch_intensity > 0.0))
                     throw Error(ErrorKind::invalid_argument, "neuron geometry must be positive with min <= max");
                   if (p.min_somas < 1 || p.max_somas < p.min_somas || p.max_branches < p.min_branches)
                     throw Error(ErrorKind::invalid_argument, "neuron count ranges must satisfy min <= max");
                 },
                 [&](const GlyphParams& p) {
                   if (p.grid < 1 || p.grid > std::min(img_h, img_w))
                     throw Error(ErrorKind::invalid_argument, "glyph grid must be between 1 and the image side");
                   if (!(p.fill >= 0.0 && p.fill <= 1.0))
                     throw Error(ErrorKind::invalid_argument, "glyph fill probability must be in [0, 1]");
                 },
             },
             params);
}

std::string to_string(PhantomKind kind) {
  switch (kind) {
    case PhantomKind::beads: return "beads";
    case PhantomKind::neurons: return "neurons";
    case PhantomKind::glyphs: return "glyphs";
  }
  return "unknown";
}

PhantomKind phantom_kind_from_string(const std::string& name) {
  if (name == "beads") return PhantomKind::beads;
  if (name == "neurons") return PhantomKind::neurons;
  if (name == "glyphs") return PhantomKind::glyphs;
  throw Error(ErrorKind::invalid_argument, "unknown phantom kind '" + name + "' (beads, neurons, glyphs)");
}

void render_disk(ImageGrid& img, double center_row, double center_col, double diameter_um, double value) {
  const double radius = diameter_um / (2.0 * img.pitch_um());
  const double r2 = radius * radius;
  const auto lo_r = static_cast<long>(std::floor(center_row - radius - 1.0));
  const auto hi_r = static_cast<long>(std::ceil(center_row + radius + 1.0));
  const auto lo_c = static_cast<long>(std::floor(center_col - radius - 1.0));
  const auto hi_c = static_cast<long>(std::ceil(center_col + radius + 1.0));
  const long h = static_cast<long>(img.height());
  const long w = static_cast<long>(img.width());

  for (long r = std::max(0L, lo_r); r <= std::min(h - 1, hi_r); ++r) {
    for (long c = std::max(0L, lo_c); c <= std::min(w - 1, hi_c); ++c) {
      // Pixel (r, c) spans [r - 0.5, r + 0.5] x [c - 0.5, c + 0.5].
      const double dr = std::abs(static_cast<double>(r) - center_row);
      const double dc = std::abs(static_cast<double>(c) - center_col);
      const double near_r = std::max(0.0, dr - 0.5);
      const double near_c = std::max(0.0, dc - 0.5);
      if (near_r * near_r + near_c * near_c >= r2) continue;
      double coverage = 1.0;
      const double far_r = dr + 0.5;
      const double far_c = dc + 0.5;
      if (far_r * far_r + far_c * far_c > r2) {
        int inside = 0;
        for (int i = 0; i < kSupersample; ++i) {
          const double sr = static_cast<double>(r) - 0.5 + (i + 0.5) / kSupersample - center_row;
          for (int j = 0; j < kSupersample; ++j) {
            const double sc = static_cast<double>(c) - 0.5 + (j + 0.5) / kSupersample - center_col;
            if (sr * sr + sc * sc <= r2) ++inside;
          }
        }
        coverage = static_cast<double>(inside) / (kSupersample * kSupersample);
      }
      auto& px = img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      px = std::max(px, coverage * value);
    }
  }
}

ImageGrid render_beads(std::size_t height, std::size_t width, double pitch_um,
                       const std::vector<std::pair<double, double>>& centers, double diameter_um) {
  ImageGrid img(height, width, pitch_um);
  for (const auto& [r, c] : centers) render_disk(img, r, c, diameter_um);
  return normalize_unit(img);
}

ImageGrid generate_phantom(const PhantomSpec& spec, std::uint64_t index) {
  spec.validate();
  auto rng = make_rng(spec.seed, Stream::phantom, index);
  ImageGrid img = std::visit(Overloaded{
                                 [&](const BeadParams& p) { return make_beads(spec, p, rng); },
                                 [&](const NeuronParams& p) { return make_neuron(spec, p, rng); },
                                 [&](const GlyphParams& p) { return make_glyph(spec, p, rng); },
                             },
                             spec.params);
  return normalize_unit(img);
}

std::vector<ImageGrid> generate_phantoms(const PhantomSpec& spec, std::size_t count) {
  if (count < 1) throw Error(ErrorKind::invalid_argument, "phantom count must be >= 1");
  std::vector<ImageGrid> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_phantom(spec, i));
  return out;
}

std::size_t raster_positions(double extent_um, double fov_um, double step_um) {
  if (!(step_um > 0.0)) throw Error(ErrorKind::invalid_argument, "raster step must be positive");
  if (fov_um > extent_um) throw Error(ErrorKind::invalid_argument, "field of view does not fit in the object");
  return static_cast<std::size_t>(std::floor((extent_um - fov_um) / step_um + 1e-9)) + 1;
}

std::vector<ImageGrid> raster_tile(const ImageGrid& large, const ApertureMask& fov, double step_um) {
  const double pitch = large.pitch_um();
  const auto side = static_cast<std::size_t>(std::lround(fov.diameter_um / pitch));
  if (side == 0) throw Error(ErrorKind::invalid_argument, "field of view is smaller than one pixel");
  if (side > large.height() || side > large.width())
    throw Error(ErrorKind::invalid_argument, "field of view does not fit in the object");

  const std::size_t n_rows = raster_positions(static_cast<double>(large.height()) * pitch, fov.diameter_um, step_um);
  const std::size_t n_cols = raster_positions(static_cast<double>(large.width()) * pitch, fov.diameter_um, step_um);

  std::vector<ImageGrid> tiles;
  tiles.reserve(n_rows * n_cols);
  for (std::size_t i = 0; i < n_rows; ++i) {
    const auto r0 = std::min(large.height() - side, static_cast<std::size_t>(std::lround(i * step_um / pitch)));
    for (std::size_t j = 0; j < n_cols; ++j) {
      const auto c0 = std::min(large.width() - side, static_cast<std::size_t>(std::lround(j * step_um / pitch)));
      ImageGrid crop(side, side, pitch);
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) crop.at(r, c) = large.at(r0 + r, c0 + c);
      tiles.push_back(apply_aperture(crop, ApertureMask::centered(crop, fov.diameter_um)));
    }
  }
  return tiles;
}

}  // namespace ccm
