#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ccm/error.hpp"
#include "ccm/phantom.hpp"

namespace ccm {
namespace {

PhantomSpec bead_spec(std::uint64_t seed = 1) {
  PhantomSpec s;
  s.seed = seed;
  return s;
}

PhantomSpec glyph_spec(double fill, std::uint64_t seed = 1) {
  PhantomSpec s;
  s.params = GlyphParams{8, fill};
  s.seed = seed;
  return s;
}

struct Blob {
  double row = 0, col = 0, mass = 0;
};

// Intensity-weighted centroids of 8-connected lit regions.
std::vector<Blob> blobs(const ImageGrid& img) {
  const std::size_t h = img.height(), w = img.width();
  std::vector<int> label(h * w, -1);
  std::vector<Blob> out;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (img.data()[start] <= 0.0 || label[start] >= 0) continue;
    Blob b;
    std::vector<std::size_t> stack{start};
    label[start] = static_cast<int>(out.size());
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const double v = img.data()[p];
      b.mass += v;
      b.row += v * static_cast<double>(p / w);
      b.col += v * static_cast<double>(p % w);
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const long r = static_cast<long>(p / w) + dr, c = static_cast<long>(p % w) + dc;
          if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c);
          if (img.data()[q] > 0.0 && label[q] < 0) {
            label[q] = label[start];
            stack.push_back(q);
          }
        }
    }
    b.row /= b.mass;
    b.col /= b.mass;
    out.push_back(b);
  }
  return out;
}

TEST(Beads, CenteredBeadAreaMatchesDisk) {
  const ImageGrid img = render_beads(32, 32, 1.0, {{15.5, 15.5}}, 4.0);
  std::size_t lit = 0;
  for (double v : img.data()) lit += v >= 0.5;
  const double area = std::numbers::pi * 4.0;
  EXPECT_NEAR(static_cast<double>(lit), area, 0.15 * area);
  EXPECT_DOUBLE_EQ(img.max(), 1.0);
}

TEST(Beads, RespectMinimumSeparation) {
  const PhantomSpec spec = bead_spec(3);
  const auto& p = std::get<BeadParams>(spec.params);
  for (std::size_t i = 0; i < 200; ++i) {
    const ImageGrid img = generate_phantom(spec, i);
    const auto found = blobs(img);
    ASSERT_GE(found.size(), p.min_count) << "phantom " << i;
    ASSERT_LE(found.size(), p.max_count) << "phantom " << i;
    for (std::size_t a = 0; a < found.size(); ++a)
      for (std::size_t b = a + 1; b < found.size(); ++b)
        EXPECT_GE(std::hypot(found[a].row - found[b].row, found[a].col - found[b].col), p.min_separation_um - 0.05);
  }
}

TEST(Beads, InfeasiblePlacementFails) {
  PhantomSpec spec = bead_spec();
  spec.params = BeadParams{4.0, 30, 30, 20.0};
  EXPECT_THROW(generate_phantom(spec, 0), Error);
}

TEST(Beads, DiameterBelowOnePixelIsRejected) {
  PhantomSpec spec = bead_spec();
  spec.pitch_um = 2.0;
  spec.params = BeadParams{1.5, 1, 2, 6.0};
  EXPECT_THROW(spec.validate(), Error);
}

TEST(Glyphs, EmptyAndFullFill) {
  const ImageGrid empty = generate_phantom(glyph_spec(0.0), 0);
  const ImageGrid full = generate_phantom(glyph_spec(1.0), 0);
  for (double v : empty.data()) EXPECT_EQ(v, 0.0);
  for (double v : full.data()) EXPECT_EQ(v, 1.0);
}

TEST(Glyphs, BlocksAreConstant) {
  const ImageGrid img = generate_phantom(glyph_spec(0.5, 9), 4);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) {
      EXPECT_TRUE(img.at(r, c) == 0.0 || img.at(r, c) == 1.0);
      EXPECT_EQ(img.at(r, c), img.at(r / 4 * 4, c / 4 * 4));
    }
}

TEST(Phantoms, DeterministicPerSeedAndIndex) {
  for (PhantomKind kind : {PhantomKind::beads, PhantomKind::neurons, PhantomKind::glyphs}) {
    PhantomSpec spec = bead_spec(5);
    if (kind == PhantomKind::neurons) spec.params = NeuronParams{};
    if (kind == PhantomKind::glyphs) spec.params = GlyphParams{};
    const auto batch = generate_phantoms(spec, 6);
    for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_EQ(batch[i], generate_phantom(spec, i)) << to_string(kind);
    EXPECT_NE(batch[0], batch[1]) << to_string(kind);
    PhantomSpec other = spec;
    other.seed = 6;
    EXPECT_NE(batch[0], generate_phantom(other, 0)) << to_string(kind);
  }
}

TEST(Phantoms, NormalizedToUnitInterval) {
  for (PhantomKind kind : {PhantomKind::beads, PhantomKind::neurons, PhantomKind::glyphs}) {
    PhantomSpec spec = bead_spec(8);
    if (kind == PhantomKind::neurons) spec.params = NeuronParams{};
    if (kind == PhantomKind::glyphs) spec.params = GlyphParams{};
    for (std::size_t i = 0; i < 30; ++i) {
      const ImageGrid img = generate_phantom(spec, i);
      for (double v : img.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      if (kind != PhantomKind::glyphs) EXPECT_DOUBLE_EQ(img.max(), 1.0);
    }
  }
}

TEST(Phantoms, KindNamesRoundTrip) {
  for (PhantomKind kind : {PhantomKind::beads, PhantomKind::neurons, PhantomKind::glyphs})
    EXPECT_EQ(phantom_kind_from_string(to_string(kind)), kind);
  EXPECT_THROW(phantom_kind_from_string("stars"), Error);
  EXPECT_THROW(generate_phantoms(bead_spec(), 0), Error);
}

TEST(RasterTile, PositionCount) {
  EXPECT_EQ(raster_positions(400.0, 200.0, 80.0), 3u);
  EXPECT_EQ(raster_positions(400.0, 200.0, 400.0), 1u);
  EXPECT_EQ(raster_positions(200.0, 200.0, 80.0), 1u);
  EXPECT_THROW(raster_positions(100.0, 200.0, 80.0), Error);
  EXPECT_THROW(raster_positions(400.0, 200.0, 0.0), Error);
}

TEST(RasterTile, CropsAreMaskedWindowsInRowMajorOrder) {
  ImageGrid large(40, 40, 1.0);
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t c = 0; c < 40; ++c) large.at(r, c) = 1.0 + static_cast<double>(r * 40 + c);
  const auto tiles = raster_tile(large, ApertureMask::centered(large, 20.0), 8.0);
  ASSERT_EQ(tiles.size(), 9u);
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const std::size_t r0 = (t / 3) * 8, c0 = (t % 3) * 8;
    const ImageGrid& crop = tiles[t];
    ASSERT_EQ(crop.height(), 20u);
    const ApertureMask disk = ApertureMask::centered(crop, 20.0);
    for (std::size_t r = 0; r < 20; ++r)
      for (std::size_t c = 0; c < 20; ++c)
        EXPECT_EQ(crop.at(r, c), disk.contains(crop, r, c) ? large.at(r0 + r, c0 + c) : 0.0);
  }
}

TEST(RasterTile, StepEqualToExtentGivesOneCrop) {
  ImageGrid large(50, 50, 2.0);
  for (double& v : large.data()) v = 1.0;
  EXPECT_EQ(raster_tile(large, ApertureMask::centered(large, 40.0), 100.0).size(), 1u);
}

}  // namespace
}  // namespace ccm
