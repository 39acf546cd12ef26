#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ccm/fiber.hpp"
#include "ccm/image.hpp"
#include "ccm/phantom.hpp"

namespace ccm {

enum class SplitMode {
  random,            // seeded shuffle over entries
  structure_disjoint // whole source groups go to one side
};

struct DatasetManifest {
  std::optional<PhantomSpec> phantom;  // absent for imported or tiled objects
  std::string source = "phantom";      // phantom | tiles | imported
  NoiseSpec noise;
  std::string operator_ref;
  std::uint64_t operator_seed = 0;
  std::uint32_t operator_modes = 0;
  std::optional<double> operator_condition;
  double train_fraction = 0.9;
  std::uint64_t split_seed = 0;
  SplitMode split_mode = SplitMode::random;
  /// Set when entries are overlapping raster tiles split at random, so train and test may share structures.
  bool tile_overlapping = false;
  bool aperture_before_resample = true;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

struct DatasetEntry {
  ImageGrid object;
  ImageGrid sensor;
};

struct PairedDataset {
  std::vector<DatasetEntry> entries;
  DatasetManifest manifest;

  /// Train and test indices are disjoint and cover every entry.
  void validate() const;
};

/// Seeded uniform shuffle; the first round(count * train_fraction) indices form the training set.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count, double train_fraction,
                                                                           std::uint64_t split_seed);

/// Shuffles the distinct group labels and assigns whole groups to training until the
/// training share reaches train_fraction.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_group(const std::vector<std::size_t>& groups,
                                                                            double train_fraction,
                                                                            std::uint64_t split_seed);

/// Objects from `spec`, each imaged through `op` with per-entry noise seeds derived from noise.seed.
PairedDataset build_dataset(const PhantomSpec& spec, const TransferOperator& op, const NoiseSpec& noise,
                            std::size_t count, double train_fraction, std::uint64_t split_seed);

/// Pairs arbitrary objects (tiles, imports). `groups` labels the source structure of each object and is
/// required for SplitMode::structure_disjoint.
PairedDataset build_dataset_from_objects(std::vector<ImageGrid> objects, const TransferOperator& op,
                                         const NoiseSpec& noise, double train_fraction, std::uint64_t split_seed,
                                         SplitMode mode = SplitMode::random,
                                         const std::vector<std::size_t>& groups = {});

/// manifest.json + obj_%06d.imgf + sen_%06d.imgf.
void save_dataset(const std::filesystem::path& dir, const PairedDataset& ds);
PairedDataset load_dataset(const std::filesystem::path& dir);

std::string manifest_json(const DatasetManifest& m);
DatasetManifest parse_manifest(const std::string& text);

/// FNV-1a 64 over a file's bytes.
std::uint64_t hash_file(const std::filesystem::path& path);
/// FNV-1a 64 over relative names and contents of every regular file, in sorted order.
std::uint64_t hash_directory(const std::filesystem::path& dir);
std::string hex64(std::uint64_t v);

}  // namespace ccm
