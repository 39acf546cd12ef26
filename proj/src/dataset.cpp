#include "ccm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "ccm/error.hpp"
#include "json.hpp"

namespace ccm {

namespace {

using nlohmann::json;

json phantom_to_json(const PhantomSpec& s) {
  json j{{"kind", to_string(s.kind())},
         {"img_h", s.img_h},
         {"img_w", s.img_w},
         {"pitch_um", s.pitch_um},
         {"seed", s.seed}};
  if (const auto* b = std::get_if<BeadParams>(&s.params)) {
    j["params"] = {{"diameter_um", b->diameter_um},
                   {"min_count", b->min_count},
                   {"max_count", b->max_count},
                   {"min_separation_um", b->min_separation_um}};
  } else if (const auto* n = std::get_if<NeuronParams>(&s.params)) {
    j["params"] = {{"soma_min_um", n->soma_min_um},       {"soma_max_um", n->soma_max_um},
                   {"min_somas", n->min_somas},           {"max_somas", n->max_somas},
                   {"min_branches", n->min_branches},     {"max_branches", n->max_branches},
                   {"branch_min_um", n->branch_min_um},   {"branch_max_um", n->branch_max_um},
                   {"branch_width_um", n->branch_width_um}, {"branch_intensity", n->branch_intensity}};
  } else if (const auto* g = std::get_if<GlyphParams>(&s.params)) {
    j["params"] = {{"grid", g->grid}, {"fill", g->fill}};
  }
  return j;
}

PhantomSpec phantom_from_json(const json& j) {
  PhantomSpec s;
  s.img_h = j.at("img_h").get<std::size_t>();
  s.img_w = j.at("img_w").get<std::size_t>();
  s.pitch_um = j.at("pitch_um").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  const json& p = j.at("params");
  switch (phantom_kind_from_string(j.at("kind").get<std::string>())) {
    case PhantomKind::beads:
      s.params = BeadParams{p.at("diameter_um").get<double>(), p.at("min_count").get<std::size_t>(),
                            p.at("max_count").get<std::size_t>(), p.at("min_separation_um").get<double>()};
      break;
    case PhantomKind::neurons: {
      NeuronParams n;
      n.soma_min_um = p.at("soma_min_um").get<double>();
      n.soma_max_um = p.at("soma_max_um").get<double>();
      n.min_somas = p.at("min_somas").get<std::size_t>();
      n.max_somas = p.at("max_somas").get<std::size_t>();
      n.min_branches = p.at("min_branches").get<std::size_t>();
      n.max_branches = p.at("max_branches").get<std::size_t>();
      n.branch_min_um = p.at("branch_min_um").get<double>();
      n.branch_max_um = p.at("branch_max_um").get<double>();
      n.branch_width_um = p.at("branch_width_um").get<double>();
      n.branch_intensity = p.at("branch_intensity").get<double>();
      s.params = n;
      break;
    }
    case PhantomKind::glyphs:
      s.params = GlyphParams{p.at("grid").get<std::size_t>(), p.at("fill").get<double>()};
      break;
  }
  return s;
}

std::string entry_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%06zu.imgf", prefix, i);
  return buf;
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

std::uint64_t fnv_update(std::uint64_t h, const char* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= kFnvPrime;
  }
  return h;
}

std::uint64_t fnv_stream(std::uint64_t h, std::istream& is) {
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv_update(h, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return h;
}

void check_fraction(double f) {
  if (!(f > 0.0 && f < 1.0)) throw Error(ErrorKind::invalid_argument, "train_fraction must be in (0, 1)");
}

}  // namespace

void PairedDataset::validate() const {
  std::vector<char> seen(entries.size(), 0);
  auto mark = [&](std::size_t i, const char* which) {
    if (i >= entries.size())
      throw Error(ErrorKind::format, std::string(which) + " index " + std::to_string(i) + " out of range");
    if (seen[i]) throw Error(ErrorKind::format, "index " + std::to_string(i) + " appears in more than one split slot");
    seen[i] = 1;
  };
  for (auto i : manifest.train_indices) mark(i, "train");
  for (auto i : manifest.test_indices) mark(i, "test");
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw Error(ErrorKind::format, "train and test splits do not cover every entry");
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count, double train_fraction,
                                                                           std::uint64_t split_seed) {
  check_fraction(train_fraction);
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  auto rng = make_rng(split_seed, Stream::split);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train =
      std::min<std::size_t>(count, static_cast<std::size_t>(std::llround(static_cast<double>(count) * train_fraction)));
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_group(const std::vector<std::size_t>& groups,
                                                                            double train_fraction,
                                                                            std::uint64_t split_seed) {
  check_fraction(train_fraction);
  std::vector<std::size_t> labels(std::set<std::size_t>(groups.begin(), groups.end()).size());
  {
    std::set<std::size_t> unique(groups.begin(), groups.end());
    std::copy(unique.begin(), unique.end(), labels.begin());
  }
  auto rng = make_rng(split_seed, Stream::split);
  std::shuffle(labels.begin(), labels.end(), rng);
  const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(groups.size()) * train_fraction));

  std::set<std::size_t> train_groups;
  std::size_t taken = 0;
  for (auto g : labels) {
    if (taken >= target) break;
    train_groups.insert(g);
    taken += static_cast<std::size_t>(std::count(groups.begin(), groups.end(), g));
  }
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < groups.size(); ++i) (train_groups.count(groups[i]) ? train : test).push_back(i);
  return {std::move(train), std::move(test)};
}

PairedDataset build_dataset_from_objects(std::vector<ImageGrid> objects, const TransferOperator& op,
                                         const NoiseSpec& noise, double train_fraction, std::uint64_t split_seed,
                                         SplitMode mode, const std::vector<std::size_t>& groups) {
  check_fraction(train_fraction);
  noise.validate();
  if (objects.empty()) throw Error(ErrorKind::invalid_argument, "dataset needs at least one object");
  PairedDataset ds;
  ds.entries.reserve(objects.size());
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].size() != op.n_obj()) {
      std::ostringstream msg;
      msg << "object " << i << " is " << objects[i].height() << "x" << objects[i].width() << " but the operator expects "
          << op.obj_h << "x" << op.obj_w;
      throw Error(ErrorKind::shape, msg.str());
    }
    NoiseSpec entry_noise = noise;
    entry_noise.seed = derive_seed(noise.seed, Stream::dataset_noise, i);
    ImageGrid obj = normalize_unit(objects[i]);
    ImageGrid sen = forward(op, obj, entry_noise);
    ds.entries.push_back({std::move(obj), std::move(sen)});
  }

  auto& m = ds.manifest;
  m.noise = noise;
  m.operator_seed = op.seed;
  m.operator_modes = op.mode_count;
  m.operator_condition = op.condition_estimate;
  m.train_fraction = train_fraction;
  m.split_seed = split_seed;
  m.split_mode = mode;
  if (mode == SplitMode::structure_disjoint) {
    if (groups.size() != objects.size())
      throw Error(ErrorKind::invalid_argument, "structure-disjoint split needs one group label per object");
    std::tie(m.train_indices, m.test_indices) = split_by_group(groups, train_fraction, split_seed);
  } else {
    std::tie(m.train_indices, m.test_indices) = split_indices(objects.size(), train_fraction, split_seed);
  }
  return ds;
}

PairedDataset build_dataset(const PhantomSpec& spec, const TransferOperator& op, const NoiseSpec& noise,
                            std::size_t count, double train_fraction, std::uint64_t split_seed) {
  spec.validate();
  if (spec.img_h * spec.img_w != op.n_obj()) {
    std::ostringstream msg;
    msg << "phantom grid " << spec.img_h << "x" << spec.img_w << " does not match operator object grid " << op.obj_h
        << "x" << op.obj_w;
    throw Error(ErrorKind::shape, msg.str());
  }
  PairedDataset ds = build_dataset_from_objects(generate_phantoms(spec, count), op, noise, train_fraction, split_seed);
  ds.manifest.phantom = spec;
  ds.manifest.source = "phantom";
  return ds;
}

std::string manifest_json(const DatasetManifest& m) {
  json j;
  j["source"] = m.source;
  j["phantom"] = m.phantom ? phantom_to_json(*m.phantom) : json(nullptr);
  j["noise"] = {{"gaussian_sigma", m.noise.gaussian_sigma},
                {"poisson_scale", m.noise.poisson_scale},
                {"seed", m.noise.seed}};
  j["operator"] = {{"ref", m.operator_ref},
                   {"seed", m.operator_seed},
                   {"mode_count", m.operator_modes},
                   {"condition_estimate", m.operator_condition ? json(*m.operator_condition) : json(nullptr)}};
  j["split"] = {{"train_fraction", m.train_fraction},
                {"seed", m.split_seed},
                {"mode", m.split_mode == SplitMode::random ? "random" : "structure_disjoint"},
                {"tile_overlapping", m.tile_overlapping},
                {"train", m.train_indices},
                {"test", m.test_indices}};
  j["aperture_before_resample"] = m.aperture_before_resample;
  j["normalization"] = "objects scaled to unit maximum";
  return j.dump(2) + "\n";
}

DatasetManifest parse_manifest(const std::string& text) {
  try {
    const json j = json::parse(text);
    DatasetManifest m;
    m.source = j.at("source").get<std::string>();
    if (!j.at("phantom").is_null()) m.phantom = phantom_from_json(j.at("phantom"));
    const json& n = j.at("noise");
    m.noise = {n.at("gaussian_sigma").get<double>(), n.at("poisson_scale").get<double>(),
               n.at("seed").get<std::uint64_t>()};
    const json& o = j.at("operator");
    m.operator_ref = o.at("ref").get<std::string>();
    m.operator_seed = o.at("seed").get<std::uint64_t>();
    m.operator_modes = o.at("mode_count").get<std::uint32_t>();
    if (!o.at("condition_estimate").is_null()) m.operator_condition = o.at("condition_estimate").get<double>();
    const json& s = j.at("split");
    m.train_fraction = s.at("train_fraction").get<double>();
    m.split_seed = s.at("seed").get<std::uint64_t>();
    m.split_mode = s.at("mode").get<std::string>() == "random" ? SplitMode::random : SplitMode::structure_disjoint;
    m.tile_overlapping = s.at("tile_overlapping").get<bool>();
    m.train_indices = s.at("train").get<std::vector<std::size_t>>();
    m.test_indices = s.at("test").get<std::vector<std::size_t>>();
    m.aperture_before_resample = j.value("aperture_before_resample", true);
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("manifest.json: ") + e.what());
  }
}

void save_dataset(const std::filesystem::path& dir, const PairedDataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    write_imgf(dir / entry_name("obj", i), ds.entries[i].object);
    write_imgf(dir / entry_name("sen", i), ds.entries[i].sensor);
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw Error(ErrorKind::io, "cannot write manifest in " + dir.string());
  os << manifest_json(ds.manifest);
}

PairedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw Error(ErrorKind::io, "no manifest.json in " + dir.string());
  std::stringstream text;
  text << is.rdbuf();
  PairedDataset ds;
  ds.manifest = parse_manifest(text.str());
  const std::size_t count = ds.manifest.train_indices.size() + ds.manifest.test_indices.size();
  ds.entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    ds.entries.push_back({read_imgf(dir / entry_name("obj", i)), read_imgf(dir / entry_name("sen", i))});
  ds.validate();
  return ds;
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::io, "cannot open " + path.string());
  return fnv_stream(kFnvOffset, is);
}

std::uint64_t hash_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorKind::io, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    const std::string rel = std::filesystem::relative(f, dir).generic_string();
    h = fnv_update(h, rel.data(), rel.size() + 1);
    std::ifstream is(f, std::ios::binary);
    h = fnv_stream(h, is);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace ccm
