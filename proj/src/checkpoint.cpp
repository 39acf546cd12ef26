#include <fstream>
#include <sstream>

#include "ccm/binary_io.hpp"
#include "ccm/error.hpp"
#include "ccm/train.hpp"

namespace ccm::nn {

namespace {

constexpr std::uint32_t kVersion = 1;

void write_spec(std::ostream& out, const NetworkSpec& s) {
  using namespace binary;
  write_u32(out, static_cast<std::uint32_t>(s.input_size));
  write_u32(out, static_cast<std::uint32_t>(s.depth));
  write_u32(out, static_cast<std::uint32_t>(s.base_channels));
  write_u32(out, static_cast<std::uint32_t>(s.growth));
  write_u32(out, static_cast<std::uint32_t>(s.dense_layers_per_block));
  write_u32(out, static_cast<std::uint32_t>(s.kernel_size));
  write_u8(out, static_cast<std::uint8_t>(s.block));
  write_u8(out, s.input_projection ? 1 : 0);
  write_u64(out, s.seed);
}

NetworkSpec read_spec(binary::Reader& r) {
  NetworkSpec s;
  s.input_size = r.u32();
  s.depth = r.u32();
  s.base_channels = r.u32();
  s.growth = r.u32();
  s.dense_layers_per_block = r.u32();
  s.kernel_size = r.u32();
  const std::uint8_t block = r.u8();
  if (block > 1) throw Error(ErrorKind::format, r.context() + ": unknown block kind");
  s.block = static_cast<BlockKind>(block);
  s.input_projection = r.u8() != 0;
  s.seed = r.u64();
  try {
    s.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::format, r.context() + ": " + e.what());
  }
  return s;
}

void write_tensors(std::ostream& out, const std::vector<ParamInfo>& layout, const float* base,
                   const std::string& prefix) {
  using namespace binary;
  write_u32(out, static_cast<std::uint32_t>(layout.size()));
  for (const auto& info : layout) {
    const std::string name = prefix + info.name;
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(info.dims.size()));
    for (std::size_t d : info.dims) write_u32(out, static_cast<std::uint32_t>(d));
    write_f32_array(out, base + info.offset, info.size);
  }
}

void read_tensors(binary::Reader& r, const std::vector<ParamInfo>& layout, float* base, const std::string& prefix) {
  const std::uint32_t count = r.u32();
  if (count != layout.size()) {
    std::ostringstream msg;
    msg << r.context() << ": expected " << layout.size() << " tensors, found " << count;
    throw Error(ErrorKind::format, msg.str());
  }
  for (const auto& info : layout) {
    const std::string expected = prefix + info.name;
    const std::uint32_t len = r.u32();
    if (len > 4096) throw Error(ErrorKind::format, r.context() + ": tensor name too long");
    const std::string name = r.bytes(len);
    if (name != expected) throw Error(ErrorKind::format, r.context() + ": expected tensor " + expected + ", found " + name);
    const std::uint32_t rank = r.u32();
    if (rank != info.dims.size()) throw Error(ErrorKind::format, r.context() + ": rank mismatch for " + name);
    for (std::size_t d : info.dims)
      if (r.u32() != d) throw Error(ErrorKind::format, r.context() + ": shape mismatch for " + name);
    r.f32_array(base + info.offset, info.size);
  }
}

}  // namespace

void write_checkpoint(std::ostream& out, const NetworkParams<float>& params, const OptimizerState<float>* optimizer) {
  using namespace binary;
  write_magic(out, "CCMW");
  write_u32(out, kVersion);
  write_spec(out, params.spec);
  write_tensors(out, params.layout, params.values.data(), "");
  write_u8(out, optimizer ? 1 : 0);
  if (optimizer) {
    write_u64(out, optimizer->step);
    write_f64(out, optimizer->config.learning_rate);
    write_f64(out, optimizer->config.beta1);
    write_f64(out, optimizer->config.beta2);
    write_f64(out, optimizer->config.epsilon);
    write_tensors(out, params.layout, optimizer->m.data(), "adam.m/");
    write_tensors(out, params.layout, optimizer->v.data(), "adam.v/");
  }
}

void write_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& params,
                      const OptimizerState<float>* optimizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  write_checkpoint(out, params, optimizer);
  if (!out) throw Error(ErrorKind::io, "failed writing " + path.string());
}

Checkpoint read_checkpoint(std::istream& in, const std::string& context) {
  binary::Reader r(in, context);
  r.expect_magic("CCMW");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw Error(ErrorKind::format, context + ": unsupported version " + std::to_string(version));
  const NetworkSpec spec = read_spec(r);
  Checkpoint ck;
  ck.params = zero_network<float>(spec);
  read_tensors(r, ck.params.layout, ck.params.values.data(), "");
  try {
    ck.params.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::format, context + ": " + e.what());
  }
  if (r.u8() != 0) {
    AdamConfig cfg;
    const std::uint64_t step = r.u64();
    cfg.learning_rate = r.f64();
    cfg.beta1 = r.f64();
    cfg.beta2 = r.f64();
    cfg.epsilon = r.f64();
    auto opt = OptimizerState<float>::fresh(ck.params.values.size(), cfg);
    opt.step = step;
    read_tensors(r, ck.params.layout, opt.m.data(), "adam.m/");
    read_tensors(r, ck.params.layout, opt.v.data(), "adam.v/");
    ck.optimizer = std::move(opt);
  }
  return ck;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  return read_checkpoint(in, path.string());
}

}  // namespace ccm::nn
