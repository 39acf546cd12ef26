#include "ccm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <thread>

#include "ccm/error.hpp"
#include "ccm/random.hpp"

namespace ccm::nn {

namespace detail {

struct ConvDesc {
  std::size_t cin = 0, cout = 0, k = 1;
  std::size_t w = 0, b = 0;  // indices into the layout
  bool relu = true;
};

struct BlockDesc {
  std::size_t side = 0;
  std::size_t cin = 0;
  std::size_t width = 0;  // channels entering the transition
  std::vector<ConvDesc> layers;
  ConvDesc transition;
};

struct Arch {
  std::size_t side = 0;
  bool dense = true;
  bool proj = false;
  std::size_t proj_w = 0, proj_b = 0;
  ConvDesc stem;
  std::vector<BlockDesc> enc;
  BlockDesc bott;
  std::vector<BlockDesc> dec;
  ConvDesc head;
  std::vector<ParamInfo> layout;
  std::size_t total = 0;  // flat size including padding
};

}  // namespace detail

namespace {

using detail::Arch;
using detail::BlockDesc;
using detail::ConvDesc;

// Every tensor starts on a 16-element boundary so kernel dispatch never depends on its address.
constexpr std::size_t kAlign = 16;

class LayoutBuilder {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> dims, std::size_t fan_in, bool bias) {
    ParamInfo info;
    info.name = std::move(name);
    info.size = 1;
    for (std::size_t d : dims) info.size *= d;
    info.dims = std::move(dims);
    info.offset = next_;
    info.fan_in = fan_in;
    info.bias = bias;
    next_ += (info.size + kAlign - 1) / kAlign * kAlign;
    layout_.push_back(std::move(info));
    return layout_.size() - 1;
  }

  ConvDesc conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, bool relu) {
    ConvDesc d;
    d.cin = cin;
    d.cout = cout;
    d.k = k;
    d.relu = relu;
    d.w = add(name + ".w", {cout, cin, k, k}, cin * k * k, false);
    d.b = add(name + ".b", {cout}, cin * k * k, true);
    return d;
  }

  std::vector<ParamInfo> take() { return std::move(layout_); }
  std::size_t total() const { return next_; }

 private:
  std::vector<ParamInfo> layout_;
  std::size_t next_ = 0;
};

std::shared_ptr<const Arch> build_arch(const NetworkSpec& spec) {
  spec.validate();
  auto arch = std::make_shared<Arch>();
  LayoutBuilder lb;
  const std::size_t side = spec.input_size;
  const std::size_t n = spec.pixels();
  const std::size_t c = spec.base_channels;
  const std::size_t depth = spec.depth;
  const std::size_t k = spec.kernel_size;
  arch->side = side;
  arch->dense = spec.block == BlockKind::dense;
  arch->proj = spec.input_projection;
  if (arch->proj) {
    arch->proj_w = lb.add("proj.w", {n, n}, n, false);
    arch->proj_b = lb.add("proj.b", {n}, n, true);
  }
  arch->stem = lb.conv("stem", 1, c, k, true);

  const auto t = [&](std::size_t l) { return c << l; };
  const auto block = [&](const std::string& name, std::size_t s, std::size_t cin, std::size_t cout) {
    BlockDesc b;
    b.side = s;
    b.cin = cin;
    std::size_t width = cin;
    for (std::size_t j = 0; j < spec.dense_layers_per_block; ++j) {
      const std::string lname = name + ".conv" + std::to_string(j);
      if (arch->dense) {
        b.layers.push_back(lb.conv(lname, width, spec.growth, k, true));
        width += spec.growth;
      } else {
        b.layers.push_back(lb.conv(lname, cin, cin, k, true));
      }
    }
    b.width = width;
    b.transition = lb.conv(name + ".trans", width, cout, 1, true);
    return b;
  };

  std::size_t s = side;
  for (std::size_t l = 0; l < depth; ++l) {
    arch->enc.push_back(block("enc" + std::to_string(l), s, l == 0 ? c : t(l - 1), t(l)));
    s /= 2;
  }
  arch->bott = block("bott", s, t(depth - 1), t(depth));
  arch->dec.resize(depth);
  for (std::size_t l = depth; l-- > 0;) {
    s *= 2;
    arch->dec[l] = block("dec" + std::to_string(l), s, t(l + 1) + t(l), t(l));
  }
  arch->head = lb.conv("head", t(0), 1, 1, false);
  arch->total = lb.total();
  arch->layout = lb.take();
  return arch;
}

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using MatRef = Eigen::Ref<Mat<T>>;
template <typename T>
using ConstMatRef = Eigen::Ref<const Mat<T>>;

template <typename T>
void im2col(const ConstMatRef<T>& in, std::size_t side, std::size_t k, Mat<T>& cols) {
  const auto n = static_cast<Eigen::Index>(side * side);
  const auto cin = static_cast<std::size_t>(in.cols());
  cols.resize(n, static_cast<Eigen::Index>(cin * k * k));
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  const auto sd = static_cast<std::ptrdiff_t>(side);
  for (std::size_t ch = 0; ch < cin; ++ch) {
    const T* src = in.col(static_cast<Eigen::Index>(ch)).data();
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = cols.col(static_cast<Eigen::Index>((ch * k + ky) * k + kx)).data();
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - r;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - r;
        for (std::ptrdiff_t y = 0; y < sd; ++y) {
          T* row = dst + y * sd;
          const std::ptrdiff_t yy = y + dy;
          if (yy < 0 || yy >= sd) {
            std::fill(row, row + sd, T(0));
            continue;
          }
          const T* srow = src + yy * sd;
          for (std::ptrdiff_t x = 0; x < sd; ++x) {
            const std::ptrdiff_t xx = x + dx;
            row[x] = (xx >= 0 && xx < sd) ? srow[xx] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const Mat<T>& dcols, std::size_t side, std::size_t k, MatRef<T> din) {
  const auto cin = static_cast<std::size_t>(din.cols());
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  const auto sd = static_cast<std::ptrdiff_t>(side);
  for (std::size_t ch = 0; ch < cin; ++ch) {
    T* dst = din.col(static_cast<Eigen::Index>(ch)).data();
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = dcols.col(static_cast<Eigen::Index>((ch * k + ky) * k + kx)).data();
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - r;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - r;
        for (std::ptrdiff_t y = 0; y < sd; ++y) {
          const std::ptrdiff_t yy = y + dy;
          if (yy < 0 || yy >= sd) continue;
          const T* srow = src + y * sd;
          T* drow = dst + yy * sd;
          for (std::ptrdiff_t x = 0; x < sd; ++x) {
            const std::ptrdiff_t xx = x + dx;
            if (xx >= 0 && xx < sd) drow[xx] += srow[x];
          }
        }
      }
    }
  }
}

template <typename T>
auto weight_map(const T* base, const std::vector<ParamInfo>& layout, const ConvDesc& d) {
  // Row-major [cout][cin*k*k] storage read as a column-major (cin*k*k) x cout matrix.
  return Eigen::Map<const Mat<T>>(base + layout[d.w].offset, static_cast<Eigen::Index>(d.cin * d.k * d.k),
                                  static_cast<Eigen::Index>(d.cout));
}

template <typename T>
void conv_forward(const T* params, const std::vector<ParamInfo>& layout, const ConvDesc& d, const ConstMatRef<T>& in,
                  std::size_t side, typename Workspace<T>::Conv& cache) {
  const auto w = weight_map(params, layout, d);
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params + layout[d.b].offset,
                                                                static_cast<Eigen::Index>(d.cout));
  if (d.k > 1) {
    im2col<T>(in, side, d.k, cache.cols);
    cache.out.noalias() = cache.cols * w;
  } else {
    cache.out.noalias() = in * w;
  }
  cache.out.rowwise() += b;
  if (d.relu) cache.out = cache.out.cwiseMax(T(0));
}

/// `dout` is the gradient at the pre-activation output.
template <typename T>
void conv_backward(const T* params, T* grads, const std::vector<ParamInfo>& layout, const ConvDesc& d,
                   const ConstMatRef<T>& in, std::size_t side, const typename Workspace<T>::Conv& cache,
                   const Mat<T>& dout, MatRef<T> din) {
  const auto w = weight_map(params, layout, d);
  Eigen::Map<Mat<T>> dw(grads + layout[d.w].offset, w.rows(), w.cols());
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grads + layout[d.b].offset, static_cast<Eigen::Index>(d.cout));
  db += dout.colwise().sum();
  if (d.k > 1) {
    dw.noalias() += cache.cols.transpose() * dout;
    const Mat<T> dcols = dout * w.transpose();
    col2im_add<T>(dcols, side, d.k, din);
  } else {
    dw.noalias() += in.transpose() * dout;
    din.noalias() += dout * w.transpose();
  }
}

template <typename T>
Mat<T> relu_mask(const Eigen::Ref<const Mat<T>>& grad, const Mat<T>& out) {
  return (out.array() > T(0)).select(grad, T(0));
}

template <typename T>
Mat<T> avg_pool(const Mat<T>& in, std::size_t side) {
  const std::size_t half = side / 2;
  Mat<T> out(static_cast<Eigen::Index>(half * half), in.cols());
  for (Eigen::Index ch = 0; ch < in.cols(); ++ch) {
    const T* s = in.col(ch).data();
    T* o = out.col(ch).data();
    for (std::size_t y = 0; y < half; ++y)
      for (std::size_t x = 0; x < half; ++x) {
        const std::size_t p = 2 * y * side + 2 * x;
        o[y * half + x] = T(0.25) * (s[p] + s[p + 1] + s[p + side] + s[p + side + 1]);
      }
  }
  return out;
}

template <typename T>
Mat<T> avg_pool_backward(const Mat<T>& dout, std::size_t side) {
  const std::size_t half = side / 2;
  Mat<T> din(static_cast<Eigen::Index>(side * side), dout.cols());
  for (Eigen::Index ch = 0; ch < dout.cols(); ++ch) {
    const T* g = dout.col(ch).data();
    T* d = din.col(ch).data();
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) d[y * side + x] = T(0.25) * g[(y / 2) * half + x / 2];
  }
  return din;
}

template <typename T>
void upsample_into(const Mat<T>& in, std::size_t side, MatRef<T> out) {
  const std::size_t big = side * 2;
  for (Eigen::Index ch = 0; ch < in.cols(); ++ch) {
    const T* s = in.col(ch).data();
    T* o = out.col(ch).data();
    for (std::size_t y = 0; y < big; ++y)
      for (std::size_t x = 0; x < big; ++x) o[y * big + x] = s[(y / 2) * side + x / 2];
  }
}

template <typename T>
Mat<T> upsample_backward(const ConstMatRef<T>& dout, std::size_t side) {
  const std::size_t big = side * 2;
  Mat<T> din = Mat<T>::Zero(static_cast<Eigen::Index>(side * side), dout.cols());
  for (Eigen::Index ch = 0; ch < dout.cols(); ++ch) {
    const T* g = dout.col(ch).data();
    T* d = din.col(ch).data();
    for (std::size_t y = 0; y < big; ++y)
      for (std::size_t x = 0; x < big; ++x) d[(y / 2) * side + x / 2] += g[y * big + x];
  }
  return din;
}

template <typename T>
void block_forward(const T* params, const Arch& arch, const BlockDesc& b, const Mat<T>& first, const Mat<T>* second,
                   typename Workspace<T>::Block& c) {
  const auto n = static_cast<Eigen::Index>(b.side * b.side);
  const auto a = first.cols();
  c.layers.resize(b.layers.size());
  if (arch.dense) {
    c.buffer.resize(n, static_cast<Eigen::Index>(b.width));
    c.buffer.leftCols(a) = first;
    if (second) c.buffer.middleCols(a, second->cols()) = *second;
    auto off = static_cast<Eigen::Index>(b.cin);
    for (std::size_t j = 0; j < b.layers.size(); ++j) {
      const auto g = static_cast<Eigen::Index>(b.layers[j].cout);
      conv_forward<T>(params, arch.layout, b.layers[j], c.buffer.leftCols(off), b.side, c.layers[j]);
      c.buffer.middleCols(off, g) = c.layers[j].out;
      off += g;
    }
    conv_forward<T>(params, arch.layout, b.transition, c.buffer, b.side, c.transition);
  } else {
    c.states.resize(b.layers.size() + 1);
    c.states[0].resize(n, static_cast<Eigen::Index>(b.cin));
    c.states[0].leftCols(a) = first;
    if (second) c.states[0].middleCols(a, second->cols()) = *second;
    for (std::size_t j = 0; j < b.layers.size(); ++j) {
      conv_forward<T>(params, arch.layout, b.layers[j], c.states[j], b.side, c.layers[j]);
      c.states[j + 1] = c.states[j] + c.layers[j].out;
    }
    conv_forward<T>(params, arch.layout, b.transition, c.states.back(), b.side, c.transition);
  }
}

/// Takes the gradient at the block output (post-activation) and returns it at the block input.
template <typename T>
Mat<T> block_backward(const T* params, T* grads, const Arch& arch, const BlockDesc& b,
                      const typename Workspace<T>::Block& c, const Mat<T>& dout) {
  const auto n = static_cast<Eigen::Index>(b.side * b.side);
  const Mat<T> dt = relu_mask<T>(dout, c.transition.out);
  if (arch.dense) {
    Mat<T> dbuf = Mat<T>::Zero(n, static_cast<Eigen::Index>(b.width));
    conv_backward<T>(params, grads, arch.layout, b.transition, c.buffer, b.side, c.transition, dt, dbuf);
    auto off = static_cast<Eigen::Index>(b.width);
    for (std::size_t j = b.layers.size(); j-- > 0;) {
      const auto g = static_cast<Eigen::Index>(b.layers[j].cout);
      off -= g;
      const Mat<T> dl = relu_mask<T>(dbuf.middleCols(off, g), c.layers[j].out);
      conv_backward<T>(params, grads, arch.layout, b.layers[j], c.buffer.leftCols(off), b.side, c.layers[j], dl,
                       dbuf.leftCols(off));
    }
    return dbuf.leftCols(static_cast<Eigen::Index>(b.cin));
  }
  Mat<T> dh = Mat<T>::Zero(n, static_cast<Eigen::Index>(b.cin));
  conv_backward<T>(params, grads, arch.layout, b.transition, c.states.back(), b.side, c.transition, dt, dh);
  for (std::size_t j = b.layers.size(); j-- > 0;) {
    const Mat<T> dl = relu_mask<T>(dh, c.layers[j].out);
    conv_backward<T>(params, grads, arch.layout, b.layers[j], c.states[j], b.side, c.layers[j], dl, dh);
  }
  return dh;
}

template <typename T>
void check_flat(std::span<const T> v, std::size_t expected, const char* what) {
  if (v.size() != expected) {
    std::ostringstream msg;
    msg << what << ": expected " << expected << " values, got " << v.size();
    throw Error(ErrorKind::shape, msg.str());
  }
}

}  // namespace

void NetworkSpec::validate() const {
  const auto bad = [](const std::string& m) { throw Error(ErrorKind::invalid_argument, "network: " + m); };
  if (depth < 1) bad("depth must be >= 1");
  if (depth > 16) bad("depth must be <= 16");
  if (base_channels < 1) bad("base_channels must be >= 1");
  if (growth < 1) bad("growth must be >= 1");
  if (dense_layers_per_block < 1) bad("dense_layers_per_block must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) bad("kernel_size must be odd");
  const std::size_t step = std::size_t{1} << depth;
  if (input_size < step || input_size % step != 0) {
    std::ostringstream msg;
    msg << "input_size " << input_size << " must be a positive multiple of 2^depth = " << step;
    bad(msg.str());
  }
}

std::vector<ParamInfo> parameter_layout(const NetworkSpec& spec) { return build_arch(spec)->layout; }

std::size_t parameter_count(const NetworkSpec& spec) {
  std::size_t total = 0;
  for (const auto& p : build_arch(spec)->layout) total += p.size;
  return total;
}

std::size_t forward_macs(const NetworkSpec& spec) {
  const auto arch = build_arch(spec);
  const auto conv = [](const ConvDesc& d, std::size_t side) { return side * side * d.cin * d.k * d.k * d.cout; };
  std::size_t total = arch->proj ? spec.pixels() * spec.pixels() : 0;
  total += conv(arch->stem, arch->side);
  const auto block = [&](const BlockDesc& b) {
    for (const auto& l : b.layers) total += conv(l, b.side);
    total += conv(b.transition, b.side);
  };
  for (const auto& b : arch->enc) block(b);
  block(arch->bott);
  for (const auto& b : arch->dec) block(b);
  total += conv(arch->head, arch->side);
  return total;
}

template <typename T>
std::size_t NetworkParams<T>::count() const {
  std::size_t total = 0;
  for (const auto& p : layout) total += p.size;
  return total;
}

template <typename T>
void NetworkParams<T>::validate() const {
  for (std::size_t i = 0; i < layout.size(); ++i)
    for (T v : tensor(i))
      if (!std::isfinite(static_cast<double>(v)))
        throw Error(ErrorKind::numeric, "non-finite value in parameter " + layout[i].name);
}

template <typename T>
NetworkParams<T> zero_network(const NetworkSpec& spec) {
  const auto arch = build_arch(spec);
  NetworkParams<T> p;
  p.spec = spec;
  p.layout = arch->layout;
  p.values.assign(arch->total, T(0));
  return p;
}

template <typename T>
NetworkParams<T> init_network(const NetworkSpec& spec) {
  NetworkParams<T> p = zero_network<T>(spec);
  for (std::size_t i = 0; i < p.layout.size(); ++i) {
    const auto& info = p.layout[i];
    if (info.bias) continue;
    Rng rng = make_rng(spec.seed, Stream::net_init, i);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(info.fan_in)));
    for (T& v : p.tensor(i)) v = static_cast<T>(dist(rng));
  }
  return p;
}

template <typename T>
Network<T>::Network(const NetworkSpec& spec) : spec_(spec), arch_(build_arch(spec)) {}

template <typename T>
std::vector<std::vector<std::size_t>> Network<T>::block_channel_trace() const {
  std::vector<std::vector<std::size_t>> out;
  const auto trace = [&](const BlockDesc& b) {
    std::vector<std::size_t> t;
    std::size_t width = b.cin;
    for (const auto& l : b.layers) {
      width = arch_->dense ? width + l.cout : l.cout;
      t.push_back(width);
    }
    out.push_back(std::move(t));
  };
  for (const auto& b : arch_->enc) trace(b);
  trace(arch_->bott);
  for (std::size_t l = arch_->dec.size(); l-- > 0;) trace(arch_->dec[l]);
  return out;
}

template <typename T>
std::span<const T> Network<T>::forward(const NetworkParams<T>& params, std::span<const T> input,
                                       Workspace<T>& ws) const {
  const Arch& a = *arch_;
  if (params.values.size() != a.total || !(params.spec == spec_))
    throw Error(ErrorKind::shape, "parameters were built for a different network");
  if (input.size() != spec_.pixels()) {
    std::ostringstream msg;
    msg << "input layer expects " << spec_.input_size << "x" << spec_.input_size << " = " << spec_.pixels()
        << " pixels, got " << input.size();
    throw Error(ErrorKind::shape, msg.str());
  }
  const T* p = params.values.data();
  const auto n = static_cast<Eigen::Index>(spec_.pixels());
  ws.input = Eigen::Map<const Mat<T>>(input.data(), n, 1);
  if (a.proj) {
    const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(
        p + a.layout[a.proj_w].offset, n, n);
    const Eigen::Map<const Mat<T>> b(p + a.layout[a.proj_b].offset, n, 1);
    ws.stem_in.noalias() = w * ws.input;
    ws.stem_in += b;
  } else {
    ws.stem_in = ws.input;
  }
  conv_forward<T>(p, a.layout, a.stem, ws.stem_in, a.side, ws.stem);

  const std::size_t depth = a.enc.size();
  ws.enc.resize(depth);
  ws.dec.resize(depth);
  ws.pooled.resize(depth);
  const Mat<T>* cur = &ws.stem.out;
  for (std::size_t l = 0; l < depth; ++l) {
    block_forward<T>(p, a, a.enc[l], *cur, nullptr, ws.enc[l]);
    ws.pooled[l] = avg_pool<T>(ws.enc[l].transition.out, a.enc[l].side);
    cur = &ws.pooled[l];
  }
  block_forward<T>(p, a, a.bott, *cur, nullptr, ws.bott);
  cur = &ws.bott.transition.out;
  Mat<T> up;
  for (std::size_t l = depth; l-- > 0;) {
    const std::size_t side = a.dec[l].side;
    up.resize(static_cast<Eigen::Index>(side * side), cur->cols());
    upsample_into<T>(*cur, side / 2, up);
    block_forward<T>(p, a, a.dec[l], up, &ws.enc[l].transition.out, ws.dec[l]);
    cur = &ws.dec[l].transition.out;
  }
  conv_forward<T>(p, a.layout, a.head, *cur, a.side, ws.head);
  return {ws.head.out.data(), static_cast<std::size_t>(n)};
}

template <typename T>
void Network<T>::backward(const NetworkParams<T>& params, Workspace<T>& ws, std::span<const T> dlogits,
                          std::span<T> grads) const {
  const Arch& a = *arch_;
  check_flat<T>(dlogits, spec_.pixels(), "backward: logit gradient");
  if (grads.size() != a.total) throw Error(ErrorKind::shape, "backward: gradient buffer does not match the network");
  const T* p = params.values.data();
  T* g = grads.data();
  const auto n = static_cast<Eigen::Index>(spec_.pixels());
  const std::size_t depth = a.enc.size();

  const Mat<T> dz = Eigen::Map<const Mat<T>>(dlogits.data(), n, 1);
  Mat<T> dcur = Mat<T>::Zero(n, static_cast<Eigen::Index>(a.head.cin));
  conv_backward<T>(p, g, a.layout, a.head, ws.dec[0].transition.out, a.side, ws.head, dz, dcur);

  std::vector<Mat<T>> dskip(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    const BlockDesc& b = a.dec[l];
    const Mat<T> din = block_backward<T>(p, g, a, b, ws.dec[l], dcur);
    const auto up_ch = static_cast<Eigen::Index>(b.cin - a.enc[l].transition.cout);
    dskip[l] = din.rightCols(din.cols() - up_ch);
    dcur = upsample_backward<T>(din.leftCols(up_ch), b.side / 2);
  }
  dcur = block_backward<T>(p, g, a, a.bott, ws.bott, dcur);
  for (std::size_t l = depth; l-- > 0;) {
    Mat<T> dt = dskip[l] + avg_pool_backward<T>(dcur, a.enc[l].side);
    dcur = block_backward<T>(p, g, a, a.enc[l], ws.enc[l], dt);
  }
  const Mat<T> dstem = relu_mask<T>(dcur, ws.stem.out);
  Mat<T> dproj = Mat<T>::Zero(n, 1);
  conv_backward<T>(p, g, a.layout, a.stem, ws.stem_in, a.side, ws.stem, dstem, dproj);
  if (a.proj) {
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dw(g + a.layout[a.proj_w].offset, n,
                                                                                    n);
    Eigen::Map<Mat<T>> db(g + a.layout[a.proj_b].offset, n, 1);
    dw.noalias() += dproj * ws.input.transpose();
    db += dproj;
  }
}

double logistic(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logistic_open(double z) noexcept {
  const double p = logistic(z);
  if (p <= 0.0) return std::numeric_limits<double>::denorm_min();
  if (p >= 1.0) return std::nextafter(1.0, 0.0);
  return p;
}

template <typename T>
double loss_value(LossKind kind, std::span<const T> logits, std::span<const T> targets) {
  check_flat<T>(targets, logits.size(), "loss: targets");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = static_cast<double>(logits[i]);
    const double t = static_cast<double>(targets[i]);
    if (kind == LossKind::pixelwise_cross_entropy) {
      total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    } else {
      const double d = logistic(z) - t;
      total += d * d;
    }
  }
  return total / static_cast<double>(logits.size());
}

template <typename T>
void loss_gradient(LossKind kind, std::span<const T> logits, std::span<const T> targets, std::size_t batch_size,
                   std::span<T> dlogits) {
  check_flat<T>(targets, logits.size(), "loss: targets");
  check_flat<T>(std::span<const T>(dlogits.data(), dlogits.size()), logits.size(), "loss: gradient");
  const double scale = static_cast<double>(logits.size()) * static_cast<double>(batch_size);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = logistic(static_cast<double>(logits[i]));
    const double t = static_cast<double>(targets[i]);
    const double d = kind == LossKind::pixelwise_cross_entropy ? p - t : 2.0 * (p - t) * p * (1.0 - p);
    dlogits[i] = static_cast<T>(d / scale);
  }
}

template <typename T>
double batch_gradient(const Network<T>& net, const NetworkParams<T>& params,
                      const std::vector<std::span<const T>>& inputs, const std::vector<std::span<const T>>& targets,
                      LossKind kind, std::span<T> grads, std::size_t threads) {
  const std::size_t batch = inputs.size();
  if (batch == 0) throw Error(ErrorKind::invalid_argument, "empty batch");
  if (targets.size() != batch) throw Error(ErrorKind::shape, "batch inputs and targets differ in length");
  if (grads.size() != params.values.size()) throw Error(ErrorKind::shape, "gradient buffer does not match the network");
  std::fill(grads.begin(), grads.end(), T(0));

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, batch));
  std::vector<Workspace<T>> ws(workers);
  std::vector<AlignedVector<T>> slot(workers, AlignedVector<T>(grads.size()));
  std::vector<AlignedVector<T>> dz(workers, AlignedVector<T>(net.spec().pixels()));
  std::vector<double> item_loss(batch, 0.0);

  const auto run = [&](std::size_t w, std::size_t i) {
    std::fill(slot[w].begin(), slot[w].end(), T(0));
    const auto logits = net.forward(params, inputs[i], ws[w]);
    item_loss[i] = loss_value<T>(kind, logits, targets[i]);
    loss_gradient<T>(kind, logits, targets[i], batch, dz[w]);
    net.backward(params, ws[w], dz[w], slot[w]);
  };

  double total = 0.0;
  for (std::size_t start = 0; start < batch; start += workers) {
    const std::size_t count = std::min(workers, batch - start);
    if (count == 1) {
      run(0, start);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(count);
      for (std::size_t w = 0; w < count; ++w)
        pool.emplace_back([&, w] {
          try {
            run(w, start + w);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (std::size_t w = 0; w < count; ++w) {
      const T* s = slot[w].data();
      for (std::size_t j = 0; j < grads.size(); ++j) grads[j] += s[j];
      total += item_loss[start + w];
    }
  }
  return total / static_cast<double>(batch);
}

template <typename T>
std::vector<ImageGrid> forward_net(const NetworkParams<T>& params, const std::vector<ImageGrid>& sensors) {
  const Network<T> net(params.spec);
  Workspace<T> ws;
  std::vector<ImageGrid> out;
  out.reserve(sensors.size());
  std::vector<T> x;
  for (const auto& s : sensors) {
    if (s.height() != params.spec.input_size || s.width() != params.spec.input_size) {
      std::ostringstream msg;
      msg << "input layer expects " << params.spec.input_size << "x" << params.spec.input_size << ", got "
          << s.height() << "x" << s.width();
      throw Error(ErrorKind::shape, msg.str());
    }
    x.assign(s.data().begin(), s.data().end());
    const auto z = net.forward(params, x, ws);
    std::vector<double> v(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) v[i] = logistic_open(static_cast<double>(z[i]));
    out.emplace_back(s.height(), s.width(), s.pitch_um(), std::move(v));
  }
  return out;
}

template <typename T>
OptimizerState<T> OptimizerState<T>::fresh(std::size_t n, const AdamConfig& cfg) {
  OptimizerState s;
  s.config = cfg;
  s.m.assign(n, T(0));
  s.v.assign(n, T(0));
  return s;
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, OptimizerState<T>& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw Error(ErrorKind::shape, "adam: parameter, gradient and moment sizes differ");
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(c.beta1, t);
  const double c2 = 1.0 - std::pow(c.beta2, t);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T lr = static_cast<T>(c.learning_rate), eps = static_cast<T>(c.epsilon);
  const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    T& m = state.m[i];
    T& v = state.v[i];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g * g;
    const T mhat = m * ic1;
    const T vhat = v * ic2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

#define CCM_NN_INSTANTIATE(T)                                                                                       \
  template struct NetworkParams<T>;                                                                                 \
  template class Network<T>;                                                                                        \
  template NetworkParams<T> init_network<T>(const NetworkSpec&);                                                    \
  template NetworkParams<T> zero_network<T>(const NetworkSpec&);                                                    \
  template double loss_value<T>(LossKind, std::span<const T>, std::span<const T>);                                  \
  template void loss_gradient<T>(LossKind, std::span<const T>, std::span<const T>, std::size_t, std::span<T>);     \
  template double batch_gradient<T>(const Network<T>&, const NetworkParams<T>&,                                     \
                                    const std::vector<std::span<const T>>&, const std::vector<std::span<const T>>&, \
                                    LossKind, std::span<T>, std::size_t);                                           \
  template std::vector<ImageGrid> forward_net<T>(const NetworkParams<T>&, const std::vector<ImageGrid>&);           \
  template struct OptimizerState<T>;                                                                                \
  template void adam_step<T>(std::span<T>, std::span<const T>, OptimizerState<T>&);

CCM_NN_INSTANTIATE(float)
CCM_NN_INSTANTIATE(double)

#undef CCM_NN_INSTANTIATE

}  // namespace ccm::nn
