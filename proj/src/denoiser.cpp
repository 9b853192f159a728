#include "cdaug/denoiser.hpp"

#include <cmath>
#include <numbers>

#include "cdaug/nn/ops.hpp"
#include "cdaug/rng.hpp"

namespace cdaug {

namespace {

constexpr std::uint8_t kCheckpointVersion = 3;

struct ConvIdx {
  int w = -1, b = -1;
};
struct NormIdx {
  int g = -1, b = -1;
};
struct ResIdx {
  NormIdx n1;
  ConvIdx c1;
  ConvIdx emb;
  NormIdx n2;
  ConvIdx c2;
  ConvIdx skip;  // unused when channel counts match
};

struct Layout {
  ConvIdx t1, t2;
  int tag_table = -1;
  ConvIdx in;
  ResIdx enc0, enc1, mid, dec1, dec0;
  NormIdx out_norm;
  ConvIdx out;
  ConvIdx global1, global2, global_gain;
  ConvIdx ctrl_in;
  ResIdx ctrl0, ctrl1, ctrlm;
  ConvIdx fuse0, fuse1, fusem;
};

// Anything with ParamSet's add(name, n, c, h, w, trunk) -> index.
template <typename Sink>
struct LayoutBuilder {
  Sink& ps;

  ConvIdx conv(const std::string& name, int cout, int cin, int k, bool trunk) {
    return {ps.add(name + ".w", cout, cin, k, k, trunk), ps.add(name + ".b", cout, 1, 1, 1, trunk)};
  }
  NormIdx norm(const std::string& name, int ch, bool trunk) {
    return {ps.add(name + ".gamma", ch, 1, 1, 1, trunk), ps.add(name + ".beta", ch, 1, 1, 1, trunk)};
  }
  ResIdx res(const std::string& name, int cin, int cout, int emb_dim, bool trunk) {
    ResIdx r;
    r.n1 = norm(name + ".norm1", cin, trunk);
    r.c1 = conv(name + ".conv1", cout, cin, 3, trunk);
    r.emb = conv(name + ".emb", cout, emb_dim, 1, trunk);
    r.n2 = norm(name + ".norm2", cout, trunk);
    r.c2 = conv(name + ".conv2", cout, cout, 3, trunk);
    if (cin != cout) r.skip = conv(name + ".skip", cout, cin, 1, trunk);
    return r;
  }
};

struct IndexCounter {
  int next = 0;
  int add(const std::string&, int, int, int, int, bool) { return next++; }
};

template <typename Sink>
Layout build_layout(const DenoiserArch& a, Sink& ps) {
  LayoutBuilder<Sink> lb{ps};
  const auto [w0, w1, w2] = a.widths;
  Layout L;
  L.t1 = lb.conv("temb.lin1", a.emb_dim, a.time_dim, 1, true);
  L.t2 = lb.conv("temb.lin2", a.emb_dim, a.emb_dim, 1, true);
  L.tag_table = ps.add("tag.table", a.tags, a.emb_dim, 1, 1, true);
  L.in = lb.conv("in", w0, 1, 3, true);
  L.enc0 = lb.res("enc0", w0, w0, a.emb_dim, true);
  L.enc1 = lb.res("enc1", w0, w1, a.emb_dim, true);
  L.mid = lb.res("mid", w1, w2, a.emb_dim, true);
  L.dec1 = lb.res("dec1", w2 + w1, w1, a.emb_dim, true);
  L.dec0 = lb.res("dec0", w1 + w0, w0, a.emb_dim, true);
  L.out_norm = lb.norm("out.norm", w0, true);
  L.out = lb.conv("out.conv", 1, w0, 3, true);
  // Per-image offset from plane means, which the convolutional path cannot see:
  // a free offset plus a gain on the input mean.
  L.global1 = lb.conv("out.global1", w0, 1 + w0 + a.emb_dim, 1, true);
  L.global2 = lb.conv("out.global2", 1, w0, 1, true);
  L.global_gain = lb.conv("out.global_gain", 1, w0, 1, true);
  L.ctrl_in = lb.conv("ctrl.in", w0, 1, 3, false);
  L.ctrl0 = lb.res("ctrl.l0", w0, w0, a.emb_dim, false);
  L.ctrl1 = lb.res("ctrl.l1", w0, w1, a.emb_dim, false);
  L.ctrlm = lb.res("ctrl.mid", w1, w2, a.emb_dim, false);
  L.fuse0 = lb.conv("fuse.l0", w0, w0, 1, false);
  L.fuse1 = lb.conv("fuse.l1", w1, w1, 1, false);
  L.fusem = lb.conv("fuse.mid", w2, w2, 1, false);
  return L;
}

// Block indices depend only on the architecture.
Layout layout_of(const DenoiserArch& a) {
  struct Cache {
    DenoiserArch arch;
    Layout layout;
    bool valid = false;
  };
  thread_local Cache cache;
  if (!cache.valid || !(cache.arch == a)) {
    IndexCounter counter;
    cache.layout = build_layout(a, counter);
    cache.arch = a;
    cache.valid = true;
  }
  return cache.layout;
}

template <typename T>
struct Net {
  nn::Tape<T>& tape;
  const std::vector<nn::Var>& P;
  int groups;
  nn::Var silu_emb{};

  nn::Var conv(nn::Var x, ConvIdx c) { return nn::conv2d(tape, x, P[c.w], P[c.b]); }
  nn::Var norm(nn::Var x, NormIdx n) { return nn::group_norm(tape, x, P[n.g], P[n.b], groups); }

  nn::Var res(nn::Var x, const ResIdx& r) {
    nn::Var h = conv(nn::silu(tape, norm(x, r.n1)), r.c1);
    h = nn::add_channel_bias(tape, h, nn::linear(tape, silu_emb, P[r.emb.w], P[r.emb.b]));
    h = conv(nn::silu(tape, norm(h, r.n2)), r.c2);
    nn::Var skip = r.skip.w >= 0 ? conv(x, r.skip) : x;
    return nn::add(tape, h, skip);
  }
};

template <typename T>
nn::Tensor<T> timestep_features(const std::vector<int>& steps, int dim) {
  const int half = dim / 2;
  nn::Tensor<T> out(static_cast<int>(steps.size()), dim, 1, 1);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    T* row = out.sample(static_cast<int>(i));
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      const double arg = steps[i] * freq;
      row[k] = static_cast<T>(std::sin(arg));
      row[half + k] = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

void check_input(int h, int w) {
  if (h % 4 != 0 || w % 4 != 0 || h <= 0 || w <= 0) {
    throw ShapeError("denoiser: image size " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be a positive multiple of 4");
  }
}

}  // namespace

void validate(const DenoiserArch& a) {
  for (int w : a.widths) {
    if (w <= 0 || w > 4096 || w % a.groups != 0) {
      throw ConfigError("denoiser arch: widths must be positive multiples of groups");
    }
  }
  if (a.groups <= 0 || a.time_dim <= 0 || a.time_dim % 2 != 0 || a.emb_dim <= 0 || a.tags <= 0 ||
      a.time_dim > 4096 || a.emb_dim > 4096 || a.tags > 4096) {
    throw ConfigError("denoiser arch: invalid descriptor");
  }
  if ((a.widths[1] + a.widths[2]) % a.groups != 0 || (a.widths[0] + a.widths[1]) % a.groups != 0) {
    throw ConfigError("denoiser arch: concatenated widths must be multiples of groups");
  }
}

bool is_fusion_block(const std::string& name) { return name.rfind("fuse.", 0) == 0; }
bool is_gain_block(const std::string& name) { return name.rfind("out.global_gain.", 0) == 0; }

nn::BlockFilter trainable_blocks(TrainMode mode) {
  if (mode == TrainMode::joint) return nn::all_blocks();
  return [](const std::string&, bool trunk) { return !trunk; };
}

nn::BlockFilter trunk_blocks() {
  return [](const std::string&, bool trunk) { return trunk; };
}

DenoiserParams<float> init_model(const DenoiserArch& arch, std::uint64_t seed) {
  validate(arch);
  DenoiserParams<float> p;
  p.arch = arch;
  build_layout(arch, p.params);
  p.dmap_scale = 2.0 * std::numbers::pi * kDefaultKernelVariance;  // 1 / single-dot peak

  Rng rng(seed);
  for (auto& b : p.params.blocks()) {
    const std::string& n = b.name;
    const auto ends_with = [&](std::string_view s) {
      return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
    };
    if (is_fusion_block(n) || is_gain_block(n) || ends_with(".b") || ends_with(".beta")) continue;  // zeros
    if (ends_with(".gamma")) {
      std::fill(b.values.begin(), b.values.end(), 1.0f);
      continue;
    }
    const double stddev = n == "tag.table" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(b.c) * b.h * b.w);
    for (float& v : b.values) v = static_cast<float>(stddev * rng.normal());
  }
  return p;
}

template <typename T>
DenoiserBatch<T> make_batch(const std::vector<Grid<T>>& xt, const std::vector<int>& steps,
                            const std::vector<Conditioning>& conds) {
  if (xt.empty() || steps.size() != xt.size() || conds.size() != xt.size()) {
    throw ShapeError("make_batch: inputs must be nonempty and of equal length");
  }
  const int H = xt[0].height, W = xt[0].width;
  DenoiserBatch<T> b;
  const int N = static_cast<int>(xt.size());
  b.xt = nn::Tensor<T>(N, 1, H, W);
  b.dmap = nn::Tensor<T>(N, 1, H, W);
  b.steps = steps;
  for (int i = 0; i < N; ++i) {
    if (xt[i].height != H || xt[i].width != W) throw ShapeError("make_batch: images differ in size");
    if (conds[i].dmap.height() != H || conds[i].dmap.width() != W) {
      throw ShapeError("make_batch: density map size differs from image size");
    }
    std::copy(xt[i].values.begin(), xt[i].values.end(), b.xt.sample(i));
    const auto& dv = conds[i].dmap.values.values;
    std::transform(dv.begin(), dv.end(), b.dmap.sample(i), [](float v) { return static_cast<T>(v); });
    b.tags.push_back(conds[i].tag);
  }
  return b;
}

template <typename T>
nn::Var denoiser_forward(nn::Tape<T>& tape, const DenoiserParams<T>& p, const std::vector<nn::Var>& bound,
                         nn::Var xt, const std::vector<int>& steps, const std::vector<int>& tags, nn::Var dmap) {
  const DenoiserArch& a = p.arch;
  const nn::Tensor<T>& X = tape.value(xt);
  check_input(X.h, X.w);
  if (X.c != 1) throw ShapeError("denoiser: input must have one channel");
  if (!tape.value(dmap).same_shape(X)) throw ShapeError("denoiser: density map shape differs from input");
  if (steps.size() != static_cast<std::size_t>(X.n) || tags.size() != steps.size()) {
    throw ShapeError("denoiser: step/tag count differs from batch size");
  }
  std::vector<int> rows(tags.size());
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (tags[i] < 0 || tags[i] > a.tags) throw BoundsError("denoiser: tag " + std::to_string(tags[i]) + " out of range");
    rows[i] = tags[i] == a.null_tag() ? -1 : tags[i];
  }

  const Layout L = layout_of(a);
  Net<T> net{tape, bound, a.groups};

  nn::Var temb = tape.constant(timestep_features<T>(steps, a.time_dim));
  nn::Var e = nn::linear(tape, temb, bound[L.t1.w], bound[L.t1.b]);
  e = nn::linear(tape, nn::silu(tape, e), bound[L.t2.w], bound[L.t2.b]);
  e = nn::add(tape, e, nn::embed_rows(tape, bound[L.tag_table], std::move(rows)));
  net.silu_emb = nn::silu(tape, e);

  nn::Var c = nn::scale(tape, dmap, static_cast<T>(p.dmap_scale));
  c = net.res(net.conv(c, L.ctrl_in), L.ctrl0);
  nn::Var c1 = net.res(nn::avg_pool2(tape, c), L.ctrl1);
  nn::Var cm = net.res(nn::avg_pool2(tape, c1), L.ctrlm);

  nn::Var h0 = net.res(net.conv(xt, L.in), L.enc0);
  h0 = nn::add(tape, h0, net.conv(c, L.fuse0));
  nn::Var h1 = net.res(nn::avg_pool2(tape, h0), L.enc1);
  h1 = nn::add(tape, h1, net.conv(c1, L.fuse1));
  nn::Var m = net.res(nn::avg_pool2(tape, h1), L.mid);
  m = nn::add(tape, m, net.conv(cm, L.fusem));

  nn::Var u1 = net.res(nn::concat_channels(tape, nn::upsample2(tape, m), h1), L.dec1);
  nn::Var u0 = net.res(nn::concat_channels(tape, nn::upsample2(tape, u1), h0), L.dec0);
  nn::Var out = net.conv(nn::silu(tape, net.norm(u0, L.out_norm)), L.out);

  // The mean of unit noise over a plane has deviation 1/sqrt(plane); rescale it to unit size.
  nn::Var xt_mean = nn::spatial_mean(tape, xt);
  const T plane = static_cast<T>(tape.value(xt).plane());
  nn::Var pooled = nn::concat_channels(
      tape, nn::concat_channels(tape, nn::scale(tape, xt_mean, std::sqrt(plane)), nn::spatial_mean(tape, u0)),
      net.silu_emb);
  nn::Var g = nn::silu(tape, nn::linear(tape, pooled, bound[L.global1.w], bound[L.global1.b]));
  nn::Var offset = nn::linear(tape, g, bound[L.global2.w], bound[L.global2.b]);
  nn::Var gain = nn::linear(tape, g, bound[L.global_gain.w], bound[L.global_gain.b]);
  return nn::add_channel_bias(tape, out, nn::add(tape, offset, nn::mul(tape, gain, xt_mean)));
}

template <typename T>
nn::Tensor<T> predict_eps_batch(const DenoiserParams<T>& p, const DenoiserBatch<T>& batch) {
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, nn::no_blocks());
  nn::Var xt = tape.constant(batch.xt);
  nn::Var dm = tape.constant(batch.dmap);
  nn::Var out = denoiser_forward(tape, p, bound, xt, batch.steps, batch.tags, dm);
  return tape.value(out);
}

template <typename T>
Grid<T> predict_eps(const DenoiserParams<T>& p, const Grid<T>& xt, int t, const Conditioning& c) {
  const DenoiserBatch<T> batch = make_batch<T>({xt}, {t}, {c});
  nn::Tensor<T> out = predict_eps_batch(p, batch);
  Grid<T> g(xt.height, xt.width);
  g.values = std::move(out.data);
  return g;
}

template <typename T>
LossAndGrad<T> loss_gradients(const DenoiserParams<T>& p, const DenoiserBatch<T>& batch,
                              const LossBuilder<T>& loss, const nn::BlockFilter& trainable) {
  if (batch.size() == 0) throw ShapeError("loss_gradients: empty batch");
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, trainable);
  nn::Var xt = tape.constant(batch.xt);
  nn::Var dm = tape.constant(batch.dmap);
  nn::Var eps = denoiser_forward(tape, p, bound, xt, batch.steps, batch.tags, dm);
  nn::Var L = loss(tape, xt, eps);
  if (tape.value(L).size() != 1) throw ShapeError("loss_gradients: loss is not a scalar");
  tape.backward(L);
  return {static_cast<double>(tape.value(L).data[0]), p.params.gradients(tape, bound)};
}

template <typename T>
Grid<T> input_gradient(const DenoiserParams<T>& p, const Grid<T>& xt, int t, const Conditioning& c,
                       const LossBuilder<T>& loss) {
  const DenoiserBatch<T> batch = make_batch<T>({xt}, {t}, {c});
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, nn::no_blocks());
  nn::Var x = tape.variable(batch.xt);
  nn::Var dm = tape.constant(batch.dmap);
  nn::Var eps = denoiser_forward(tape, p, bound, x, batch.steps, batch.tags, dm);
  nn::Var L = loss(tape, x, eps);
  tape.backward(L);
  Grid<T> g(xt.height, xt.width);
  g.values = tape.grad(x).data;
  return g;
}

Bytes save_params(const DenoiserParams<float>& p) {
  ByteWriter w;
  w.raw("DNSR1");
  w.u8(kCheckpointVersion);
  for (int v : p.arch.widths) w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(p.arch.groups));
  w.u32(static_cast<std::uint32_t>(p.arch.time_dim));
  w.u32(static_cast<std::uint32_t>(p.arch.emb_dim));
  w.u32(static_cast<std::uint32_t>(p.arch.tags));
  w.f32(static_cast<float>(p.dmap_scale));
  w.u64(p.params.total_size());
  p.params.write_values(w);
  return w.take();
}

DenoiserParams<float> load_params(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "denoiser checkpoint");
  r.expect_magic("DNSR1");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    throw FormatError("denoiser checkpoint: unsupported version " + std::to_string(version));
  }
  DenoiserArch a;
  auto field = [&] {
    const std::uint32_t v = r.u32();
    if (v == 0 || v > 4096) throw FormatError("denoiser checkpoint: implausible architecture field");
    return static_cast<int>(v);
  };
  for (int& v : a.widths) v = field();
  a.groups = field();
  a.time_dim = field();
  a.emb_dim = field();
  a.tags = field();
  try {
    validate(a);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("denoiser checkpoint: ") + e.what());
  }
  DenoiserParams<float> p;
  p.arch = a;
  p.dmap_scale = r.f32();
  const std::uint64_t count = r.u64();
  // Guard the allocation against a corrupt architecture header.
  if (count > r.remaining() / 4) throw FormatError("denoiser checkpoint: truncated parameter payload");
  build_layout(a, p.params);
  if (count != p.params.total_size()) {
    throw FormatError("denoiser checkpoint: parameter count " + std::to_string(count) + " does not match architecture (" +
                      std::to_string(p.params.total_size()) + ")");
  }
  p.params.read_values(r);
  r.expect_end();
  return p;
}

template DenoiserBatch<float> make_batch(const std::vector<Grid<float>>&, const std::vector<int>&,
                                         const std::vector<Conditioning>&);
template DenoiserBatch<double> make_batch(const std::vector<Grid<double>>&, const std::vector<int>&,
                                          const std::vector<Conditioning>&);
template nn::Var denoiser_forward(nn::Tape<float>&, const DenoiserParams<float>&, const std::vector<nn::Var>&, nn::Var,
                                  const std::vector<int>&, const std::vector<int>&, nn::Var);
template nn::Var denoiser_forward(nn::Tape<double>&, const DenoiserParams<double>&, const std::vector<nn::Var>&,
                                  nn::Var, const std::vector<int>&, const std::vector<int>&, nn::Var);
template nn::Tensor<float> predict_eps_batch(const DenoiserParams<float>&, const DenoiserBatch<float>&);
template nn::Tensor<double> predict_eps_batch(const DenoiserParams<double>&, const DenoiserBatch<double>&);
template Grid<float> predict_eps(const DenoiserParams<float>&, const Grid<float>&, int, const Conditioning&);
template Grid<double> predict_eps(const DenoiserParams<double>&, const Grid<double>&, int, const Conditioning&);
template LossAndGrad<float> loss_gradients(const DenoiserParams<float>&, const DenoiserBatch<float>&,
                                           const LossBuilder<float>&, const nn::BlockFilter&);
template LossAndGrad<double> loss_gradients(const DenoiserParams<double>&, const DenoiserBatch<double>&,
                                            const LossBuilder<double>&, const nn::BlockFilter&);
template Grid<float> input_gradient(const DenoiserParams<float>&, const Grid<float>&, int, const Conditioning&,
                                    const LossBuilder<float>&);
template Grid<double> input_gradient(const DenoiserParams<double>&, const Grid<double>&, int, const Conditioning&,
                                     const LossBuilder<double>&);

}  // namespace cdaug
