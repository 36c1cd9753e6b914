#include "cdkt/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cdkt/random.hpp"

namespace cdkt {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::dense, LayerKind::conv2d, LayerKind::maxpool2d, LayerKind::relu,
                      LayerKind::flatten}) {
    if (name == to_string(k)) return k;
  }
  throw BuildError("unknown layer kind '" + name + "'");
}

std::string describe(const LayerSpec& spec) {
  std::string s = to_string(spec.kind);
  switch (spec.kind) {
    case LayerKind::dense:
      s += "(" + std::to_string(spec.in) + "->" + std::to_string(spec.out) + ")";
      break;
    case LayerKind::conv2d:
      s += "(" + std::to_string(spec.in) + "->" + std::to_string(spec.out) + ", k=" +
           std::to_string(spec.kernel) + ", s=" + std::to_string(spec.stride) + ")";
      break;
    case LayerKind::maxpool2d:
      s += "(" + std::to_string(spec.pool) + ")";
      break;
    default:
      break;
  }
  return s;
}

namespace {

std::string layer_name(std::span<const LayerSpec> arch, std::size_t i) {
  return "layer " + std::to_string(i) + " " + describe(arch[i]);
}

// Output shape of one layer for a per-example input shape; throws on mismatch.
Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::dense:
      if (in.size() != 1 || in[0] != spec.in) {
        throw ShapeError("dense expects (" + std::to_string(spec.in) + "), got " + shape_string(in));
      }
      return {spec.out};
    case LayerKind::conv2d:
      if (in.size() != 3 || in[0] != spec.in || in[1] < spec.kernel || in[2] < spec.kernel) {
        throw ShapeError("conv2d expects (" + std::to_string(spec.in) + ", >=" + std::to_string(spec.kernel) +
                         ", >=" + std::to_string(spec.kernel) + "), got " + shape_string(in));
      }
      return {spec.out, (in[1] - spec.kernel) / spec.stride + 1, (in[2] - spec.kernel) / spec.stride + 1};
    case LayerKind::maxpool2d:
      if (in.size() != 3 || in[1] < spec.pool || in[2] < spec.pool) {
        throw ShapeError("maxpool2d expects (C, >=" + std::to_string(spec.pool) + ", >=" +
                         std::to_string(spec.pool) + "), got " + shape_string(in));
      }
      return {in[0], in[1] / spec.pool, in[2] / spec.pool};
    case LayerKind::relu:
      return in;
    case LayerKind::flatten:
      if (in.empty()) throw ShapeError("flatten expects at least one feature axis");
      return {shape_size(in)};
  }
  return in;
}

void validate_spec(std::span<const LayerSpec> arch, std::size_t i) {
  const LayerSpec& s = arch[i];
  const bool ok = [&] {
    switch (s.kind) {
      case LayerKind::dense: return s.in > 0 && s.out > 0;
      case LayerKind::conv2d: return s.in > 0 && s.out > 0 && s.kernel > 0 && s.stride > 0;
      case LayerKind::maxpool2d: return s.pool > 0;
      default: return true;
    }
  }();
  if (!ok) throw BuildError(layer_name(arch, i) + " has non-positive attributes");
}

// Shape compatibility without a known input shape: track the rank (flat
// features vs. channel images) and the feature/channel count where known.
void check_adjacent(std::span<const LayerSpec> arch) {
  enum class Form { unknown, flat, image };
  Form form = Form::unknown;
  Index width = -1;  // features (flat) or channels (image); -1 = unknown
  for (std::size_t i = 0; i < arch.size(); ++i) {
    const LayerSpec& s = arch[i];
    auto fail = [&](const std::string& why) {
      if (i == 0) throw BuildError(layer_name(arch, i) + ": " + why);
      throw BuildError(layer_name(arch, i - 1) + " -> " + layer_name(arch, i) + ": " + why);
    };
    switch (s.kind) {
      case LayerKind::dense:
        if (form == Form::image) fail("dense needs flat input; insert flatten");
        if (width >= 0 && width != s.in) {
          fail("produces " + std::to_string(width) + " features, dense expects " + std::to_string(s.in));
        }
        form = Form::flat;
        width = s.out;
        break;
      case LayerKind::conv2d:
        if (form == Form::flat) fail("conv2d needs channel input");
        if (width >= 0 && width != s.in) {
          fail("produces " + std::to_string(width) + " channels, conv2d expects " + std::to_string(s.in));
        }
        form = Form::image;
        width = s.out;
        break;
      case LayerKind::maxpool2d:
        if (form == Form::flat) fail("maxpool2d needs channel input");
        form = Form::image;
        break;
      case LayerKind::relu:
        break;
      case LayerKind::flatten:
        if (form == Form::image) width = -1;  // spatial extent unknown here
        form = Form::flat;
        break;
    }
  }
}

}  // namespace

Shape infer_shape(std::span<const LayerSpec> arch, const Shape& input_shape, std::size_t upto) {
  Shape shape = input_shape;
  for (std::size_t i = 0; i < upto && i < arch.size(); ++i) {
    try {
      shape = layer_output_shape(arch[i], shape);
    } catch (const ShapeError& e) {
      if (i == 0) throw BuildError("input " + shape_string(input_shape) + " -> " + layer_name(arch, i) + ": " + e.what());
      throw BuildError(layer_name(arch, i - 1) + " -> " + layer_name(arch, i) + ": " + e.what());
    }
  }
  return shape;
}

Model Model::build(std::span<const LayerSpec> arch, std::size_t embed_tap, std::uint64_t seed,
                   const Shape& input_shape) {
  if (arch.empty()) throw BuildError("empty layer stack");
  if (embed_tap == 0 || embed_tap >= arch.size()) {
    throw BuildError("embed_tap must satisfy 0 < embed_tap < " + std::to_string(arch.size()) + ", got " +
                     std::to_string(embed_tap));
  }
  for (std::size_t i = 0; i < arch.size(); ++i) validate_spec(arch, i);
  check_adjacent(arch);
  if (!input_shape.empty()) infer_shape(arch, input_shape, arch.size());

  Model m;
  m.specs_.assign(arch.begin(), arch.end());
  m.embed_tap_ = embed_tap;
  m.input_shape_ = input_shape;

  Rng rng(seed);
  auto add_param = [&](Shape shape, double limit) {
    Parameter p;
    p.value = Tensor(shape);
    p.grad = Tensor(std::move(shape));
    p.id = m.params_.size();
    if (limit > 0.0) {
      for (Index k = 0; k < p.value.size(); ++k) p.value[k] = rng.uniform(-limit, limit);
    }
    m.params_.push_back(std::move(p));
  };
  for (const LayerSpec& s : m.specs_) {
    m.first_param_.push_back(m.params_.size());
    if (s.kind == LayerKind::dense) {
      add_param({s.out, s.in}, std::sqrt(6.0 / static_cast<double>(s.in + s.out)));
      add_param({s.out}, 0.0);
    } else if (s.kind == LayerKind::conv2d) {
      const Index area = s.kernel * s.kernel;
      add_param({s.out, s.in, s.kernel, s.kernel}, std::sqrt(6.0 / static_cast<double>((s.in + s.out) * area)));
      add_param({s.out}, 0.0);
    }
  }
  return m;
}

Model build_model(std::span<const LayerSpec> arch, std::size_t embed_tap, std::uint64_t seed,
                  const Shape& input_shape) {
  return Model::build(arch, embed_tap, seed, input_shape);
}

Index Model::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

ForwardResult Model::forward(const Tensor& x) {
  cache_.valid = false;
  return run(x, &cache_);
}

ForwardResult Model::forward(const Tensor& x, ForwardCache& cache) const {
  cache.valid = false;
  return run(x, &cache);
}

ForwardResult Model::predict(const Tensor& x) const { return run(x, nullptr); }

ForwardResult Model::run(const Tensor& x, ForwardCache* cache) const {
  if (x.rank() < 2) throw ShapeError("input must be a batch, got shape " + shape_string(x.shape()));
  if (!input_shape_.empty() && x.row_shape() != input_shape_) {
    throw ShapeError("input expected per-example shape " + shape_string(input_shape_) + ", got " +
                     shape_string(x.row_shape()));
  }
  const Index batch = x.rows();
  if (cache) {
    cache->inputs.assign(specs_.size(), Tensor());
    cache->columns.assign(specs_.size(), {});
    cache->argmax.assign(specs_.size(), {});
  }

  ForwardResult result;
  Tensor act = x;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const LayerSpec& s = specs_[i];
    Shape out_row;
    try {
      out_row = layer_output_shape(s, act.row_shape());
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " " + describe(s) + ": " + e.what());
    }
    Shape out_shape{batch};
    out_shape.insert(out_shape.end(), out_row.begin(), out_row.end());
    Tensor out(out_shape);

    switch (s.kind) {
      case LayerKind::dense: {
        const auto& w = params_[first_param_[i]].value;
        const auto& b = params_[first_param_[i] + 1].value;
        Tensor::ConstMatrixMap wm(w.data().data(), s.out, s.in);
        out.matrix().noalias() = act.matrix() * wm.transpose();
        out.matrix().rowwise() += b.data().transpose();
        break;
      }
      case LayerKind::conv2d: {
        const auto& w = params_[first_param_[i]].value;
        const auto& b = params_[first_param_[i] + 1].value;
        const Index c_in = s.in, k = s.kernel, st = s.stride;
        const Index h = act.dim(2), wd = act.dim(3);
        const Index ho = out_row[1], wo = out_row[2];
        Tensor::ConstMatrixMap wm(w.data().data(), s.out, c_in * k * k);
        if (cache) cache->columns[i].resize(static_cast<std::size_t>(batch));
        RowMatrix col(c_in * k * k, ho * wo);
        for (Index n = 0; n < batch; ++n) {
          const double* src = act.data().data() + n * c_in * h * wd;
          for (Index c = 0; c < c_in; ++c) {
            for (Index ki = 0; ki < k; ++ki) {
              for (Index kj = 0; kj < k; ++kj) {
                const Index r = (c * k + ki) * k + kj;
                for (Index oh = 0; oh < ho; ++oh) {
                  const double* line = src + (c * h + oh * st + ki) * wd + kj;
                  for (Index ow = 0; ow < wo; ++ow) col(r, oh * wo + ow) = line[ow * st];
                }
              }
            }
          }
          Tensor::MatrixMap y(out.data().data() + n * s.out * ho * wo, s.out, ho * wo);
          y.noalias() = wm * col;
          y.colwise() += b.data();
          if (cache) cache->columns[i][static_cast<std::size_t>(n)] = col;
        }
        break;
      }
      case LayerKind::maxpool2d: {
        const Index ch = act.dim(1), h = act.dim(2), wd = act.dim(3);
        const Index ho = out_row[1], wo = out_row[2], p = s.pool;
        std::vector<Index>* arg = cache ? &cache->argmax[i] : nullptr;
        if (arg) arg->resize(static_cast<std::size_t>(out.size()));
        Index o = 0;
        for (Index n = 0; n < batch; ++n) {
          for (Index c = 0; c < ch; ++c) {
            const Index base = (n * ch + c) * h * wd;
            for (Index oh = 0; oh < ho; ++oh) {
              for (Index ow = 0; ow < wo; ++ow, ++o) {
                Index best = base + (oh * p) * wd + ow * p;
                for (Index pi = 0; pi < p; ++pi) {
                  for (Index pj = 0; pj < p; ++pj) {
                    const Index at = base + (oh * p + pi) * wd + ow * p + pj;
                    if (act[at] > act[best]) best = at;
                  }
                }
                out[o] = act[best];
                if (arg) (*arg)[static_cast<std::size_t>(o)] = best;
              }
            }
          }
        }
        break;
      }
      case LayerKind::relu:
        out.data() = act.data().cwiseMax(0.0);
        break;
      case LayerKind::flatten:
        out.data() = act.data();
        break;
    }

    if (cache) cache->inputs[i] = std::move(act);
    act = std::move(out);
    if (i + 1 == embed_tap_) result.embedding = act;
  }
  result.logits = std::move(act);
  if (cache) {
    cache->output_shape = result.logits.shape();
    cache->embedding_shape = result.embedding.shape();
    cache->valid = true;
  }
  return result;
}

void Model::backward(const Tensor& dz, const Tensor* de) { backward(cache_, dz, de); }

void Model::backward(const ForwardCache& cache, const Tensor& dz, const Tensor* de) {
  if (!cache.valid || cache.inputs.size() != specs_.size()) {
    throw StateError("backward called without a prior forward pass");
  }
  if (dz.shape() != cache.output_shape) {
    throw ShapeError("backward: dz shape " + shape_string(dz.shape()) + " vs logits " +
                     shape_string(cache.output_shape));
  }
  if (de && de->shape() != cache.embedding_shape) {
    throw ShapeError("backward: de shape " + shape_string(de->shape()) + " vs embedding " +
                     shape_string(cache.embedding_shape));
  }

  Tensor g = dz;
  for (std::size_t li = specs_.size(); li-- > 0;) {
    if (li + 1 == embed_tap_ && de) g.data() += de->data();
    const LayerSpec& s = specs_[li];
    const Tensor& in = cache.inputs[li];
    const bool need_input_grad = li > 0;
    Tensor dx;
    if (need_input_grad) dx = Tensor(in.shape());

    switch (s.kind) {
      case LayerKind::dense: {
        Parameter& w = params_[first_param_[li]];
        Parameter& b = params_[first_param_[li] + 1];
        Tensor::MatrixMap dw(w.grad.data().data(), s.out, s.in);
        dw.noalias() += g.matrix().transpose() * in.matrix();
        b.grad.data() += g.matrix().colwise().sum().transpose();
        if (need_input_grad) {
          Tensor::ConstMatrixMap wm(w.value.data().data(), s.out, s.in);
          dx.matrix().noalias() = g.matrix() * wm;
        }
        break;
      }
      case LayerKind::conv2d: {
        Parameter& w = params_[first_param_[li]];
        Parameter& b = params_[first_param_[li] + 1];
        const Index c_in = s.in, k = s.kernel, st = s.stride;
        const Index batch = in.dim(0), h = in.dim(2), wd = in.dim(3);
        const Index ho = g.dim(2), wo = g.dim(3);
        Tensor::MatrixMap dw(w.grad.data().data(), s.out, c_in * k * k);
        Tensor::ConstMatrixMap wm(w.value.data().data(), s.out, c_in * k * k);
        RowMatrix dcol;
        for (Index n = 0; n < batch; ++n) {
          Tensor::ConstMatrixMap gy(g.data().data() + n * s.out * ho * wo, s.out, ho * wo);
          const RowMatrix& col = cache.columns[li][static_cast<std::size_t>(n)];
          dw.noalias() += gy * col.transpose();
          b.grad.data() += gy.rowwise().sum();
          if (!need_input_grad) continue;
          dcol.noalias() = wm.transpose() * gy;
          double* dst = dx.data().data() + n * c_in * h * wd;
          for (Index c = 0; c < c_in; ++c) {
            for (Index ki = 0; ki < k; ++ki) {
              for (Index kj = 0; kj < k; ++kj) {
                const Index r = (c * k + ki) * k + kj;
                for (Index oh = 0; oh < ho; ++oh) {
                  double* line = dst + (c * h + oh * st + ki) * wd + kj;
                  for (Index ow = 0; ow < wo; ++ow) line[ow * st] += dcol(r, oh * wo + ow);
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::maxpool2d: {
        if (!need_input_grad) break;
        const auto& arg = cache.argmax[li];
        for (Index o = 0; o < g.size(); ++o) dx[arg[static_cast<std::size_t>(o)]] += g[o];
        break;
      }
      case LayerKind::relu:
        if (need_input_grad) dx.data() = (in.data().array() > 0.0).select(g.data(), 0.0);
        break;
      case LayerKind::flatten:
        if (need_input_grad) dx.data() = g.data();
        break;
    }
    if (need_input_grad) g = std::move(dx);
  }
}

void Model::zero_grads() {
  for (auto& p : params_) p.grad.data().setZero();
}

void Model::sgd_step(double lr) {
  // lr == 0 is accepted as the identity step.
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  for (auto& p : params_) p.value.data() -= lr * p.grad.data();
}

Tensor Model::get_params() const {
  Tensor flat({parameter_count()});
  Index at = 0;
  for (const auto& p : params_) {
    flat.data().segment(at, p.value.size()) = p.value.data();
    at += p.value.size();
  }
  return flat;
}

void Model::set_params(const Tensor& flat) {
  if (flat.size() != parameter_count()) {
    throw ShapeError("set_params: expected " + std::to_string(parameter_count()) + " values, got " +
                     std::to_string(flat.size()));
  }
  Index at = 0;
  for (auto& p : params_) {
    p.value.data() = flat.data().segment(at, p.value.size());
    at += p.value.size();
  }
}

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    os.write(reinterpret_cast<const char*>(b), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw TruncatedFileError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

std::filesystem::path sidecar(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const Tensor flat = model.get_params();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_le<std::uint64_t>(os, static_cast<std::uint64_t>(flat.size()));
  for (Index i = 0; i < flat.size(); ++i) write_le<double>(os, flat[i]);

  nlohmann::json j;
  j["embed_tap"] = model.embed_tap();
  j["input_shape"] = model.input_shape();
  j["parameter_count"] = flat.size();
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& s : model.layers()) {
    nlohmann::json l{{"kind", to_string(s.kind)}};
    if (s.kind == LayerKind::dense) {
      l["in"] = s.in;
      l["out"] = s.out;
    } else if (s.kind == LayerKind::conv2d) {
      l["in"] = s.in;
      l["out"] = s.out;
      l["kernel"] = s.kernel;
      l["stride"] = s.stride;
    } else if (s.kind == LayerKind::maxpool2d) {
      l["pool"] = s.pool;
    }
    layers.push_back(std::move(l));
  }
  std::ofstream js(sidecar(path));
  js << j.dump(2) << '\n';
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream js(sidecar(path));
  if (!js) throw Error("cannot open " + sidecar(path).string());
  const auto j = nlohmann::json::parse(js);
  std::vector<LayerSpec> arch;
  for (const auto& l : j.at("layers")) {
    LayerSpec s;
    s.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    if (s.kind == LayerKind::dense || s.kind == LayerKind::conv2d) {
      s.in = l.at("in").get<Index>();
      s.out = l.at("out").get<Index>();
    }
    if (s.kind == LayerKind::conv2d) {
      s.kernel = l.at("kernel").get<Index>();
      s.stride = l.at("stride").get<Index>();
    }
    if (s.kind == LayerKind::maxpool2d) {
      s.pool = l.at("pool").get<Index>();
      s.stride = s.pool;
    }
    arch.push_back(s);
  }
  Model m = build_model(arch, j.at("embed_tap").get<std::size_t>(), 0, j.at("input_shape").get<Shape>());

  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  const auto count = read_le<std::uint64_t>(is);
  if (static_cast<Index>(count) != m.parameter_count()) {
    throw ShapeError("checkpoint holds " + std::to_string(count) + " parameters, layers need " +
                     std::to_string(m.parameter_count()));
  }
  Tensor flat({static_cast<Index>(count)});
  for (Index i = 0; i < flat.size(); ++i) flat[i] = read_le<double>(is);
  m.set_params(flat);
  return m;
}

}  // namespace cdkt
