#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cdkt/error.hpp"
#include "cdkt/losses.hpp"
#include "cdkt/model.hpp"
#include "support.hpp"

using namespace cdkt;
using cdkt::test::random_tensor;
using cdkt::test::rel_err;

namespace {

constexpr int kInstances = 20;
constexpr double kLayerTol = 1e-4;

using L = LayerSpec;

std::vector<LayerSpec> small_mlp() { return {L::dense(4, 3), L::relu(), L::dense(3, 2)}; }

Index rand_in(Rng& rng, Index lo, Index hi) { return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

// Checks d/dparams of sum(wz * z) + sum(we * e) against central differences.
double gradient_error(std::vector<LayerSpec> arch, std::size_t tap, const Shape& input, Rng& rng) {
  Model m = build_model(arch, tap, rng.next_u64(), input);
  m.set_params(random_tensor({m.parameter_count()}, rng, 0.5));
  Shape batch = input;
  batch.insert(batch.begin(), rand_in(rng, 1, 3));
  const Tensor x = random_tensor(batch, rng);
  const ForwardResult out = m.forward(x);
  const Tensor wz = random_tensor(out.logits.shape(), rng), we = random_tensor(out.embedding.shape(), rng);
  m.zero_grads();
  m.backward(wz, &we);
  Tensor analytic({m.parameter_count()});
  {
    Index at = 0;
    for (const auto& p : m.parameters()) {
      analytic.data().segment(at, p.grad.size()) = p.grad.data();
      at += p.grad.size();
    }
  }
  const Tensor base = m.get_params();
  auto objective = [&](const Tensor& flat) {
    m.set_params(flat);
    const ForwardResult r = m.predict(x);
    return r.logits.data().dot(wz.data()) + r.embedding.data().dot(we.data());
  };
  const Tensor numeric = cdkt::test::numeric_grad(objective, base, 1e-5);
  m.set_params(base);
  return rel_err(analytic, numeric);
}

}  // namespace

TEST_CASE("dense gradients") {
  Rng rng(1);
  for (int k = 0; k < kInstances; ++k) {
    const Index a = rand_in(rng, 1, 5), b = rand_in(rng, 1, 5), c = rand_in(rng, 1, 4);
    CHECK(gradient_error({L::dense(a, b), L::dense(b, c)}, 1, {a}, rng) < kLayerTol);
  }
}

TEST_CASE("relu gradients") {
  Rng rng(2);
  for (int k = 0; k < kInstances; ++k) {
    const Index a = rand_in(rng, 1, 5), b = rand_in(rng, 2, 6), c = rand_in(rng, 1, 4);
    CHECK(gradient_error({L::dense(a, b), L::relu(), L::dense(b, c)}, 2, {a}, rng) < kLayerTol);
  }
}

TEST_CASE("conv2d gradients") {
  Rng rng(3);
  for (int k = 0; k < kInstances; ++k) {
    const Index c1 = rand_in(rng, 1, 2), c2 = rand_in(rng, 1, 3), c3 = rand_in(rng, 1, 2);
    const Index k1 = rand_in(rng, 1, 3), stride = rand_in(rng, 1, 2), side = rand_in(rng, 5, 7);
    const std::vector<LayerSpec> head = {L::conv2d(c1, c2, k1, stride), L::conv2d(c2, c3, 2), L::flatten()};
    const Shape flat = infer_shape(head, {c1, side, side}, head.size());
    std::vector<LayerSpec> arch = head;
    arch.push_back(L::dense(flat[0], 3));
    CHECK(gradient_error(arch, 1, {c1, side, side}, rng) < kLayerTol);
  }
}

TEST_CASE("maxpool2d gradients") {
  Rng rng(4);
  for (int k = 0; k < kInstances; ++k) {
    const Index c = rand_in(rng, 1, 2), pool = rand_in(rng, 2, 3), side = rand_in(rng, 5, 8);
    const std::vector<LayerSpec> head = {L::conv2d(c, 2, 2), L::maxpool2d(pool), L::flatten()};
    const Shape flat = infer_shape(head, {c, side, side}, head.size());
    std::vector<LayerSpec> arch = head;
    arch.push_back(L::dense(flat[0], 2));
    CHECK(gradient_error(arch, 2, {c, side, side}, rng) < kLayerTol);
  }
}

TEST_CASE("flatten gradients") {
  Rng rng(5);
  for (int k = 0; k < kInstances; ++k) {
    const Index c = rand_in(rng, 1, 3), side = rand_in(rng, 3, 5);
    const std::vector<LayerSpec> head = {L::conv2d(c, 2, 2), L::relu(), L::flatten()};
    const Shape flat = infer_shape(head, {c, side, side}, head.size());
    std::vector<LayerSpec> arch = head;
    arch.push_back(L::dense(flat[0], 3));
    CHECK(gradient_error(arch, 3, {c, side, side}, rng) < kLayerTol);
  }
}

TEST_CASE("reference cnn gradients") {
  Rng rng(6);
  const std::vector<LayerSpec> arch = {L::conv2d(1, 2, 3), L::relu(), L::maxpool2d(2), L::conv2d(2, 3, 2), L::relu(),
                                       L::flatten(),       L::dense(27, 5), L::relu(),  L::dense(5, 3)};
  CHECK(gradient_error(arch, 8, {1, 10, 10}, rng) < kLayerTol);
}

TEST_CASE("build: counting, determinism, errors") {
  const auto arch = small_mlp();
  const Model a = build_model(arch, 2, 7), b = build_model(arch, 2, 7);
  CHECK(a.parameter_count() == 23);
  CHECK(a.get_params() == b.get_params());
  CHECK(a.get_params().size() == 23);
  CHECK_FALSE(build_model(arch, 2, 8).get_params() == a.get_params());

  CHECK_THROWS_AS(build_model(arch, 0, 7), BuildError);
  CHECK_THROWS_AS(build_model(arch, 3, 7), BuildError);

  const std::vector<LayerSpec> bad = {L::dense(4, 3), L::relu(), L::dense(5, 2)};
  try {
    build_model(bad, 2, 1);
    FAIL("expected a build error");
  } catch (const BuildError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("layer 1") != std::string::npos);
    CHECK(msg.find("layer 2") != std::string::npos);
  }
  const std::vector<LayerSpec> conv = {L::conv2d(1, 2, 3), L::flatten(), L::dense(10, 2)};
  CHECK_THROWS_AS(build_model(conv, 2, 1, {1, 6, 6}), BuildError);
  CHECK_NOTHROW(build_model(conv, 2, 1, {1, 3, 7}));

  // Glorot range, zero biases.
  const double limit = std::sqrt(6.0 / 7.0);
  CHECK(a.parameters()[0].value.data().cwiseAbs().maxCoeff() <= limit);
  CHECK(a.parameters()[1].value.data().isZero(0.0));
}

TEST_CASE("forward contracts") {
  Model m = build_model(small_mlp(), 2, 3);
  m.set_params(Tensor({23}));
  Rng rng(9);
  const ForwardResult zero = m.forward(random_tensor({5, 4}, rng));
  CHECK(zero.logits.data().isZero(0.0));
  const Tensor p = softmax(zero.logits);
  for (Index i = 0; i < p.size(); ++i) CHECK(p[i] == 0.5);

  Model id = build_model(std::vector<LayerSpec>{L::dense(3, 3), L::dense(3, 3)}, 1, 1);
  Tensor flat = id.get_params();
  flat.data().setZero();
  for (Index k = 0; k < 3; ++k) flat[k * 3 + k] = 1.0, flat[12 + k * 3 + k] = 1.0;
  id.set_params(flat);
  const Tensor x = random_tensor({2, 3}, rng);
  CHECK(id.forward(x).logits == x);

  Model r = build_model(small_mlp(), 2, 4);
  const ForwardResult out = r.forward(random_tensor({5, 4}, rng));
  CHECK(out.logits.shape() == Shape{5, 2});
  CHECK(out.embedding.shape() == Shape{5, 3});

  try {
    r.forward(random_tensor({5, 3}, rng));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(4)") != std::string::npos);
    CHECK(msg.find("(3)") != std::string::npos);
  }
}

TEST_CASE("backward contracts") {
  Model m = build_model(std::vector<LayerSpec>{L::dense(1, 1), L::dense(1, 1)}, 1, 1);
  Tensor flat = m.get_params();
  flat[0] = 2.0;
  flat[1] = 0.0;
  flat[2] = 1.0;
  flat[3] = 0.0;
  m.set_params(flat);
  Tensor x({1, 1});
  x[0] = 3.0;
  m.forward(x);
  Tensor dz({1, 1}), de({1, 1});
  de[0] = 1.0;
  m.zero_grads();
  m.backward(dz, &de);
  CHECK(m.parameters()[0].grad[0] == 3.0);
  CHECK(m.parameters()[1].grad[0] == 1.0);

  Model fresh = build_model(small_mlp(), 2, 1);
  CHECK_THROWS_AS(fresh.backward(Tensor({1, 2})), StateError);

  Rng rng(10);
  Model n = build_model(small_mlp(), 2, 2);
  n.forward(random_tensor({4, 4}, rng));
  n.zero_grads();
  n.backward(Tensor({4, 2}), nullptr);
  for (const auto& p : n.parameters()) CHECK(p.grad.data().isZero(0.0));
  CHECK_THROWS_AS(n.backward(Tensor({4, 3})), ShapeError);
  const Tensor bad_de({4, 2});
  CHECK_THROWS_AS(n.backward(Tensor({4, 2}), &bad_de), ShapeError);

  // Scaling dz by a power of two scales every grad exactly.
  const Tensor dz1 = random_tensor({4, 2}, rng);
  n.zero_grads();
  n.backward(dz1);
  std::vector<Tensor> g1;
  for (const auto& p : n.parameters()) g1.push_back(p.grad);
  Tensor dz2 = dz1;
  dz2.data() *= 4.0;
  n.zero_grads();
  n.backward(dz2);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    Tensor want = g1[i];
    want.data() *= 4.0;
    CHECK(n.parameters()[i].grad == want);
  }
}

TEST_CASE("caller-owned caches and predict") {
  Rng rng(11);
  Model m = build_model(small_mlp(), 2, 5);
  const Tensor x1 = random_tensor({3, 4}, rng), x2 = random_tensor({2, 4}, rng);
  ForwardCache c1, c2;
  const ForwardResult r1 = m.forward(x1, c1);
  m.forward(x2, c2);
  const Tensor dz = random_tensor(r1.logits.shape(), rng);
  m.zero_grads();
  m.backward(c1, dz);
  std::vector<Tensor> via_cache;
  for (const auto& p : m.parameters()) via_cache.push_back(p.grad);
  m.forward(x1);
  m.zero_grads();
  m.backward(dz);
  for (std::size_t i = 0; i < via_cache.size(); ++i) CHECK(m.parameters()[i].grad == via_cache[i]);

  const Tensor before = m.get_params();
  CHECK(m.predict(x1).logits == r1.logits);
  CHECK(m.get_params() == before);
}

TEST_CASE("sgd_step") {
  Model m = build_model(std::vector<LayerSpec>{L::dense(1, 1), L::dense(1, 1)}, 1, 1);
  Tensor flat = m.get_params();
  flat[0] = 1.0;
  m.set_params(flat);
  m.parameters()[0].grad[0] = 0.5;
  m.sgd_step(0.1);
  CHECK(m.get_params()[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(m.parameters()[0].grad[0] == 0.5);

  const Tensor before = m.get_params();
  m.sgd_step(0.0);
  CHECK(m.get_params() == before);
  CHECK_THROWS_AS(m.sgd_step(-0.1), ConfigError);
  CHECK_THROWS_AS(m.sgd_step(std::nan("")), ConfigError);

  Model a = build_model(small_mlp(), 2, 3), b = build_model(small_mlp(), 2, 3);
  Rng rng(12);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    a.parameters()[i].grad = random_tensor(a.parameters()[i].value.shape(), rng);
    b.parameters()[i].grad = a.parameters()[i].grad;
  }
  a.sgd_step(0.05);
  a.sgd_step(0.05);
  b.sgd_step(0.1);
  CHECK(rel_err(a.get_params(), b.get_params()) < 1e-15);
}

TEST_CASE("get_params / set_params") {
  Model m = build_model(small_mlp(), 2, 3);
  const Tensor p = m.get_params();
  m.set_params(p);
  CHECK(m.get_params() == p);
  CHECK_THROWS_AS(m.set_params(Tensor({22})), ShapeError);
}

TEST_CASE("checkpoint round trip and file layout") {
  const auto dir = std::filesystem::temp_directory_path() / "cdkt_model_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.bin";
  const std::vector<LayerSpec> arch = {L::conv2d(1, 2, 3), L::relu(), L::maxpool2d(2), L::flatten(), L::dense(8, 4),
                                       L::relu(), L::dense(4, 3)};
  const Model m = build_model(arch, 6, 21, {1, 6, 6});
  save_checkpoint(m, path);

  std::ifstream is(path, std::ios::binary);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), {});
  REQUIRE(bytes.size() == 8 + 8 * static_cast<std::size_t>(m.parameter_count()));
  std::uint64_t count = 0;
  for (int i = 7; i >= 0; --i) count = (count << 8) | bytes[static_cast<std::size_t>(i)];
  CHECK(count == static_cast<std::uint64_t>(m.parameter_count()));
  double first = 0.0;
  std::memcpy(&first, bytes.data() + 8, 8);
  CHECK(first == m.get_params()[0]);

  const Model back = load_checkpoint(path);
  CHECK(back.get_params() == m.get_params());
  CHECK(back.layers() == m.layers());
  CHECK(back.embed_tap() == m.embed_tap());
  CHECK(back.input_shape() == m.input_shape());

  std::filesystem::resize_file(path, bytes.size() - 3);
  CHECK_THROWS(load_checkpoint(path));
  std::filesystem::remove_all(dir);
}
