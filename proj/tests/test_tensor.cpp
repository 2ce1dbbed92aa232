#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "spadapt/gradcheck.hpp"
#include "spadapt/ops.hpp"
#include "spadapt/optim.hpp"
#include "spadapt/tensor_io.hpp"
#include "test_util.hpp"

using namespace spadapt;
using testutil::Gen;

namespace {

// Reduces an op output to a scalar with fixed random weights so that no
// gradient is trivially zero (a plain sum would cancel through batchnorm).
Tensor reduce(Graph& g, const Tensor& out, const Tensor& weights) {
  return weighted_sum(g, out, weights);
}

GradCheckReport check(const std::function<Tensor(Graph&)>& fn, std::vector<NamedTensor> params,
                      double tol = 1e-6) {
  return finite_diff_check(fn, std::move(params), 1e-5, tol);
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, DType::f64);
  CHECK(t.numel() == 6);
  CHECK(t.at(5) == 0.0);
  Tensor c = t.clone();
  CHECK_FALSE(c.same_storage(t));
  CHECK_THROWS(Tensor::from_doubles({2, 2}, {1.0, 2.0, 3.0}));
  CHECK(Tensor::scalar(2.5, DType::f32).item() == 2.5);
}

TEST_CASE("grad has the shape and dtype of data") {
  Tensor t = Tensor::from_doubles({3}, {1.0, 2.0, 3.0}, DType::f32);
  t.set_requires_grad(true);
  CHECK(t.mutable_grad<float>().size() == 3);
  CHECK(t.grad_doubles() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("conv2d examples") {
  Graph g(Graph::Mode::no_grad);
  SUBCASE("scalar multiply") {
    Tensor x = Tensor::from_doubles({1, 1, 1, 1}, {2.0});
    Tensor w = Tensor::from_doubles({1, 1, 1, 1}, {3.0});
    Tensor b = Tensor::from_doubles({1}, {0.0});
    CHECK(conv2d(g, x, w, b).item() == 6.0);
  }
  SUBCASE("identity kernel") {
    Gen gen(1);
    Tensor x = gen.tensor({2, 1, 5, 4});
    std::vector<double> k(9, 0.0);
    k[4] = 1.0;
    Tensor w = Tensor::from_doubles({1, 1, 3, 3}, k, DType::f64);
    Tensor b = Tensor::from_doubles({1}, {0.0});
    CHECK(conv2d(g, x, w, b, 1, 1).bit_equal(x));
  }
  SUBCASE("output extent") {
    Gen gen(2);
    Tensor x = gen.tensor({1, 2, 7, 6});
    Tensor w = gen.tensor({3, 2, 3, 3});
    Tensor b = gen.tensor({3});
    CHECK(conv2d(g, x, w, b, 2, 1).shape() == Shape{1, 3, 4, 3});
  }
  SUBCASE("errors") {
    Gen gen(3);
    Tensor b = gen.tensor({3});
    CHECK_THROWS(conv2d(g, gen.tensor({1, 2, 5, 5}), gen.tensor({3, 4, 3, 3}), b));
    CHECK_THROWS(conv2d(g, gen.tensor({1, 2, 2, 2}), gen.tensor({3, 2, 3, 3}), b));
    CHECK_THROWS(conv2d(g, gen.tensor({1, 2, 5, 5}), gen.tensor({3, 2, 3, 3}), b, 0));
  }
}

TEST_CASE("1x1 conv equals per-pixel dense") {
  Gen gen(4);
  Graph g(Graph::Mode::no_grad);
  Tensor x = gen.tensor({2, 5, 4, 4});
  Tensor w = gen.tensor({3, 5, 1, 1});
  Tensor b = gen.tensor({3});
  Tensor y = conv2d(g, x, w, b);
  const auto xv = x.to_doubles(), wv = w.to_doubles(), bv = b.to_doubles(), yv = y.to_doubles();
  double err = 0.0;
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t p = 0; p < 16; ++p) {
      for (std::size_t f = 0; f < 3; ++f) {
        double acc = bv[f];
        for (std::size_t c = 0; c < 5; ++c) acc += wv[f * 5 + c] * xv[(n * 5 + c) * 16 + p];
        err = std::max(err, std::abs(acc - yv[(n * 3 + f) * 16 + p]));
      }
    }
  }
  CHECK(err <= 1e-14);
}

TEST_CASE("conv2d gradient, fixed case") {
  Gen gen(5);
  Tensor x = gen.param({1, 2, 5, 5}), w = gen.param({3, 2, 3, 3}), b = gen.param({3});
  auto fn = [&](Graph& g) { return sum(g, conv2d(g, x, w, b)); };
  auto rep = check(fn, {{"x", x}, {"w", w}, {"b", b}});
  INFO(rep.summary());
  CHECK(rep.passed());
}

TEST_CASE("batchnorm2d examples") {
  Graph g(Graph::Mode::no_grad);
  Tensor gamma = Tensor::from_doubles({2}, {1.0, 1.0});
  SUBCASE("constant input gives zeros") {
    auto st = BatchNormState::make(2, DType::f64);
    Tensor x = Tensor::from_doubles({1, 2, 1, 1}, {3.0, -7.0});
    Tensor beta = Tensor::from_doubles({2}, {0.0, 0.0});
    Tensor y = batchnorm2d(g, x, gamma, beta, st, Mode::train);
    CHECK(y.to_doubles() == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("beta shifts the mean") {
    Gen gen(6);
    auto st = BatchNormState::make(2, DType::f64);
    Tensor beta = Tensor::from_doubles({2}, {5.0, 5.0});
    Tensor y = batchnorm2d(g, gen.tensor({4, 2, 3, 3}), gamma, beta, st, Mode::train);
    const auto v = y.to_doubles();
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0;
      for (std::size_t n = 0; n < 4; ++n) {
        for (std::size_t p = 0; p < 9; ++p) m += v[(n * 2 + c) * 9 + p];
      }
      CHECK(m / 36.0 == doctest::Approx(5.0).epsilon(1e-12));
    }
  }
  SUBCASE("running stats: momentum 0.1 in train, untouched in eval") {
    auto st = BatchNormState::make(1, DType::f64);
    Tensor x = Tensor::from_doubles({2, 1, 1, 1}, {1.0, 3.0});
    Tensor g1 = Tensor::from_doubles({1}, {1.0}), b1 = Tensor::from_doubles({1}, {0.0});
    batchnorm2d(g, x, g1, b1, st, Mode::train);
    CHECK(st.running_mean.item() == doctest::Approx(0.2));
    CHECK(st.running_var.item() == doctest::Approx(0.9 + 0.1 * 2.0));  // unbiased var 2
    batchnorm2d(g, x, g1, b1, st, Mode::eval);
    CHECK(st.running_mean.item() == doctest::Approx(0.2));
  }
}

TEST_CASE("segmented batchnorm pools statistics and ignores segment order") {
  Gen gen(61);
  Graph g(Graph::Mode::no_grad);
  Tensor gamma = gen.tensor({3}), beta = gen.tensor({3});
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const std::size_t views = gen.index(2, 5), n = gen.index(1, 4);
    std::vector<Tensor> xs;
    for (std::size_t v = 0; v < views; ++v) xs.push_back(gen.tensor({n, 3, 4, 4}, DType::f32));
    Graph gf(Graph::Mode::no_grad);
    auto joint = BatchNormState::make(3, DType::f32);
    auto seg = BatchNormState::make(3, DType::f32);
    Tensor g32 = gamma.to(DType::f32), b32 = beta.to(DType::f32);
    Tensor plain = batchnorm2d(gf, concat_batch(gf, xs), g32, b32, joint, Mode::train);
    Tensor y = batchnorm2d(gf, concat_batch(gf, xs), g32, b32, seg, Mode::train, views);
    CHECK(testutil::max_abs_diff(plain, y) < 1e-5);
    CHECK(testutil::max_abs_diff(joint.running_mean, seg.running_mean) < 1e-6);

    std::vector<std::size_t> perm(views);
    for (std::size_t i = 0; i < views; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), gen.rng);
    std::vector<Tensor> shuffled;
    for (auto i : perm) shuffled.push_back(xs[i]);
    auto seg2 = BatchNormState::make(3, DType::f32);
    const auto parts = split_batch(gf, y, views);
    const auto parts2 = split_batch(
        gf, batchnorm2d(gf, concat_batch(gf, shuffled), g32, b32, seg2, Mode::train, views), views);
    for (std::size_t i = 0; i < views; ++i) CHECK(parts2[i].bit_equal(parts[perm[i]]));
    CHECK(seg2.running_mean.bit_equal(seg.running_mean));
    CHECK(seg2.running_var.bit_equal(seg.running_var));
  }
  auto st = BatchNormState::make(3, DType::f64);
  CHECK_THROWS_WITH_AS(batchnorm2d(g, gen.tensor({5, 3, 2, 2}), gamma, beta, st, Mode::train, 2),
                       doctest::Contains("segments"), TensorError);
  CHECK_THROWS_AS(split_batch(g, gen.tensor({5, 3}), 2), TensorError);
  CHECK_THROWS_AS(concat_batch(g, {gen.tensor({2, 3}), gen.tensor({2, 4})}), TensorError);
}

TEST_CASE("small layer examples") {
  Graph g(Graph::Mode::no_grad);
  CHECK(relu(g, Tensor::from_doubles({3}, {-1.0, 0.0, 2.0})).to_doubles() ==
        std::vector<double>{0.0, 0.0, 2.0});
  CHECK(maxpool2d(g, Tensor::from_doubles({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2).item() == 4.0);
  CHECK_THROWS(maxpool2d(g, Tensor::from_doubles({1, 1, 2, 2}, {1, 2, 3, 4}), 3, 1));
  Tensor gap = global_avg_pool(g, Tensor::from_doubles({1, 2, 1, 2}, {1, 3, 5, 7}));
  CHECK(gap.to_doubles() == std::vector<double>{2.0, 6.0});
}

TEST_CASE("maxpool ties route the gradient to the lowest index") {
  Tensor x = Tensor::from_doubles({1, 1, 2, 2}, {5, 5, 5, 5});
  x.set_requires_grad(true);
  Graph g;
  Tensor y = maxpool2d(g, x, 2, 2);
  g.backward(y);
  CHECK(x.grad_doubles() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("softmax cross entropy") {
  Graph g(Graph::Mode::no_grad);
  const std::vector<int> l0{0};
  CHECK(softmax_cross_entropy(g, Tensor::from_doubles({1, 4}, {0, 0, 0, 0}), l0).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(softmax_cross_entropy(g, Tensor::from_doubles({1, 4}, {1000, 0, 0, 0}), l0).item() ==
        doctest::Approx(0.0));
  const std::vector<int> bad{4};
  CHECK_THROWS(softmax_cross_entropy(g, Tensor::from_doubles({1, 4}, {0, 0, 0, 0}), bad));

  SUBCASE("gradient is (softmax - onehot) / N") {
    Gen gen(7);
    Tensor z = gen.param({3, 5}, -3, 3);
    const auto labels = gen.labels(3, 5);
    Graph gg;
    Tensor loss = softmax_cross_entropy(gg, z, labels);
    gg.backward(loss);
    const auto zv = z.to_doubles(), gv = z.grad_doubles();
    for (std::size_t n = 0; n < 3; ++n) {
      double denom = 0.0;
      for (std::size_t k = 0; k < 5; ++k) denom += std::exp(zv[n * 5 + k]);
      for (std::size_t k = 0; k < 5; ++k) {
        const double expect =
            (std::exp(zv[n * 5 + k]) / denom - (static_cast<int>(k) == labels[n] ? 1.0 : 0.0)) / 3.0;
        CHECK(gv[n * 5 + k] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("mse") {
  Graph g(Graph::Mode::no_grad);
  Tensor a = Tensor::from_doubles({2}, {1, 1});
  CHECK(mse(g, a, a).item() == 0.0);
  CHECK(mse(g, a, Tensor::from_doubles({2}, {0, 2})).item() == 1.0);
  CHECK_THROWS(mse(g, a, Tensor::from_doubles({3}, {0, 2, 1})));

  Tensor p = Tensor::from_doubles({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  Tensor t = Tensor::from_doubles({3}, {0.0, 1.0, 0.5});
  Graph gg;
  gg.backward(mse(gg, p, t));
  CHECK(p.grad_doubles()[0] == doctest::Approx(2.0 / 3.0));
  CHECK(p.grad_doubles()[1] == doctest::Approx(-2.0));
  CHECK(p.grad_doubles()[2] == 0.0);
}

TEST_CASE("non-finite values are an error") {
  Graph g(Graph::Mode::no_grad);
  Tensor x = Tensor::from_doubles({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(relu(g, x), NonFiniteError);
  CHECK_THROWS_AS(scale(g, Tensor::from_doubles({1}, {1e300}), 1e300), NonFiniteError);
}

TEST_CASE("gradient check sampling") {
  Gen gen(77);
  Tensor a = gen.param({40}), b = gen.param({3}), w = gen.tensor({40});
  int calls = 0;
  auto fn = [&](Graph& g) {
    ++calls;
    return add(g, weighted_sum(g, relu(g, a), w), sum(g, scale(g, b, 2.0)));
  };
  auto full = finite_diff_check(fn, {{"a", a}, {"b", b}});
  CHECK(calls == 1 + 2 * 43);
  calls = 0;
  auto sampled = finite_diff_check(fn, {{"a", a}, {"b", b}}, 1e-5, 1e-6, 1e-3, 5, 9);
  CHECK(calls == 1 + 2 * (5 + 3));  // b is smaller than the cap and checked whole
  CHECK(full.passed());
  CHECK(sampled.passed());
  CHECK(sampled.worst() <= full.worst());
}

TEST_CASE("graph backward runs once") {
  Tensor x = Tensor::from_doubles({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Graph g;
  Tensor y = sum(g, scale(g, x, 3.0));
  g.backward(y);
  CHECK(x.grad_doubles() == std::vector<double>{3.0, 3.0});
  CHECK_THROWS(g.backward(y));
}

TEST_CASE("forward passes are bitwise deterministic") {
  Gen gen(8);
  Tensor x = gen.tensor({2, 3, 6, 6}, DType::f32), w = gen.tensor({4, 3, 3, 3}, DType::f32);
  Tensor b = gen.tensor({4}, DType::f32);
  Graph g1(Graph::Mode::no_grad), g2(Graph::Mode::no_grad);
  CHECK(conv2d(g1, x, w, b, 1, 1).bit_equal(conv2d(g2, x, w, b, 1, 1)));
}

// Property: every differentiable op agrees with central differences on
// random small shapes, 100 trials each.
TEST_CASE("gradient property suite") {
  Gen gen(2024);
  constexpr int kTrials = 100;
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t n = gen.index(1, 2), c = gen.index(1, 3), h = gen.index(3, 5), w = gen.index(3, 5);
    CAPTURE(trial);

    {  // conv2d with random stride/padding
      const std::size_t f = gen.index(1, 3), kh = gen.index(1, 3);
      const int stride = static_cast<int>(gen.index(1, 2)), pad = static_cast<int>(gen.index(0, 1));
      Tensor x = gen.param({n, c, h, w}), wt = gen.param({f, c, kh, kh}), b = gen.param({f});
      Graph probe(Graph::Mode::no_grad);
      Tensor wts = gen.tensor(conv2d(probe, x, wt, b, stride, pad).shape());
      auto rep = check([&](Graph& g) { return reduce(g, conv2d(g, x, wt, b, stride, pad), wts); },
                       {{"x", x}, {"w", wt}, {"b", b}});
      INFO("conv2d " << rep.summary());
      CHECK(rep.passed());
    }
    {  // batchnorm, train mode (needs more than one value per channel)
      Tensor x = gen.param({n + 1, c, h, w}), gamma = gen.param({c}), beta = gen.param({c});
      auto st = BatchNormState::make(c, DType::f64);
      Tensor wts = gen.tensor({n + 1, c, h, w});
      auto rep = check(
          [&](Graph& g) { return reduce(g, batchnorm2d(g, x, gamma, beta, st, Mode::train), wts); },
          {{"x", x}, {"gamma", gamma}, {"beta", beta}});
      INFO("batchnorm " << rep.summary());
      CHECK(rep.passed());
    }
    {  // batchnorm over view segments, routed through concat/split
      const std::size_t views = gen.index(2, 3);
      std::vector<Tensor> xs;
      std::vector<NamedTensor> params;
      for (std::size_t v = 0; v < views; ++v) {
        xs.push_back(gen.param({n, c, h, w}));
        params.push_back({"x" + std::to_string(v), xs.back()});
      }
      Tensor gamma = gen.param({c}), beta = gen.param({c});
      params.push_back({"gamma", gamma});
      params.push_back({"beta", beta});
      auto st = BatchNormState::make(c, DType::f64);
      std::vector<Tensor> wts;
      for (std::size_t v = 0; v < views; ++v) wts.push_back(gen.tensor({n, c, h, w}));
      auto rep = check(
          [&](Graph& g) {
            Tensor y = batchnorm2d(g, concat_batch(g, xs), gamma, beta, st, Mode::train, views);
            const auto parts = split_batch(g, y, views);
            Tensor loss = reduce(g, parts[0], wts[0]);
            for (std::size_t v = 1; v < views; ++v) loss = add(g, loss, reduce(g, parts[v], wts[v]));
            return loss;
          },
          params);
      INFO("segmented batchnorm " << rep.summary());
      CHECK(rep.passed());
    }
    {  // relu, maxpool, global average pool
      Tensor x = gen.param({n, c, h, w});
      Graph probe(Graph::Mode::no_grad);
      Tensor wr = gen.tensor({n, c, h, w});
      Tensor wp = gen.tensor(maxpool2d(probe, x, 2, 2).shape());
      Tensor wg = gen.tensor({n, c});
      auto rep = check(
          [&](Graph& g) {
            Tensor a = reduce(g, relu(g, x), wr);
            Tensor b = reduce(g, maxpool2d(g, x, 2, 2), wp);
            return add(g, add(g, a, b), reduce(g, global_avg_pool(g, x), wg));
          },
          {{"x", x}});
      INFO("relu/maxpool/gap " << rep.summary());
      CHECK(rep.passed());
    }
    {  // dense + cross entropy
      const std::size_t d = gen.index(2, 6), k = gen.index(2, 5);
      Tensor x = gen.param({n + 1, d}), wt = gen.param({k, d}), b = gen.param({k});
      const auto labels = gen.labels(n + 1, k);
      auto rep = check([&](Graph& g) { return softmax_cross_entropy(g, dense(g, x, wt, b), labels); },
                       {{"x", x}, {"w", wt}, {"b", b}});
      INFO("dense/ce " << rep.summary());
      CHECK(rep.passed());
    }
    {  // mse, scale, add, concat, gather, elementwise max/mean
      Tensor a = gen.param({n, c, h, w}), t = gen.tensor({n, c, h, w});
      // Keep max operands apart: finite differences are meaningless at a tie.
      auto bv = a.to_doubles();
      for (auto& v : bv) v += (gen.index(0, 1) ? 1.0 : -1.0) * gen.uniform(0.01, 1.0);
      Tensor b = Tensor::from_doubles({n, c, h, w}, bv, DType::f64);
      b.set_requires_grad(true);
      std::vector<std::size_t> idx(c + 1);
      for (auto& i : idx) i = gen.index(0, 2 * c - 1);
      Tensor wc = gen.tensor({n, idx.size(), h, w});
      Tensor wm = gen.tensor({n, c, h, w});
      auto rep = check(
          [&](Graph& g) {
            Tensor l1 = mse(g, scale(g, a, 1.7), t);
            Tensor cat = concat_channels(g, {a, b});
            Tensor l2 = reduce(g, gather_channels(g, cat, idx), wc);
            Tensor l3 = reduce(g, elementwise_max(g, {a, b}), wm);
            Tensor l4 = reduce(g, elementwise_mean(g, {a, add(g, a, b)}), wm);
            return add(g, add(g, l1, l2), add(g, l3, l4));
          },
          {{"a", a}, {"b", b}});
      INFO("elementwise " << rep.summary());
      CHECK(rep.passed());
    }
  }
}

// Independent scalar Adam, written directly from the update rule.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double x, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    return x - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves params and moments") {
    Tensor p = Tensor::from_doubles({2}, {1.0, -1.0});
    p.set_requires_grad(true);
    std::vector<NamedTensor> params{{"p", p}};
    AdamState st;
    p.zero_grad();
    adam_step(params, st, 0.1);
    CHECK(p.to_doubles() == std::vector<double>{1.0, -1.0});
    CHECK(st.step == 1);
    CHECK(st.first_moment[0] == std::vector<double>{0.0, 0.0});
    CHECK(st.second_moment[0] == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    Tensor p = Tensor::from_doubles({2}, {0.0, 0.0});
    p.set_requires_grad(true);
    p.mutable_grad<double>()[0] = 3.0;
    p.mutable_grad<double>()[1] = -0.02;
    std::vector<NamedTensor> params{{"p", p}};
    AdamState st;
    adam_step(params, st, 0.01);
    CHECK(p.to_doubles()[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(p.to_doubles()[1] == doctest::Approx(0.01).epsilon(1e-6));
  }
  SUBCASE("10 steps on a quadratic match the scalar reference") {
    Tensor p = Tensor::from_doubles({1}, {2.0});
    p.set_requires_grad(true);
    std::vector<NamedTensor> params{{"p", p}};
    AdamState st;
    ScalarAdam ref;
    double x = 2.0;
    for (int i = 0; i < 10; ++i) {
      p.zero_grad();
      Graph g;
      g.backward(sum(g, mse(g, p, Tensor::from_doubles({1}, {0.5}))));  // (p-0.5)^2
      adam_step(params, st, 0.05);
      x = ref.step(x, 2 * (x - 0.5), 0.05);
    }
    CHECK(std::abs(p.item() - x) <= 1e-10);
    CHECK(st.step == 10);
  }
  SUBCASE("NaN gradient aborts and names the parameter") {
    Tensor a = Tensor::from_doubles({1}, {1.0}), b = Tensor::from_doubles({1}, {2.0});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    a.mutable_grad<double>()[0] = 1.0;
    b.mutable_grad<double>()[0] = std::nan("");
    std::vector<NamedTensor> params{{"a", a}, {"bad.weight", b}};
    AdamState st;
    try {
      adam_step(params, st, 0.1);
      FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
      CHECK(std::string(e.what()).find("bad.weight") != std::string::npos);
    }
    CHECK(a.item() == 1.0);
    CHECK(st.step == 0);
  }
  SUBCASE("groups carry their lr multiplier") {
    Tensor a = Tensor::from_doubles({1}, {0.0}), b = Tensor::from_doubles({1}, {0.0});
    Adam opt;
    opt.add_group("adaptor", {{"a", a}}, 10.0);
    opt.add_group("backbone", {{"b", b}}, 1.0);
    a.set_requires_grad(true).mutable_grad<double>()[0] = 1.0;
    b.set_requires_grad(true).mutable_grad<double>()[0] = 1.0;
    opt.step(1e-3);
    CHECK(a.item() == doctest::Approx(-1e-2));
    CHECK(b.item() == doctest::Approx(-1e-3));
    CHECK(opt.lr_scale_of("a") == 10.0);
  }
}

TEST_CASE("tensor file round trip is bit exact") {
  Gen gen(9);
  for (DType dt : {DType::f32, DType::f64}) {
    Tensor t = gen.tensor({2, 3, 4}, dt, -1e3, 1e3);
    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "SPAT");
    CHECK(static_cast<int>(bytes[4]) == 1);
    CHECK(static_cast<int>(bytes[5]) == (dt == DType::f32 ? 1 : 2));
    CHECK(static_cast<int>(bytes[6]) == 3);
    Tensor back = read_tensor(ss);
    CHECK(back.bit_equal(t));
    std::stringstream again;
    write_tensor(again, back);
    CHECK(again.str() == bytes);
  }
  std::stringstream junk("SPAX....");
  CHECK_THROWS(read_tensor(junk));
}
