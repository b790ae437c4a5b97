#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "artsurf/rng.hpp"
#include "artsurf/sdf.hpp"

using namespace artsurf;

namespace {

SdfNetwork small_net(uint64_t seed) { return SdfNetwork::make({16, 16}, 2, seed); }

Bounds3 unit_box() {
  Bounds3 b;
  b.expand({-1, -1, -1});
  b.expand({1, 1, 1});
  return b;
}

}  // namespace

TEST_CASE("phi_k peak, direct evaluation, symmetry, monotone decay") {
  CHECK(phi_k(0.0, 0.1) == 0.25);  // e^0/(1+e^0)^2 exactly
  CHECK(phi_k(0.0, 37.0) == 0.25);
  // Direct evaluation of the bell at f=0.5, k=0.1.
  double direct = std::exp(0.1 * 0.5) / std::pow(1.0 + std::exp(0.1 * 0.5), 2.0);
  CHECK(phi_k(0.5, 0.1) == doctest::Approx(direct).epsilon(1e-12));
  CHECK(phi_k(0.5, 0.1) == doctest::Approx(0.24984).epsilon(1e-4));

  Rng rng(2, "phi");
  for (int i = 0; i < 10000; ++i) {
    double f = rng.uniform(-3, 3);
    double k = rng.uniform(1e-3, 50);
    CHECK(phi_k(f, k) == phi_k(-f, k));  // bitwise symmetry
    double f2 = f * (1.0 + rng.uniform(0.01, 1.0));
    CHECK(phi_k(f2, k) < phi_k(f, k) + 1e-18);  // decay in |f|
    CHECK(phi_k(f, k) > 0.0);
    CHECK(phi_k(f, k) <= 0.25);
  }
}

TEST_CASE("sdf_to_opacity trivial and derived values") {
  CHECK(sdf_to_opacity(0.3, 0.3, 0.5) == 0.0);
  CHECK(sdf_to_opacity(0.5, -0.5, 0.1) == 0.0);  // symmetric crossing: difference vanishes
  // Direct evaluation of Eq-2-with-bell at (-0.2, -0.5, k=0.1). The two routes
  // (ratio of bells, and the log-space form) agree at 5.2485e-4.
  double pi = phi_k(-0.2, 0.1), pn = phi_k(-0.5, 0.1);
  double expected = (pi - pn) / pi;
  CHECK(sdf_to_opacity(-0.2, -0.5, 0.1) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(sdf_to_opacity(-0.2, -0.5, 0.1) == doctest::Approx(5.2485e-4).epsilon(1e-3));
}

TEST_CASE("sdf_to_opacity range and sign-flip invariance") {
  Rng rng(4, "op");
  for (int i = 0; i < 10000; ++i) {
    double fi = rng.uniform(-2, 2), fn = rng.uniform(-2, 2), k = rng.uniform(0.01, 30);
    double v = sdf_to_opacity(fi, fn, k);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == sdf_to_opacity(-fi, -fn, k));
    CHECK(sdf_to_opacity(fi, fi, k) == 0.0);
  }
}

TEST_CASE("sdf_to_opacity gradients match finite differences") {
  Rng rng(6, "opg");
  for (int i = 0; i < 300; ++i) {
    double fi = rng.uniform(-1, 1), fn = rng.uniform(-1, 1), k = rng.uniform(0.05, 20);
    for (auto act : {OpacityActivation::kBell, OpacityActivation::kSigmoid}) {
      SdfOpacityGrad g;
      double v = sdf_to_opacity(fi, fn, k, act, &g);
      if (v <= 1e-9) continue;  // gated region
      double h = 1e-6;
      double d_fi = (sdf_to_opacity(fi + h, fn, k, act) - sdf_to_opacity(fi - h, fn, k, act)) /
                    (2 * h);
      double d_fn = (sdf_to_opacity(fi, fn + h, k, act) - sdf_to_opacity(fi, fn - h, k, act)) /
                    (2 * h);
      double d_k = (sdf_to_opacity(fi, fn, k + h, act) - sdf_to_opacity(fi, fn, k - h, act)) /
                   (2 * h);
      CHECK(g.d_fi == doctest::Approx(d_fi).epsilon(1e-4));
      CHECK(g.d_fnext == doctest::Approx(d_fn).epsilon(1e-4));
      CHECK(g.d_k == doctest::Approx(d_k).epsilon(1e-4));
    }
  }
}

TEST_CASE("zeroed output layer makes the net constant") {
  SdfNetwork net = small_net(1);
  net.weights().back().setZero();
  net.biases().back()(0) = -0.37;
  Rng rng(8, "const");
  for (int i = 0; i < 20; ++i) {
    Vec3 x{rng.normal(), rng.normal(), rng.normal()};
    CHECK(net.eval(x) == doctest::Approx(-0.37).epsilon(1e-15));
    CHECK(norm(net.gradient(x)) < 1e-15);
  }
}

TEST_CASE("gradient matches central finite differences on random nets") {
  SdfNetwork net = SdfNetwork::make({24, 24, 24}, 3, 42);
  // Random output layer (make() zeroes it).
  Rng wr(43, "w");
  for (int c = 0; c < net.weights().back().cols(); ++c)
    net.weights().back()(0, c) = wr.normal() * 0.3;
  Rng rng(10, "fd");
  for (int i = 0; i < 100; ++i) {
    Vec3 x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    Vec3 g = net.gradient(x);
    double h = 1e-4;
    for (int a = 0; a < 3; ++a) {
      Vec3 xp = x, xm = x;
      xp[a] += h;
      xm[a] -= h;
      double fd = (net.eval(xp) - net.eval(xm)) / (2 * h);
      CHECK(g[a] == doctest::Approx(fd).epsilon(1e-3));
    }
  }
}

TEST_CASE("fit to a plane recovers the normal as the gradient") {
  SdfNetwork net = SdfNetwork::make({16}, 0, 3);
  Vec3 n = normalized(Vec3{0.3, -0.5, 0.8});
  auto target = [&](const Vec3& x) { return dot(x, n); };
  fit_sdf_supervised(net, target, unit_box(), 4000, 256, 3e-3, 5);
  fit_sdf_supervised(net, target, unit_box(), 1000, 256, 3e-4, 6);
  Rng rng(12, "plane");
  for (int i = 0; i < 20; ++i) {
    Vec3 x{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    Vec3 g = net.gradient(x);
    CHECK(norm(g - n) < 0.02);
  }
}

TEST_CASE("fit to a sphere: center value and zero-set") {
  SdfNetwork net = SdfNetwork::make({48, 48, 48}, 4, 7);
  auto target = [&](const Vec3& x) { return norm(x) - 0.5; };
  fit_sdf_supervised(net, target, unit_box(), 6000, 256, 2e-3, 9);
  fit_sdf_supervised(net, target, unit_box(), 1500, 256, 2e-4, 10);
  // The supervised oracle rounds the cone apex at the centre: measured floor is
  // ~0.03 there, frozen here at 0.04. The zero-set itself lands well inside 0.02.
  CHECK(std::fabs(net.eval({0, 0, 0}) + 0.5) < 0.04);
  Rng rng(14, "sphere");
  for (int i = 0; i < 30; ++i) {
    Vec3 dir = normalized(Vec3{rng.normal(), rng.normal(), rng.normal()});
    double f = net.eval(dir * 0.5);
    CHECK(std::fabs(f) <= 0.02);
  }
}

TEST_CASE("geometric init approximates a sphere of radius 0.5") {
  SdfNetwork net = small_net(21);
  geometric_init(net, {0, 0, 0}, 0.5, 21);
  CHECK(net.eval({0, 0, 0}) < -0.25);
  CHECK(net.eval({0, 0, 1.0}) > 0.25);
}

TEST_CASE("weight gradients match finite differences (backprop gate)") {
  SdfNetwork net = small_net(31);
  Rng wr(32, "w");
  for (int c = 0; c < net.weights().back().cols(); ++c)
    net.weights().back()(0, c) = wr.normal() * 0.3;

  // Mini-batch L2 loss against a fixed target.
  std::vector<Vec3> pts;
  Rng rng(33, "pts");
  for (int i = 0; i < 16; ++i)
    pts.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  auto loss_of = [&](SdfNetwork& n) {
    std::vector<double> v;
    n.eval_batch(pts, v);
    double s = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
      double e = v[i] - 0.3 * pts[i].x;
      s += e * e;
    }
    return s / pts.size();
  };

  std::vector<double> v;
  net.eval_batch(pts, v);
  std::vector<SdfBackwardItem> items(pts.size());
  for (size_t i = 0; i < pts.size(); ++i)
    items[i] = {pts[i], 2.0 * (v[i] - 0.3 * pts[i].x) / pts.size(), {0, 0, 0}, -1};
  SdfGrads grads;
  grads.init_like(net);
  sdf_backward(net, items, grads, nullptr);
  std::vector<double> flat;
  grads.to_flat(flat);

  std::vector<double> params;
  net.get_params(params);
  Rng pick(34, "pick");
  double h = 1e-5;
  for (int t = 0; t < 120; ++t) {
    size_t i = pick.index(params.size());
    std::vector<double> pp = params;
    pp[i] += h;
    net.set_params(pp);
    double lp = loss_of(net);
    pp[i] -= 2 * h;
    net.set_params(pp);
    double lm = loss_of(net);
    net.set_params(params);
    double fd = (lp - lm) / (2 * h);
    CHECK(flat[i] == doctest::Approx(fd).epsilon(1e-3));
  }
}

TEST_CASE("gradient-path (double) backward matches finite differences") {
  SdfNetwork net = small_net(41);
  Rng wr(42, "w");
  for (int c = 0; c < net.weights().back().cols(); ++c)
    net.weights().back()(0, c) = wr.normal() * 0.3;

  Vec3 x{0.2, -0.4, 0.55};
  Vec3 p{0.7, 0.2, -1.1};  // fixed co-vector: L = p . grad f(x)
  auto scalar = [&](SdfNetwork& n, const Vec3& pt) { return dot(p, n.gradient(pt)); };

  SdfGrads grads;
  grads.init_like(net);
  std::vector<Vec3> xg(1, Vec3{});
  sdf_backward(net, {{x, 0.0, p, 0}}, grads, &xg);
  std::vector<double> flat;
  grads.to_flat(flat);

  std::vector<double> params;
  net.get_params(params);
  Rng pick(44, "pick");
  double h = 1e-5;
  for (int t = 0; t < 120; ++t) {
    size_t i = pick.index(params.size());
    std::vector<double> pp = params;
    pp[i] += h;
    net.set_params(pp);
    double lp = scalar(net, x);
    pp[i] -= 2 * h;
    net.set_params(pp);
    double lm = scalar(net, x);
    net.set_params(params);
    CHECK(flat[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(2e-3));
  }
  // Position gradient of p . grad f (a Hessian-vector product).
  for (int a = 0; a < 3; ++a) {
    Vec3 xp = x, xm = x;
    xp[a] += h;
    xm[a] -= h;
    double fd = (scalar(net, xp) - scalar(net, xm)) / (2 * h);
    CHECK(xg[0][a] == doctest::Approx(fd).epsilon(2e-3));
  }
}

TEST_CASE("combined value+tangent items accumulate both paths") {
  SdfNetwork net = small_net(51);
  Rng wr(52, "w");
  for (int c = 0; c < net.weights().back().cols(); ++c)
    net.weights().back()(0, c) = wr.normal() * 0.3;
  Vec3 x{-0.3, 0.1, 0.2};
  Vec3 p{0.4, -0.6, 0.9};
  double fbar = 0.8;

  SdfGrads both, val_only, tan_only;
  both.init_like(net);
  val_only.init_like(net);
  tan_only.init_like(net);
  sdf_backward(net, {{x, fbar, p, -1}}, both, nullptr);
  sdf_backward(net, {{x, fbar, {0, 0, 0}, -1}}, val_only, nullptr);
  sdf_backward(net, {{x, 0.0, p, -1}}, tan_only, nullptr);
  std::vector<double> fb, fv, ft;
  both.to_flat(fb);
  val_only.to_flat(fv);
  tan_only.to_flat(ft);
  for (size_t i = 0; i < fb.size(); ++i)
    CHECK(fb[i] == doctest::Approx(fv[i] + ft[i]).epsilon(1e-10));
}

TEST_CASE("sdf.json round trip") {
  SdfNetwork net = SdfNetwork::make({8, 8}, 1, 61);
  Rng wr(62, "w");
  for (int c = 0; c < net.weights().back().cols(); ++c)
    net.weights().back()(0, c) = wr.normal();
  net.set_log_k(std::log(0.37));
  std::string path = "/tmp/artsurf_test_sdf.json";
  net.save_json(path);
  SdfNetwork loaded = SdfNetwork::load_json(path);
  CHECK(loaded.k() == doctest::Approx(0.37).epsilon(1e-12));
  Rng rng(63, "pts");
  for (int i = 0; i < 10; ++i) {
    Vec3 x{rng.normal(), rng.normal(), rng.normal()};
    CHECK(loaded.eval(x) == doctest::Approx(net.eval(x)).epsilon(1e-12));
  }
}
