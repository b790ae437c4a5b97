#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "artsurf/gaussian.hpp"
#include "artsurf/rng.hpp"

using namespace artsurf;

namespace {

GaussianPrimitive make_prim(const Vec3& c, const UnitQuaternion& q, const Vec3& scale,
                            int sh_degree = 2) {
  GaussianPrimitive g;
  g.center = c;
  g.rotation = q;
  g.log_scale = {std::log(scale.x), std::log(scale.y), std::log(scale.z)};
  g.sh.assign(3 * (sh_degree + 1) * (sh_degree + 1), 0.0);
  return g;
}

// World-space density of the anisotropic Gaussian via the covariance R S S^T R^T.
double world_density(const GaussianPrimitive& g, const Vec3& p) {
  Mat3 r = quat_to_matrix(g.rotation);
  Vec3 s = g.scale();
  Vec3 d = r.tmul(p - g.center);
  Vec3 local = d.cwise_div(s);
  return std::exp(-0.5 * dot(local, local));
}

}  // namespace

TEST_CASE("to_local_frame identity frame") {
  GaussianPrimitive g = make_prim({0, 0, 0}, UnitQuaternion::identity(), {1, 1, 1});
  Ray ray{{0, 0, -2}, {0, 0, 1}};
  Vec3 ol, rl;
  to_local_frame(g, ray, ol, rl);
  CHECK(norm(ol - Vec3{0, 0, -2}) < 1e-15);
  CHECK(norm(rl - Vec3{0, 0, 1}) < 1e-15);
}

TEST_CASE("to_local_frame anisotropic scaling halves the x component") {
  GaussianPrimitive g = make_prim({0, 0, 0}, UnitQuaternion::identity(), {2, 1, 1});
  Ray ray{{-3, 0, 0}, {1, 0, 0}};
  Vec3 ol, rl;
  to_local_frame(g, ray, ol, rl);
  CHECK(norm(rl - Vec3{0.5, 0, 0}) < 1e-15);
  CHECK(norm(ol - Vec3{-1.5, 0, 0}) < 1e-15);
}

TEST_CASE("to_local_frame density equals the world-space covariance oracle") {
  Rng rng(3, "frame");
  for (int trial = 0; trial < 50; ++trial) {
    GaussianPrimitive g = make_prim(
        {rng.normal(), rng.normal(), rng.normal()},
        UnitQuaternion(rng.normal(), rng.normal(), rng.normal(), rng.normal()),
        {0.3 + rng.next_double(), 0.3 + rng.next_double(), 0.3 + rng.next_double()});
    Ray ray{{rng.normal(), rng.normal(), rng.normal()},
            normalized({rng.normal(), rng.normal(), rng.normal()})};
    Vec3 ol, rl;
    to_local_frame(g, ray, ol, rl);
    for (int i = 0; i < 100; ++i) {
      double t = rng.uniform(-2, 2);
      Vec3 q = ol + rl * t;
      double local_density = std::exp(-0.5 * dot(q, q));
      CHECK(local_density == doctest::Approx(world_density(g, ray.point_at(t))).epsilon(1e-9));
    }
  }
}

TEST_CASE("local-frame density is invariant under joint rigid transforms") {
  Rng rng(5, "rigid");
  for (int trial = 0; trial < 50; ++trial) {
    GaussianPrimitive g = make_prim(
        {rng.normal(), rng.normal(), rng.normal()},
        UnitQuaternion(rng.normal(), rng.normal(), rng.normal(), rng.normal()),
        {0.4 + rng.next_double(), 0.4 + rng.next_double(), 0.4 + rng.next_double()});
    Ray ray{{rng.normal(), rng.normal(), rng.normal()},
            normalized({rng.normal(), rng.normal(), rng.normal()})};
    UnitQuaternion qrot(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    Mat3 rot = quat_to_matrix(qrot);
    Vec3 trans{rng.normal(), rng.normal(), rng.normal()};

    GaussianPrimitive g2 = g;
    g2.center = rot * g.center + trans;
    g2.rotation = quat_mul(qrot, g.rotation);
    Ray ray2{rot * ray.origin + trans, rot * ray.dir};

    Vec3 ol1, rl1, ol2, rl2;
    to_local_frame(g, ray, ol1, rl1);
    to_local_frame(g2, ray2, ol2, rl2);
    for (double t : {-1.0, 0.0, 0.7, 2.3}) {
      double d1 = std::exp(-0.5 * norm2(ol1 + rl1 * t));
      double d2 = std::exp(-0.5 * norm2(ol2 + rl2 * t));
      CHECK(d1 == doctest::Approx(d2).epsilon(1e-9));
    }
  }
}

TEST_CASE("sh_eval degree 0: DC behaviour") {
  // Y00 = 0.28209479; rgb = clamp(c * Y00 + 0.5), independent of direction.
  std::vector<double> sh(3, 0.0);
  Vec3 gray = sh_eval(sh, 0, {0, 0, 1});
  CHECK(gray.x == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(gray.y == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(gray.z == doctest::Approx(0.5).epsilon(1e-12));

  sh = {0.8, -0.4, 0.1};
  Vec3 a = sh_eval(sh, 0, {0, 0, 1});
  Vec3 b = sh_eval(sh, 0, normalized({1, -2, 0.3}));
  CHECK(norm(a - b) < 1e-15);
  CHECK(a.x == doctest::Approx(0.8 * 0.28209479177387814 + 0.5).epsilon(1e-9));
  // Analytic integral oracle: Y00 = 1/(2 sqrt(pi)).
  CHECK(0.28209479177387814 == doctest::Approx(1.0 / (2.0 * std::sqrt(kPi))).epsilon(1e-12));
}

TEST_CASE("sh_eval degree 1 z-band is antisymmetric about 0.5") {
  std::vector<double> sh(3 * 4, 0.0);
  sh[2 * 3 + 0] = 0.5;  // z-linear band, red channel
  Vec3 up = sh_eval(sh, 1, {0, 0, 1});
  Vec3 down = sh_eval(sh, 1, {0, 0, -1});
  CHECK(up.x + down.x == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(up.x != doctest::Approx(down.x));
  CHECK(up.y == doctest::Approx(0.5));
}

TEST_CASE("densify_and_prune no-op below thresholds") {
  Scene scene;
  scene.sh_degree = 1;
  for (int i = 0; i < 4; ++i)
    scene.primitives.push_back(
        make_prim({static_cast<double>(i), 0, 0}, UnitQuaternion::identity(), {0.1, 0.1, 0.1}, 1));
  scene.densify_stats.resize(4);
  for (int i = 0; i < 4; ++i) {
    scene.densify_stats.view_count[i] = 10;
    scene.densify_stats.grad_accum[i] = 1e-5 * 10;   // below threshold
    scene.densify_stats.max_sigma[i] = 0.5;          // above prune
  }
  DensifyOptions opts;
  DensifyReport rep = densify_and_prune(scene, opts);
  CHECK(rep.clones == 0);
  CHECK(rep.splits == 0);
  CHECK(rep.pruned == 0);
  CHECK(scene.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(rep.parent[i] == i);
}

TEST_CASE("densify_and_prune clones small high-gradient primitives") {
  Scene scene;
  scene.sh_degree = 1;
  for (int i = 0; i < 3; ++i)
    scene.primitives.push_back(
        make_prim({static_cast<double>(i), 0, 0}, UnitQuaternion::identity(), {0.01, 0.01, 0.01}, 1));
  scene.densify_stats.resize(3);
  for (int i = 0; i < 3; ++i) {
    scene.densify_stats.view_count[i] = 5;
    scene.densify_stats.max_sigma[i] = 0.5;
  }
  scene.densify_stats.grad_accum[1] = 1e-3 * 5;  // above 2e-4 mean
  DensifyOptions opts;
  opts.split_scale = 0.05;  // 0.01 scale < split threshold -> clone
  DensifyReport rep = densify_and_prune(scene, opts);
  CHECK(rep.clones == 1);
  CHECK(scene.size() == 4);
}

TEST_CASE("densify_and_prune splits large primitives, scale divided by 1.6") {
  Scene scene;
  scene.sh_degree = 1;
  scene.primitives.push_back(make_prim({0, 0, 0}, UnitQuaternion::identity(), {0.2, 0.1, 0.1}, 1));
  scene.densify_stats.resize(1);
  scene.densify_stats.view_count[0] = 5;
  scene.densify_stats.grad_accum[0] = 1e-2;
  scene.densify_stats.max_sigma[0] = 0.5;
  DensifyOptions opts;
  opts.split_scale = 0.05;
  DensifyReport rep = densify_and_prune(scene, opts);
  CHECK(rep.splits == 1);
  REQUIRE(scene.size() == 2);
  CHECK(scene.primitives[0].scale().x == doctest::Approx(0.2 / 1.6).epsilon(1e-12));
  CHECK(scene.primitives[0].center.x != scene.primitives[1].center.x);
}

TEST_CASE("densify_and_prune removes low-opacity primitives") {
  Scene scene;
  scene.sh_degree = 1;
  for (int i = 0; i < 2; ++i)
    scene.primitives.push_back(
        make_prim({static_cast<double>(i), 0, 0}, UnitQuaternion::identity(), {0.1, 0.1, 0.1}, 1));
  scene.densify_stats.resize(2);
  for (int i = 0; i < 2; ++i) scene.densify_stats.view_count[i] = 3;
  scene.densify_stats.max_sigma[0] = 1e-4;  // < 0.005 -> pruned
  scene.densify_stats.max_sigma[1] = 0.2;
  DensifyReport rep = densify_and_prune(scene, DensifyOptions{});
  CHECK(rep.pruned == 1);
  CHECK(scene.size() == 1);
  CHECK(scene.primitives[0].center.x == doctest::Approx(1.0));
}

TEST_CASE("densify_and_prune refuses to empty the scene") {
  Scene scene;
  scene.sh_degree = 1;
  scene.primitives.push_back(make_prim({0, 0, 0}, UnitQuaternion::identity(), {0.1, 0.1, 0.1}, 1));
  scene.densify_stats.resize(1);
  scene.densify_stats.view_count[0] = 3;
  scene.densify_stats.max_sigma[0] = 1e-5;
  DensifyReport rep = densify_and_prune(scene, DensifyOptions{});
  CHECK(rep.rejected);
  CHECK(scene.size() == 1);
}

TEST_CASE("gaussians PLY round trip") {
  Rng rng(19, "ply");
  Scene scene;
  scene.sh_degree = 2;
  for (int i = 0; i < 5; ++i) {
    GaussianPrimitive g = make_prim(
        {rng.normal(), rng.normal(), rng.normal()},
        UnitQuaternion(rng.normal(), rng.normal(), rng.normal(), rng.normal()),
        {0.5 + rng.next_double(), 0.5 + rng.next_double(), 0.5 + rng.next_double()});
    for (double& v : g.sh) v = rng.normal();
    g.part_label = i % 2;
    scene.primitives.push_back(g);
  }
  scene.densify_stats.resize(5);
  std::string path = "/tmp/artsurf_test_gaussians.ply";
  save_gaussians_ply(path, scene);
  Scene loaded = load_gaussians_ply(path);
  REQUIRE(loaded.size() == 5);
  CHECK(loaded.sh_degree == 2);
  for (size_t i = 0; i < 5; ++i) {
    CHECK(norm(loaded.primitives[i].center - scene.primitives[i].center) < 1e-6);
    CHECK(loaded.primitives[i].part_label == scene.primitives[i].part_label);
    for (size_t j = 0; j < scene.primitives[i].sh.size(); ++j)
      CHECK(loaded.primitives[i].sh[j] ==
            doctest::Approx(scene.primitives[i].sh[j]).epsilon(1e-6));
  }
}
