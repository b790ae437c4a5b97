#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "artsurf/errors.hpp"
#include "artsurf/renderer.hpp"
#include "artsurf/rng.hpp"

using namespace artsurf;

namespace {

GaussianPrimitive make_prim(const Vec3& c, const UnitQuaternion& q, const Vec3& scale,
                            int sh_degree = 1) {
  GaussianPrimitive g;
  g.center = c;
  g.rotation = q;
  g.log_scale = {std::log(scale.x), std::log(scale.y), std::log(scale.z)};
  g.sh.assign(3 * (sh_degree + 1) * (sh_degree + 1), 0.0);
  return g;
}

Camera test_camera(int res = 8) {
  double focal = 0.5 * res / std::tan(deg2rad(16.0));
  return Camera::look_at({2.2, 0.9, 1.4}, {0, 0, 0}, {0, 0, 1}, res, res, focal, focal,
                         res / 2.0, res / 2.0);
}

// Inverse of the bell on f >= 0: phi_k(f, k) = value.
double inv_phi(double value, double k) {
  return 2.0 * std::acosh(std::sqrt(0.25 / value)) / k;
}

}  // namespace

TEST_CASE("peak_depth examples and grid-search oracle") {
  CHECK(peak_depth({1, 0, 0}, {-1, 0, 0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(peak_depth({1, 0, 0}, {0, 1, 0}) == doctest::Approx(1e-4).epsilon(1e-12));

  Rng rng(3, "peak");
  for (int i = 0; i < 50; ++i) {
    Vec3 o{rng.normal(), rng.normal(), rng.normal()};
    Vec3 r{rng.normal(), rng.normal(), rng.normal()};
    if (norm(r) < 1e-3) continue;
    double t = peak_depth(o, r);
    double best = norm2(o + r * t);
    for (double tt = 1e-4; tt < 5.0; tt += 1e-4)
      CHECK(norm2(o + r * tt) >= best - 1e-9);
  }
}

TEST_CASE("contribution examples") {
  CHECK(contribution({0, 0, -2}, {0, 0, 1}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(contribution({1, 0, 0}, {0, 1, 0}) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  // 3.1 sigma perpendicular offset: below the exp(-4.5) cutoff, so the hit is culled
  CHECK(contribution({3.1, 0, 0}, {0, 1, 0}) < std::exp(-4.5));
}

TEST_CASE("gaussian_normal isotropic case and thin-axis tilt") {
  GaussianPrimitive g = make_prim({0, 0, 0}, UnitQuaternion::identity(), {1, 1, 1});
  Vec3 n = gaussian_normal(g, {0, 0, 1}, {0, 0, 1});
  CHECK(norm(n - Vec3{0, 0, -1}) < 1e-12);

  GaussianPrimitive wide = make_prim({0, 0, 0}, UnitQuaternion::identity(), {10, 1, 1});
  Vec3 r_l{0.6, 0.0, 0.8};
  Vec3 nw = gaussian_normal(wide, r_l, normalized({0.6, 0, 0.8}));
  // S^-1 shrinks the x component: the normal leans toward the thin axes.
  Vec3 expect = normalized(Vec3{-0.06, 0, -0.8});
  CHECK(norm(nw - expect) < 1e-12);
}

TEST_CASE("gaussian_normal is equivariant under joint rotations") {
  Rng rng(5, "equi");
  for (int i = 0; i < 200; ++i) {
    GaussianPrimitive g = make_prim(
        {0, 0, 0}, UnitQuaternion(rng.normal(), rng.normal(), rng.normal(), rng.normal()),
        {0.3 + rng.next_double(), 0.3 + rng.next_double(), 0.3 + rng.next_double()});
    Ray ray{{rng.normal(), rng.normal(), rng.normal()},
            normalized({rng.normal(), rng.normal(), rng.normal()})};
    Vec3 ol, rl;
    to_local_frame(g, ray, ol, rl);
    Vec3 n1 = gaussian_normal(g, rl, ray.dir);

    UnitQuaternion qrot(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    Mat3 rot = quat_to_matrix(qrot);
    GaussianPrimitive g2 = g;
    g2.rotation = quat_mul(qrot, g.rotation);
    Ray ray2{rot * ray.origin, rot * ray.dir};
    Vec3 ol2, rl2;
    to_local_frame(g2, ray2, ol2, rl2);
    Vec3 n2 = gaussian_normal(g2, rl2, ray2.dir);
    CHECK(norm(n2 - rot * n1) < 1e-9);
  }
}

TEST_CASE("render: background pixels and a saturated single hit") {
  Scene scene;
  scene.sh_degree = 1;
  GaussianPrimitive g = make_prim({0, 0, 0}, UnitQuaternion::identity(), {0.05, 0.05, 0.05});
  g.sh[0] = 0.7;
  g.sh[1] = -0.3;
  g.sh[2] = 0.2;
  scene.primitives.push_back(g);
  scene.densify_stats.resize(1);

  Camera cam = test_camera(9);
  RenderOptions opts;
  opts.background = {0.1, 0.2, 0.3};
  RenderOutput out;
  render_gather(scene, cam, opts, out);
  // f at the centre on the zero set, successor deep inside: sigma_hat saturates.
  std::vector<double> f_centers{0.0};
  std::vector<double> f_push(out.pushes.size(), 5.0);
  render_composite(scene, f_centers, f_push, 50.0, opts, out);

  CHECK(out.records[0].hits.empty());
  CHECK(out.alpha.at(0, 0, 0) == 0.0);
  CHECK(out.depth.at(0, 0, 0) == 0.0);
  CHECK(out.rgb.at(0, 0, 0) == doctest::Approx(0.1));

  const RayRecord& rec = out.records[4 * 9 + 4];
  REQUIRE(rec.hits.size() == 1);
  CHECK(rec.hits[0].epsilon > 0.999);
  CHECK(rec.hits[0].sigma_hat == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(out.alpha.at(4, 4, 0) == doctest::Approx(rec.hits[0].weight).epsilon(1e-12));
  Vec3 expect = sh_eval(g.sh, 1, rec.dir);
  double w = rec.hits[0].weight;
  CHECK(out.rgb.at(4, 4, 0) == doctest::Approx(expect.x * w + 0.1 * (1 - w)).epsilon(1e-9));
  CHECK(out.depth.at(4, 4, 0) == doctest::Approx(rec.hits[0].t_star).epsilon(1e-6));
}

TEST_CASE("two hits with sigma (0.6, 0.5) blend to weights (0.6, 0.2)") {
  // Solve Eq.2 backwards for f values realizing the target opacities at k=1.
  double k = 1.0;
  double f1 = 0.0;
  double f2 = inv_phi(0.25 * (1.0 - 0.6), k);
  double f3 = inv_phi(phi_k(f2, k) * (1.0 - 0.5), k);
  CHECK(sdf_to_opacity(f1, f2, k) == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(sdf_to_opacity(f2, f3, k) == doctest::Approx(0.5).epsilon(1e-9));

  Scene scene;
  scene.sh_degree = 1;
  scene.primitives.push_back(make_prim({0, 0, 0}, UnitQuaternion::identity(), {0.4, 0.4, 0.4}));
  scene.primitives.push_back(
      make_prim({0.4, 0.4, 0.4}, UnitQuaternion::identity(), {0.4, 0.4, 0.4}));
  scene.densify_stats.resize(2);

  // Camera on the line through both centres, so both peak contributions are 1.
  double focal = 12.0 / std::tan(deg2rad(16.0));
  Camera cam =
      Camera::look_at({2.0, 2.0, 2.0}, {0, 0, 0}, {0, 0, 1}, 24, 24, focal, focal, 12, 12);
  RenderOptions opts;
  RenderOutput out;
  render_gather(scene, cam, opts, out);
  size_t center_ray = 12 * 24 + 12;
  const RayRecord& rec = out.records[center_ray];
  REQUIRE(rec.hits.size() == 2);
  CHECK(rec.hits[0].gaussian_id == 1);  // nearer the camera
  CHECK(rec.hits[0].epsilon > 0.999999);
  CHECK(rec.hits[1].epsilon > 0.999999);

  std::vector<double> f_centers{f2, f1};  // hit order: gaussian 1 (f1), gaussian 0 (f2)
  std::vector<double> f_push(out.pushes.size(), f3);
  render_composite(scene, f_centers, f_push, k, opts, out);
  const RayRecord& rec2 = out.records[center_ray];
  CHECK(rec2.hits[0].weight == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(rec2.hits[1].weight == doctest::Approx(0.2).epsilon(1e-6));
  CHECK(out.alpha.at(12, 12, 0) == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("hits sorted by depth; alpha bounded; ordering is semantic") {
  Rng rng(9, "sort");
  Scene scene;
  scene.sh_degree = 1;
  for (int i = 0; i < 6; ++i) {
    GaussianPrimitive g =
        make_prim({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)},
                  UnitQuaternion::identity(), {0.25, 0.25, 0.25});
    g.sh[0] = rng.uniform(-0.5, 0.5);
    scene.primitives.push_back(g);
  }
  scene.densify_stats.resize(scene.size());
  SdfNetwork net = SdfNetwork::make({8}, 0, 1);
  net.set_log_k(std::log(5.0));
  Camera cam = test_camera(8);
  RenderOutput out = render(scene, net, cam, {});
  bool found_multi = false;
  for (const RayRecord& rec : out.records) {
    for (size_t i = 1; i < rec.hits.size(); ++i)
      CHECK(rec.hits[i - 1].t_star <= rec.hits[i].t_star);
    CHECK(rec.alpha >= 0.0);
    CHECK(rec.alpha <= 1.0);
    if (rec.hits.size() >= 2 && rec.hits[0].sigma > 1e-6 &&
        std::fabs(rec.hits[0].sigma - rec.hits[1].sigma) > 1e-6) {
      found_multi = true;
      double fwd = 0, bwd = 0, t1 = 1, t2 = 1;
      for (size_t i = 0; i < rec.hits.size(); ++i) {
        fwd += rec.hits[i].sigma * t1 * static_cast<double>(i + 1);
        t1 *= 1 - rec.hits[i].sigma;
      }
      for (size_t i = rec.hits.size(); i-- > 0;) {
        bwd += rec.hits[i].sigma * t2 * static_cast<double>(i + 1);
        t2 *= 1 - rec.hits[i].sigma;
      }
      CHECK(std::fabs(fwd - bwd) > 0.0);
    }
  }
  CHECK(found_multi);
}

TEST_CASE("a gaussian below the contribution cutoff leaves images bit-identical") {
  Scene scene;
  scene.sh_degree = 1;
  scene.primitives.push_back(make_prim({0, 0, 0}, UnitQuaternion::identity(), {0.2, 0.2, 0.2}));
  scene.densify_stats.resize(1);
  SdfNetwork net = SdfNetwork::make({8}, 0, 1);
  Camera cam = test_camera(8);
  RenderOutput a = render(scene, net, cam, {});

  scene.primitives.push_back(
      make_prim({50, 50, 50}, UnitQuaternion::identity(), {0.01, 0.01, 0.01}));
  scene.densify_stats.resize(2);
  RenderOutput b = render(scene, net, cam, {});
  CHECK(a.rgb.data == b.rgb.data);
  CHECK(a.depth.data == b.depth.data);
  CHECK(a.alpha.data == b.alpha.data);
  CHECK(a.normal.data == b.normal.data);
}

namespace {

// Scalar objective over the rendered images with fixed random upstream weights and
// frozen synthetic f values: exercises every geometry path of render_backward.
struct FdHarness {
  Scene scene;
  Camera cam = test_camera(8);
  RenderOptions opts;
  std::vector<double> f_centers;
  double f_push_value = 0.8;
  double k = 2.0;
  Image u_rgb, u_depth, u_alpha, u_normal;

  void init_upstream(uint64_t seed) {
    Rng rng(seed, "upstream");
    u_rgb = Image(cam.width, cam.height, 3);
    u_depth = Image(cam.width, cam.height, 1);
    u_alpha = Image(cam.width, cam.height, 1);
    u_normal = Image(cam.width, cam.height, 3);
    for (auto* im : {&u_rgb, &u_depth, &u_alpha, &u_normal})
      for (double& v : im->data) v = rng.uniform(-1, 1);
  }

  RenderOutput forward() const {
    RenderOutput out;
    render_gather(scene, cam, opts, out);
    std::vector<double> fp(out.pushes.size(), f_push_value);
    render_composite(scene, f_centers, fp, k, opts, out);
    return out;
  }

  double objective(const RenderOutput& out) const {
    double s = 0;
    for (size_t i = 0; i < out.rgb.data.size(); ++i) s += out.rgb.data[i] * u_rgb.data[i];
    for (size_t i = 0; i < out.depth.data.size(); ++i) s += out.depth.data[i] * u_depth.data[i];
    for (size_t i = 0; i < out.alpha.data.size(); ++i) s += out.alpha.data[i] * u_alpha.data[i];
    for (size_t i = 0; i < out.normal.data.size(); ++i)
      s += out.normal.data[i] * u_normal.data[i];
    return s;
  }

  double eval() const { return objective(forward()); }

  RenderBackwardResult backward(const RenderOutput& out) const {
    RenderAdjoints adj;
    adj.d_rgb = u_rgb;
    adj.d_depth = u_depth;
    adj.d_alpha = u_alpha;
    adj.d_normal = u_normal;
    return render_backward(scene, out, adj, k, opts);
  }
};

bool fd_match(double analytic, double fd, double rel = 1e-2, double abs_tol = 1e-7) {
  return std::fabs(analytic - fd) <= rel * std::fmax(std::fabs(analytic), std::fabs(fd)) + abs_tol;
}

}  // namespace

TEST_CASE("render_backward geometry paths match finite differences") {
  FdHarness h;
  h.scene.sh_degree = 1;
  h.opts.background = {0.15, 0.25, 0.35};
  Rng rng(77, "scene");
  for (int i = 0; i < 3; ++i) {
    GaussianPrimitive g = make_prim(
        {rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25)},
        UnitQuaternion(1.0 + 0.3 * rng.normal(), 0.3 * rng.normal(), 0.3 * rng.normal(),
                       0.3 * rng.normal()),
        {0.3, 0.38, 0.45});
    for (double& v : g.sh) v = rng.uniform(-0.25, 0.25);
    h.scene.primitives.push_back(g);
    h.f_centers.push_back(rng.uniform(-0.3, 0.3));
  }
  h.scene.densify_stats.resize(3);
  h.init_upstream(7);

  RenderOutput out = h.forward();
  RenderBackwardResult rb = h.backward(out);

  double hstep = 1e-6;
  int checked = 0;
  for (size_t gi = 0; gi < 3; ++gi) {
    for (int a = 0; a < 3; ++a) {
      Scene saved = h.scene;
      h.scene.primitives[gi].center[a] += hstep;
      double lp = h.eval();
      h.scene.primitives[gi].center[a] -= 2 * hstep;
      double lm = h.eval();
      h.scene = saved;
      CHECK(fd_match(rb.scene.center[gi][a], (lp - lm) / (2 * hstep)));
      checked++;
    }
    for (int a = 0; a < 3; ++a) {
      Scene saved = h.scene;
      h.scene.primitives[gi].log_scale[a] += hstep;
      double lp = h.eval();
      h.scene.primitives[gi].log_scale[a] -= 2 * hstep;
      double lm = h.eval();
      h.scene = saved;
      CHECK(fd_match(rb.scene.log_scale[gi][a], (lp - lm) / (2 * hstep)));
      checked++;
    }
    for (int a = 0; a < 4; ++a) {
      Scene saved = h.scene;
      UnitQuaternion q0 = h.scene.primitives[gi].rotation;
      UnitQuaternion qp = q0, qm = q0;
      double* pc[4] = {&qp.w, &qp.x, &qp.y, &qp.z};
      double* mc[4] = {&qm.w, &qm.x, &qm.y, &qm.z};
      *pc[a] += hstep;
      *mc[a] -= hstep;
      h.scene.primitives[gi].rotation = qp.normalized();
      double lp = h.eval();
      h.scene.primitives[gi].rotation = qm.normalized();
      double lm = h.eval();
      h.scene = saved;
      CHECK(fd_match(rb.scene.rotation[gi][a], (lp - lm) / (2 * hstep)));
      checked++;
    }
    for (size_t si = 0; si < h.scene.primitives[gi].sh.size(); si += 5) {
      Scene saved = h.scene;
      h.scene.primitives[gi].sh[si] += hstep;
      double lp = h.eval();
      h.scene.primitives[gi].sh[si] -= 2 * hstep;
      double lm = h.eval();
      h.scene = saved;
      CHECK(fd_match(rb.scene.sh[gi][si], (lp - lm) / (2 * hstep)));
      checked++;
    }
    {
      double saved = h.f_centers[gi];
      h.f_centers[gi] = saved + hstep;
      double lp = h.eval();
      h.f_centers[gi] = saved - hstep;
      double lm = h.eval();
      h.f_centers[gi] = saved;
      CHECK(fd_match(rb.f_center_bar[gi], (lp - lm) / (2 * hstep)));
      checked++;
    }
  }
  {
    double saved = h.k;
    h.k = saved + hstep;
    double lp = h.eval();
    h.k = saved - hstep;
    double lm = h.eval();
    h.k = saved;
    CHECK(fd_match(rb.scene.k, (lp - lm) / (2 * hstep)));
    checked++;
  }
  CHECK(checked > 40);
}

TEST_CASE("single-gaussian one-pixel derivative wrt center matches FD") {
  FdHarness h;
  h.cam = test_camera(1);
  h.scene.sh_degree = 1;
  GaussianPrimitive g =
      make_prim({0.05, -0.04, 0.06}, UnitQuaternion::identity(), {0.3, 0.3, 0.3});
  g.sh[0] = 0.4;
  h.scene.primitives.push_back(g);
  h.scene.densify_stats.resize(1);
  h.f_centers = {0.1};
  h.init_upstream(3);
  for (auto* im : {&h.u_depth, &h.u_alpha, &h.u_normal})
    for (double& v : im->data) v = 0;
  for (double& v : h.u_rgb.data) v = 0;
  h.u_rgb.data[0] = 1.0;

  RenderOutput out = h.forward();
  RenderBackwardResult rb = h.backward(out);
  double hstep = 1e-6;
  for (int a = 0; a < 3; ++a) {
    Scene saved = h.scene;
    h.scene.primitives[0].center[a] += hstep;
    double lp = h.eval();
    h.scene.primitives[0].center[a] -= 2 * hstep;
    double lm = h.eval();
    h.scene = saved;
    CHECK(fd_match(rb.scene.center[0][a], (lp - lm) / (2 * hstep)));
  }
}

TEST_CASE("render_backward requires retained records") {
  Scene scene;
  scene.sh_degree = 1;
  scene.primitives.push_back(make_prim({0, 0, 0}, UnitQuaternion::identity(), {0.2, 0.2, 0.2}));
  scene.densify_stats.resize(1);
  RenderOutput out;
  RenderAdjoints adj;
  CHECK_THROWS_AS(render_backward(scene, out, adj, 1.0, {}), RuntimeFailure);
}

TEST_CASE("zero upstream gradients give zero parameter gradients") {
  FdHarness h;
  h.scene.sh_degree = 1;
  h.scene.primitives.push_back(
      make_prim({0, 0, 0}, UnitQuaternion::identity(), {0.3, 0.3, 0.3}));
  h.scene.densify_stats.resize(1);
  h.f_centers = {0.05};
  h.init_upstream(5);
  for (auto* im : {&h.u_rgb, &h.u_depth, &h.u_alpha, &h.u_normal})
    for (double& v : im->data) v = 0;
  RenderOutput out = h.forward();
  RenderBackwardResult rb = h.backward(out);
  CHECK(norm(rb.scene.center[0]) == 0.0);
  CHECK(norm(rb.scene.log_scale[0]) == 0.0);
  CHECK(rb.scene.k == 0.0);
  for (double v : rb.f_center_bar) CHECK(v == 0.0);
}

TEST_CASE("grid culling agrees with brute force") {
  Rng rng(21, "grid");
  Scene scene;
  scene.sh_degree = 1;
  for (int i = 0; i < 300; ++i) {
    GaussianPrimitive g =
        make_prim({rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)},
                  UnitQuaternion(rng.normal(), rng.normal(), rng.normal(), rng.normal()),
                  {0.02 + 0.05 * rng.next_double(), 0.02 + 0.05 * rng.next_double(),
                   0.02 + 0.05 * rng.next_double()});
    g.sh[0] = rng.uniform(-0.5, 0.5);
    scene.primitives.push_back(g);
  }
  scene.densify_stats.resize(scene.size());
  SdfNetwork net = SdfNetwork::make({8}, 0, 2);
  Camera cam = test_camera(16);

  RenderOptions brute;
  brute.grid_threshold = 100000;
  RenderOptions grid;
  grid.grid_threshold = 1;  // force the grid path
  RenderOutput a = render(scene, net, cam, brute);
  RenderOutput b = render(scene, net, cam, grid);
  CHECK(a.rgb.data == b.rgb.data);
  CHECK(a.depth.data == b.depth.data);
  CHECK(a.alpha.data == b.alpha.data);
}
