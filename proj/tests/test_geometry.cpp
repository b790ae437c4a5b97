#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "artsurf/errors.hpp"
#include "artsurf/geometry.hpp"
#include "artsurf/rng.hpp"

using namespace artsurf;

namespace {

UnitQuaternion random_unit_quat(Rng& rng) {
  return UnitQuaternion(rng.normal(), rng.normal(), rng.normal(), rng.normal());
}

Vec3 random_unit_vec(Rng& rng) {
  Vec3 v{rng.normal(), rng.normal(), rng.normal()};
  while (norm(v) < 1e-6) v = {rng.normal(), rng.normal(), rng.normal()};
  return normalized(v);
}

double max_abs_diff(const Mat3& a, const Mat3& b) {
  double m = 0;
  for (int i = 0; i < 9; ++i) m = std::fmax(m, std::fabs(a.m[i] - b.m[i]));
  return m;
}

}  // namespace

TEST_CASE("quat_to_matrix identity and quarter turn") {
  Mat3 eye = quat_to_matrix(UnitQuaternion::identity());
  CHECK(max_abs_diff(eye, Mat3::identity()) < 1e-15);

  double h = std::sqrt(2.0) / 2.0;
  Mat3 r = quat_to_matrix(UnitQuaternion(h, 0, 0, h));  // z axis, pi/2
  Vec3 y = r * Vec3{1, 0, 0};
  CHECK(norm(y - Vec3{0, 1, 0}) < 1e-12);
}

TEST_CASE("quat_to_matrix orthonormality on random quaternions") {
  Rng rng(7, "quat");
  for (int i = 0; i < 1000; ++i) {
    Mat3 r = quat_to_matrix(random_unit_quat(rng));
    CHECK(max_abs_diff(r.transposed() * r, Mat3::identity()) < 1e-9);
    CHECK(r.det() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("quat_mul identity, inverse, and matrix-product oracle") {
  Rng rng(11, "quatmul");
  UnitQuaternion q = random_unit_quat(rng);
  UnitQuaternion qi = quat_mul(q, UnitQuaternion::identity());
  CHECK(std::fabs(qi.w - q.w) + std::fabs(qi.x - q.x) + std::fabs(qi.y - q.y) +
            std::fabs(qi.z - q.z) <
        1e-12);

  UnitQuaternion qc = quat_mul(q, q.conjugate());
  CHECK(std::fabs(std::fabs(qc.w) - 1.0) < 1e-12);
  CHECK(std::fabs(qc.x) + std::fabs(qc.y) + std::fabs(qc.z) < 1e-12);

  for (int i = 0; i < 1000; ++i) {
    UnitQuaternion a = random_unit_quat(rng), b = random_unit_quat(rng);
    Mat3 prod = quat_to_matrix(a) * quat_to_matrix(b);
    CHECK(max_abs_diff(quat_to_matrix(quat_mul(a, b)), prod) < 1e-9);
  }
}

TEST_CASE("rodrigues_rotate trivial cases") {
  Vec3 x{0.3, -0.2, 0.9};
  CHECK(norm(rodrigues_rotate(x, {0, 0, 1}, 0.0, {1, 2, 3}) - x) < 1e-15);

  Vec3 y = rodrigues_rotate({1, 0, 0}, {0, 0, 1}, kPi / 2, {0, 0, 0});
  CHECK(norm(y - Vec3{0, 1, 0}) < 1e-12);

  Vec3 z = rodrigues_rotate({2, 0, 0}, {0, 0, 1}, kPi, {1, 0, 0});
  CHECK(norm(z - Vec3{0, 0, 0}) < 1e-12);
}

TEST_CASE("rodrigues matches the quaternion path and preserves pivot distance") {
  Rng rng(13, "rod");
  for (int i = 0; i < 10000; ++i) {
    Vec3 axis = random_unit_vec(rng);
    double theta = rng.uniform(-kPi, kPi);
    Vec3 pivot{rng.normal(), rng.normal(), rng.normal()};
    Vec3 x{rng.normal(), rng.normal(), rng.normal()};
    Vec3 a = rodrigues_rotate(x, axis, theta, pivot);
    Mat3 rq = quat_to_matrix(UnitQuaternion::from_axis_angle(axis, theta));
    Vec3 b = rq * (x - pivot) + pivot;
    CHECK(norm(a - b) < 1e-9);
    CHECK(std::fabs(norm(a - pivot) - norm(x - pivot)) < 1e-9);
  }
}

TEST_CASE("axis-angle round trip") {
  Rng rng(17, "aa");
  for (int i = 0; i < 1000; ++i) {
    Vec3 axis = random_unit_vec(rng);
    double theta = rng.uniform(-kPi + 1e-3, kPi - 1e-3);
    UnitQuaternion q = UnitQuaternion::from_axis_angle(axis, theta);
    Vec3 a;
    double t;
    q.to_axis_angle(a, t);
    if (theta < 0) {  // canonical form flips to positive angles about -axis
      a = -a;
      t = -t;
    }
    CHECK(norm(a - axis) < 1e-9);
    CHECK(t == doctest::Approx(theta).epsilon(1e-9));
  }
}

TEST_CASE("camera_ray principal point maps to the optical axis") {
  Camera cam = Camera::look_at({2, 1, 1.5}, {0, 0, 0}, {0, 0, 1}, 128, 128, 100, 100, 64, 64);
  cam.validate("test");
  Ray r = camera_ray(cam, 64, 64);
  CHECK(norm(r.dir - cam.optical_axis()) < 1e-12);
  CHECK(norm(r.origin - cam.center()) < 1e-12);
}

TEST_CASE("camera_ray hand-computed pinhole back-projection") {
  Camera cam;
  cam.width = 256;
  cam.height = 128;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 64;
  cam.w2c = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  Ray r = camera_ray(cam, 164, 64);
  CHECK(norm(r.dir - normalized(Vec3{1, 0, 1})) < 1e-12);
}

TEST_CASE("camera_ray rejects out-of-bounds pixels") {
  Camera cam = Camera::look_at({2, 0, 0}, {0, 0, 0}, {0, 0, 1}, 64, 64, 80, 80, 32, 32);
  CHECK_THROWS_AS(camera_ray(cam, -1, 10), ValidationError);
  CHECK_THROWS_AS(camera_ray(cam, 10, 64), ValidationError);
}

TEST_CASE("project / camera_ray round trip") {
  Rng rng(23, "cam");
  Camera cam = Camera::look_at({2.5, -1, 2}, {0.1, 0, 0.2}, {0, 0, 1}, 160, 120, 140, 150, 80,
                               60);
  for (int i = 0; i < 200; ++i) {
    double px = rng.uniform(0, 160), py = rng.uniform(0, 120);
    double d = rng.uniform(0.5, 5.0);
    Ray r = camera_ray(cam, px, py);
    double qx, qy;
    REQUIRE(cam.project(r.point_at(d), qx, qy));
    CHECK(qx == doctest::Approx(px).epsilon(1e-6));
    CHECK(qy == doctest::Approx(py).epsilon(1e-6));
  }
}

TEST_CASE("cameras.json round trip and validation") {
  std::vector<Camera> cams;
  for (int i = 0; i < 3; ++i) {
    Camera c = Camera::look_at({2.0 + i, 1, 1}, {0, 0, 0}, {0, 0, 1}, 64, 48, 70, 71, 32, 24);
    c.file = std::to_string(i) + ".png";
    cams.push_back(c);
  }
  std::string path = "/tmp/artsurf_test_cameras.json";
  save_cameras_json(path, cams);
  auto loaded = load_cameras_json(path);
  REQUIRE(loaded.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(loaded[i].file == cams[i].file);
    for (int j = 0; j < 16; ++j)
      CHECK(loaded[i].w2c[j] == doctest::Approx(cams[i].w2c[j]).epsilon(1e-12));
  }

  // Broken rotation rejected with the offending path.
  std::ofstream bad("/tmp/artsurf_bad_cameras.json");
  bad << R"({"views":[{"file":"x.png","width":4,"height":4,"fx":1,"fy":1,"cx":2,"cy":2,)"
      << R"("w2c":[2,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}]})";
  bad.close();
  CHECK_THROWS_WITH_AS(load_cameras_json("/tmp/artsurf_bad_cameras.json"),
                       doctest::Contains("views[0]"), ValidationError);
}
