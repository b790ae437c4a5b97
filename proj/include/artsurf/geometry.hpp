#pragma once

#include <string>
#include <vector>

#include "artsurf/core.hpp"

namespace artsurf {

// Hamilton convention, scalar-first, right-handed. An axis-angle rotation of
// theta about unit axis a is (cos(theta/2), a*sin(theta/2)).
struct UnitQuaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  UnitQuaternion() = default;
  UnitQuaternion(double w_, double x_, double y_, double z_);

  static UnitQuaternion identity() { return {}; }
  static UnitQuaternion from_axis_angle(const Vec3& axis, double theta);
  // Raw components without renormalization (internal use where norm is known).
  static UnitQuaternion raw(double w, double x, double y, double z);

  UnitQuaternion conjugate() const { return raw(w, -x, -y, -z); }
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  UnitQuaternion normalized() const;

  // Decompose into rotation axis and angle in (-pi, pi].
  void to_axis_angle(Vec3& axis, double& theta) const;
};

Mat3 quat_to_matrix(const UnitQuaternion& q);
UnitQuaternion quat_mul(const UnitQuaternion& q1, const UnitQuaternion& q2);

// Rotation of x by theta about the axis a through pivot o_r (Rodrigues form:
// (I + sin(t) K + (1-cos(t)) K^2)(x - o_r) + o_r).
Vec3 rodrigues_rotate(const Vec3& x, const Vec3& axis, double theta, const Vec3& pivot);
Mat3 rodrigues_matrix(const Vec3& axis, double theta);

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit norm

  Vec3 point_at(double t) const { return origin + dir * t; }
};

// Pinhole camera, OpenCV-style: +z forward, +x right, +y down in camera frame.
// world_to_camera is a 4x4 rigid transform stored row-major.
struct Camera {
  int width = 0, height = 0;
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::array<double, 16> w2c{};
  std::string file;  // image filename this view was loaded with, if any

  Mat3 rotation() const;           // world->camera 3x3
  Vec3 translation() const;        // world->camera t
  Vec3 center() const;             // camera center in world space
  Vec3 optical_axis() const;       // forward direction in world space

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width,
                        int height, double fx, double fy, double cx, double cy);

  // Continuous pixel coordinates; (cx, cy) maps to the optical axis.
  Ray pixel_ray(double px, double py) const;
  // Projects a world point; returns false when behind the camera.
  bool project(const Vec3& p, double& px, double& py) const;
  // Depth along the optical axis (camera-frame z) of a world point.
  double depth_of(const Vec3& p) const;

  void validate(const std::string& where) const;
};

Ray camera_ray(const Camera& cam, double px, double py);

// cameras.json: {"views":[{"file":..., "width":..., "height":..., "fx":..., "fy":...,
//                          "cx":..., "cy":..., "w2c":[16 row-major floats]}]}
std::vector<Camera> load_cameras_json(const std::string& path);
void save_cameras_json(const std::string& path, const std::vector<Camera>& cams);

}  // namespace artsurf
