#include "artsurf/geometry.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "artsurf/errors.hpp"

namespace artsurf {

using json = nlohmann::json;

UnitQuaternion::UnitQuaternion(double w_, double x_, double y_, double z_) {
  double n = std::sqrt(w_ * w_ + x_ * x_ + y_ * y_ + z_ * z_);
  if (n < 1e-300) {
    w = 1.0;
    x = y = z = 0.0;
    return;
  }
  w = w_ / n;
  x = x_ / n;
  y = y_ / n;
  z = z_ / n;
}

UnitQuaternion UnitQuaternion::raw(double w, double x, double y, double z) {
  UnitQuaternion q;
  q.w = w;
  q.x = x;
  q.y = y;
  q.z = z;
  return q;
}

UnitQuaternion UnitQuaternion::from_axis_angle(const Vec3& axis, double theta) {
  double h = 0.5 * theta;
  double s = std::sin(h);
  return UnitQuaternion(std::cos(h), axis.x * s, axis.y * s, axis.z * s);
}

UnitQuaternion UnitQuaternion::normalized() const { return UnitQuaternion(w, x, y, z); }

void UnitQuaternion::to_axis_angle(Vec3& axis, double& theta) const {
  double vw = w;
  Vec3 v{x, y, z};
  // Map to the hemisphere with w >= 0 so theta lands in (-pi, pi].
  if (vw < 0) {
    vw = -vw;
    v = -v;
  }
  double s = std::sqrt(dot(v, v));
  if (s < 1e-12) {
    axis = {1, 0, 0};
    theta = 0.0;
    return;
  }
  axis = v / s;
  theta = 2.0 * std::atan2(s, vw);
}

Mat3 quat_to_matrix(const UnitQuaternion& q) {
  double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
         2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
  return r;
}

UnitQuaternion quat_mul(const UnitQuaternion& q1, const UnitQuaternion& q2) {
  double w = q1.w * q2.w - q1.x * q2.x - q1.y * q2.y - q1.z * q2.z;
  double x = q1.w * q2.x + q1.x * q2.w + q1.y * q2.z - q1.z * q2.y;
  double y = q1.w * q2.y - q1.x * q2.z + q1.y * q2.w + q1.z * q2.x;
  double z = q1.w * q2.z + q1.x * q2.y - q1.y * q2.x + q1.z * q2.w;
  return UnitQuaternion(w, x, y, z);
}

Mat3 rodrigues_matrix(const Vec3& axis, double theta) {
  Mat3 k = Mat3::skew(axis);
  Mat3 k2 = k * k;
  Mat3 r = Mat3::identity();
  double s = std::sin(theta), c = std::cos(theta);
  for (int i = 0; i < 9; ++i) r.m[i] += s * k.m[i] + (1 - c) * k2.m[i];
  return r;
}

Vec3 rodrigues_rotate(const Vec3& x, const Vec3& axis, double theta, const Vec3& pivot) {
  return rodrigues_matrix(axis, theta) * (x - pivot) + pivot;
}

Mat3 Camera::rotation() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = w2c[i * 4 + j];
  return r;
}

Vec3 Camera::translation() const { return {w2c[3], w2c[7], w2c[11]}; }

Vec3 Camera::center() const {
  // c = -R^T t
  Mat3 r = rotation();
  Vec3 t = translation();
  return -r.tmul(t);
}

Vec3 Camera::optical_axis() const { return rotation().row(2); }

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width,
                       int height, double fx, double fy, double cx, double cy) {
  Vec3 fwd = normalized(target - eye);
  Vec3 right = cross(fwd, up);
  double rn = norm(right);
  if (rn < 1e-9) {
    // Looking along up; pick an arbitrary right vector.
    right = cross(fwd, Vec3{1, 0, 0});
    rn = norm(right);
    if (rn < 1e-9) {
      right = cross(fwd, Vec3{0, 1, 0});
      rn = norm(right);
    }
  }
  right = right / rn;
  Vec3 down = cross(fwd, right);  // +y is down in image space

  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = cx;
  cam.cy = cy;
  Mat3 r;
  for (int j = 0; j < 3; ++j) {
    r(0, j) = right[j];
    r(1, j) = down[j];
    r(2, j) = fwd[j];
  }
  Vec3 t = -(r * eye);
  cam.w2c = {r(0, 0), r(0, 1), r(0, 2), t.x,
             r(1, 0), r(1, 1), r(1, 2), t.y,
             r(2, 0), r(2, 1), r(2, 2), t.z,
             0,       0,       0,       1};
  return cam;
}

Ray Camera::pixel_ray(double px, double py) const {
  if (!(px >= 0 && px < width && py >= 0 && py < height))
    throw ValidationError("pixel (" + std::to_string(px) + ", " + std::to_string(py) +
                          ") out of bounds for " + std::to_string(width) + "x" +
                          std::to_string(height) + " camera");
  Vec3 d_cam{(px - cx) / fx, (py - cy) / fy, 1.0};
  Mat3 r = rotation();
  Ray ray;
  ray.origin = center();
  ray.dir = normalized(r.tmul(d_cam));
  return ray;
}

bool Camera::project(const Vec3& p, double& px, double& py) const {
  Mat3 r = rotation();
  Vec3 pc = r * p + translation();
  if (pc.z <= 1e-12) return false;
  px = fx * pc.x / pc.z + cx;
  py = fy * pc.y / pc.z + cy;
  return true;
}

double Camera::depth_of(const Vec3& p) const {
  Mat3 r = rotation();
  return (r * p + translation()).z;
}

void Camera::validate(const std::string& where) const {
  if (width <= 0 || height <= 0)
    throw ValidationError(where + ": width/height must be positive");
  if (!(fx > 0) || !(fy > 0)) throw ValidationError(where + ": fx and fy must be positive");
  Mat3 r = rotation();
  Mat3 rtr = r.transposed() * r;
  Mat3 eye = Mat3::identity();
  for (int i = 0; i < 9; ++i)
    if (std::fabs(rtr.m[i] - eye.m[i]) > 1e-6)
      throw ValidationError(where + ".w2c: upper-left 3x3 is not a rotation (R^T R != I)");
  if (std::fabs(r.det() - 1.0) > 1e-6)
    throw ValidationError(where + ".w2c: rotation determinant is not +1");
  if (std::fabs(w2c[12]) > 1e-12 || std::fabs(w2c[13]) > 1e-12 || std::fabs(w2c[14]) > 1e-12 ||
      std::fabs(w2c[15] - 1.0) > 1e-12)
    throw ValidationError(where + ".w2c: last row must be [0,0,0,1]");
}

Ray camera_ray(const Camera& cam, double px, double py) { return cam.pixel_ray(px, py); }

namespace {

double require_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ValidationError(path + ": expected a number");
  return j.get<double>();
}

}  // namespace

std::vector<Camera> load_cameras_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open cameras file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": JSON parse error: " + std::string(e.what()));
  }
  if (!j.is_object() || !j.contains("views") || !j["views"].is_array())
    throw ValidationError(path + ": expected top-level object with \"views\" array");
  std::vector<Camera> cams;
  int idx = 0;
  for (const auto& v : j["views"]) {
    std::string where = path + ": views[" + std::to_string(idx) + "]";
    if (!v.is_object()) throw ValidationError(where + ": expected an object");
    Camera c;
    if (v.contains("file")) c.file = v["file"].get<std::string>();
    for (const char* key : {"width", "height", "fx", "fy", "cx", "cy"})
      if (!v.contains(key)) throw ValidationError(where + "." + key + ": missing");
    c.width = static_cast<int>(require_number(v["width"], where + ".width"));
    c.height = static_cast<int>(require_number(v["height"], where + ".height"));
    c.fx = require_number(v["fx"], where + ".fx");
    c.fy = require_number(v["fy"], where + ".fy");
    c.cx = require_number(v["cx"], where + ".cx");
    c.cy = require_number(v["cy"], where + ".cy");
    if (!v.contains("w2c") || !v["w2c"].is_array() || v["w2c"].size() != 16)
      throw ValidationError(where + ".w2c: expected array of 16 row-major floats");
    for (int i = 0; i < 16; ++i) c.w2c[i] = require_number(v["w2c"][i], where + ".w2c");
    c.validate(where);
    cams.push_back(c);
    idx++;
  }
  return cams;
}

void save_cameras_json(const std::string& path, const std::vector<Camera>& cams) {
  json views = json::array();
  for (const auto& c : cams) {
    json v;
    v["file"] = c.file;
    v["width"] = c.width;
    v["height"] = c.height;
    v["fx"] = c.fx;
    v["fy"] = c.fy;
    v["cx"] = c.cx;
    v["cy"] = c.cy;
    v["w2c"] = c.w2c;
    views.push_back(v);
  }
  json j;
  j["views"] = views;
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << j.dump(1) << "\n";
}

}  // namespace artsurf
