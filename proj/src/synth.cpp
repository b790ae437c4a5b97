#include "artsurf/synth.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "artsurf/errors.hpp"
#include "artsurf/parallel.hpp"

namespace artsurf {

namespace fs = std::filesystem;
using json = nlohmann::json;

void FixtureSpec::validate() const {
  if (views_per_state < 2) throw ValidationError("fixture spec: views must be >= 2");
  if (resolution < 16 || resolution > 2048)
    throw ValidationError("fixture spec: resolution must lie in [16, 2048]");
  double a = deg2rad(std::fabs(angle_deg));
  if (a >= kPi) throw ValidationError("fixture spec: |angle_deg| must be < 180");
  if (travel <= 0 || travel >= 1.0)
    throw ValidationError("fixture spec: travel must lie in (0, 1) normalized units");
}

FixtureSpec FixtureSpec::parse_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open fixture spec: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": JSON parse error: " + std::string(e.what()));
  }
  FixtureSpec spec;
  std::string kind = j.value("kind", "");
  if (kind == "hinged_box") spec.kind = FixtureKind::kHingedBox;
  else if (kind == "drawer") spec.kind = FixtureKind::kDrawer;
  else if (kind == "laptop") spec.kind = FixtureKind::kLaptop;
  else if (kind == "two_drawer") spec.kind = FixtureKind::kTwoDrawer;
  else if (kind == "static_sphere") spec.kind = FixtureKind::kStaticSphere;
  else
    throw ValidationError(path + ".kind: expected one of hinged_box, drawer, laptop, "
                          "two_drawer, static_sphere");
  spec.views_per_state = j.value("views", 16);
  spec.resolution = j.value("resolution", 128);
  spec.seed = j.value("seed", 1ull);
  spec.angle_deg = j.value("angle_deg", 45.0);
  spec.travel = j.value("travel", 0.3);
  spec.validate();
  return spec;
}

namespace {

void append_box(TriangleMesh& mesh, std::vector<int>& face_part, int part, const Vec3& center,
                const Vec3& half) {
  int base = static_cast<int>(mesh.vertices.size());
  for (int i = 0; i < 8; ++i) {
    Vec3 corner{(i & 1) ? half.x : -half.x, (i & 2) ? half.y : -half.y,
                (i & 4) ? half.z : -half.z};
    mesh.vertices.push_back(center + corner);
  }
  // 12 triangles, outward winding (CCW seen from outside).
  const int f[12][3] = {{0, 2, 1}, {1, 2, 3},   // z-
                        {4, 5, 6}, {5, 7, 6},   // z+
                        {0, 1, 4}, {1, 5, 4},   // y-
                        {2, 6, 3}, {3, 6, 7},   // y+
                        {0, 4, 2}, {2, 4, 6},   // x-
                        {1, 3, 5}, {3, 7, 5}};  // x+
  for (const auto& tri : f) {
    mesh.faces.push_back({base + tri[0], base + tri[1], base + tri[2]});
    face_part.push_back(part);
  }
}

void append_uv_sphere(TriangleMesh& mesh, std::vector<int>& face_part, int part,
                      const Vec3& center, double radius, int n_lat, int n_lon) {
  int base = static_cast<int>(mesh.vertices.size());
  mesh.vertices.push_back(center + Vec3{0, 0, radius});   // north pole
  for (int i = 1; i < n_lat; ++i) {
    double phi = kPi * i / n_lat;
    for (int j = 0; j < n_lon; ++j) {
      double th = 2 * kPi * j / n_lon;
      mesh.vertices.push_back(center + Vec3{radius * std::sin(phi) * std::cos(th),
                                            radius * std::sin(phi) * std::sin(th),
                                            radius * std::cos(phi)});
    }
  }
  mesh.vertices.push_back(center + Vec3{0, 0, -radius});  // south pole
  int south = static_cast<int>(mesh.vertices.size()) - 1;
  auto ring = [&](int i, int j) { return base + 1 + (i - 1) * n_lon + (j % n_lon); };
  for (int j = 0; j < n_lon; ++j) {
    mesh.faces.push_back({base, ring(1, j), ring(1, j + 1)});
    face_part.push_back(part);
  }
  for (int i = 1; i + 1 < n_lat; ++i)
    for (int j = 0; j < n_lon; ++j) {
      mesh.faces.push_back({ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)});
      mesh.faces.push_back({ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)});
      face_part.push_back(part);
      face_part.push_back(part);
    }
  for (int j = 0; j < n_lon; ++j) {
    mesh.faces.push_back({south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)});
    face_part.push_back(part);
  }
}

// Rotates vertices of the given part about an axis through a pivot.
void rotate_part(TriangleMesh& mesh, const std::vector<int>& face_part, int part,
                 const Vec3& axis, double angle, const Vec3& pivot) {
  std::vector<char> touch(mesh.vertices.size(), 0);
  for (size_t f = 0; f < mesh.faces.size(); ++f)
    if (face_part[f] == part)
      for (int k = 0; k < 3; ++k) touch[mesh.faces[f][k]] = 1;
  for (size_t v = 0; v < mesh.vertices.size(); ++v)
    if (touch[v]) mesh.vertices[v] = rodrigues_rotate(mesh.vertices[v], axis, angle, pivot);
}

// Five-slab open-front cabinet (opening toward +x).
void append_cabinet(TriangleMesh& mesh, std::vector<int>& face_part, const Vec3& half,
                    double wall) {
  append_box(mesh, face_part, 0, {-half.x + wall / 2, 0, 0}, {wall / 2, half.y, half.z});  // back
  append_box(mesh, face_part, 0, {wall / 2, -half.y + wall / 2, 0},
             {half.x - wall / 2, wall / 2, half.z});  // left
  append_box(mesh, face_part, 0, {wall / 2, half.y - wall / 2, 0},
             {half.x - wall / 2, wall / 2, half.z});  // right
  append_box(mesh, face_part, 0, {wall / 2, 0, -half.z + wall / 2},
             {half.x - wall / 2, half.y - wall, wall / 2});  // bottom
  append_box(mesh, face_part, 0, {wall / 2, 0, half.z - wall / 2},
             {half.x - wall / 2, half.y - wall, wall / 2});  // top
}

}  // namespace

Vec3 default_light_dir() { return normalized(Vec3{0.35, 0.25, 0.9}); }

FixtureObject build_fixture_object(const FixtureSpec& spec) {
  spec.validate();
  FixtureObject obj;
  double travel_angle = deg2rad(spec.angle_deg);

  switch (spec.kind) {
    case FixtureKind::kHingedBox: {
      append_box(obj.canonical, obj.face_part, 0, {0, 0, 0}, {0.32, 0.22, 0.12});
      // Lid resting flat on the base top, hinged along y at the back edge.
      append_box(obj.canonical, obj.face_part, 1, {0.02, 0, 0.145}, {0.34, 0.24, 0.025});
      Vec3 hinge_axis{0, -1, 0};  // positive rotation opens upward
      Vec3 hinge_pivot{-0.32, 0, 0.12};
      double open0 = deg2rad(20.0);
      double canonical_angle = open0 + 0.5 * travel_angle;
      rotate_part(obj.canonical, obj.face_part, 1, hinge_axis, canonical_angle, hinge_pivot);
      JointModel j;
      j.kind = JointKind::kRevolute;
      j.pivot = hinge_pivot;
      j.set_axis_angle(hinge_axis, -0.5 * travel_angle);
      obj.joints.push_back(j);
      obj.part_albedo = {{0.25, 0.45, 0.8}, {0.9, 0.5, 0.15}};
      break;
    }
    case FixtureKind::kLaptop: {
      append_box(obj.canonical, obj.face_part, 0, {0, 0, 0}, {0.30, 0.22, 0.03});
      append_box(obj.canonical, obj.face_part, 1, {0.0, 0, 0.05}, {0.30, 0.22, 0.02});
      Vec3 hinge_axis{0, -1, 0};
      Vec3 hinge_pivot{-0.30, 0, 0.04};
      double open0 = deg2rad(50.0);
      double canonical_angle = open0 + 0.5 * travel_angle;
      rotate_part(obj.canonical, obj.face_part, 1, hinge_axis, canonical_angle, hinge_pivot);
      JointModel j;
      j.kind = JointKind::kRevolute;
      j.pivot = hinge_pivot;
      j.set_axis_angle(hinge_axis, -0.5 * travel_angle);
      obj.joints.push_back(j);
      obj.part_albedo = {{0.4, 0.4, 0.45}, {0.8, 0.3, 0.3}};
      break;
    }
    case FixtureKind::kDrawer: {
      append_cabinet(obj.canonical, obj.face_part, {0.28, 0.24, 0.2}, 0.05);
      append_box(obj.canonical, obj.face_part, 1, {0.04, 0, 0}, {0.26, 0.17, 0.13});
      JointModel j;
      j.kind = JointKind::kPrismatic;
      j.direction = {1, 0, 0};
      j.distance = spec.travel;  // set after normalization scale below (diag handled there)
      obj.joints.push_back(j);
      obj.part_albedo = {{0.3, 0.55, 0.35}, {0.85, 0.65, 0.2}};
      break;
    }
    case FixtureKind::kTwoDrawer: {
      append_cabinet(obj.canonical, obj.face_part, {0.28, 0.24, 0.3}, 0.05);
      append_box(obj.canonical, obj.face_part, 0, {0.025, 0, 0}, {0.255, 0.19, 0.02});  // shelf
      append_box(obj.canonical, obj.face_part, 1, {0.04, 0, 0.14}, {0.26, 0.17, 0.1});
      append_box(obj.canonical, obj.face_part, 2, {0.04, 0, -0.14}, {0.26, 0.17, 0.1});
      JointModel j1;
      j1.kind = JointKind::kPrismatic;
      j1.direction = {1, 0, 0};
      j1.distance = spec.travel;
      JointModel j2 = j1;
      j2.distance = spec.travel * 0.5;
      obj.joints.push_back(j1);
      obj.joints.push_back(j2);
      obj.part_albedo = {{0.3, 0.45, 0.6}, {0.85, 0.65, 0.2}, {0.7, 0.3, 0.5}};
      break;
    }
    case FixtureKind::kStaticSphere: {
      append_uv_sphere(obj.canonical, obj.face_part, 0, {0, 0, 0}, 0.4, 16, 24);
      obj.part_albedo = {{0.75, 0.35, 0.3}};
      break;
    }
  }

  // Normalize to a unit bounding-box diagonal centered at the origin; joints are
  // expressed in the normalized frame (prismatic distances were given there already).
  Bounds3 b = obj.canonical.bounds();
  double scale = 1.0 / std::fmax(b.diagonal(), 1e-9);
  Vec3 shift = b.center();
  for (Vec3& v : obj.canonical.vertices) v = (v - shift) * scale;
  for (JointModel& j : obj.joints)
    if (j.kind == JointKind::kRevolute) j.pivot = (j.pivot - shift) * scale;

  // Flat per-part vertex colors for the GT PLYs.
  obj.canonical.colors.assign(obj.canonical.vertices.size(), Vec3{0.5, 0.5, 0.5});
  for (size_t f = 0; f < obj.canonical.faces.size(); ++f)
    for (int k = 0; k < 3; ++k)
      obj.canonical.colors[obj.canonical.faces[f][k]] = obj.part_albedo[obj.face_part[f]];
  return obj;
}

TriangleMesh fixture_mesh_at_state(const FixtureObject& obj, double s) {
  TriangleMesh mesh = obj.canonical;
  std::vector<int> vpart(mesh.vertices.size(), 0);
  for (size_t f = 0; f < mesh.faces.size(); ++f)
    if (obj.face_part[f] > 0)
      for (int k = 0; k < 3; ++k) vpart[mesh.faces[f][k]] = obj.face_part[f];
  for (size_t v = 0; v < mesh.vertices.size(); ++v)
    if (vpart[v] > 0) mesh.vertices[v] = deform_point(mesh.vertices[v], obj.joints[vpart[v] - 1], s);
  return mesh;
}

std::vector<Camera> fixture_camera_ring(int n_views, int resolution) {
  std::vector<Camera> cams;
  double focal = 0.5 * resolution / std::tan(deg2rad(14.0));
  double c = resolution / 2.0;
  const double elevations[2] = {deg2rad(20.0), deg2rad(45.0)};
  int per_ring = (n_views + 1) / 2;
  for (int i = 0; i < n_views; ++i) {
    int ring = i % 2;
    int k = i / 2;
    double az = 2 * kPi * k / per_ring + (ring ? kPi / per_ring : 0.0);
    double el = elevations[ring];
    Vec3 eye{2.5 * std::cos(el) * std::cos(az), 2.5 * std::cos(el) * std::sin(az),
             2.5 * std::sin(el)};
    Camera cam = Camera::look_at(eye, {0, 0, 0}, {0, 0, 1}, resolution, resolution, focal,
                                 focal, c, c);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d.png", i);
    cam.file = buf;
    cams.push_back(cam);
  }
  return cams;
}

ReferenceRenderOut reference_render(const TriangleMesh& mesh, const std::vector<int>& face_part,
                                    const std::vector<Vec3>& part_albedo, const Camera& cam,
                                    const Vec3& light_dir) {
  ReferenceRenderOut out;
  out.rgb = Image(cam.width, cam.height, 3);
  out.depth = Image(cam.width, cam.height, 1);
  out.alpha = Image(cam.width, cam.height, 1);
  Mat3 rot = cam.rotation();
  Vec3 origin = cam.center();

  // Per-face normals for flat shading.
  std::vector<Vec3> fnormal(mesh.faces.size());
  for (size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    Vec3 n = cross(mesh.vertices[face[1]] - mesh.vertices[face[0]],
                   mesh.vertices[face[2]] - mesh.vertices[face[0]]);
    double l = norm(n);
    fnormal[f] = l > 1e-15 ? n / l : Vec3{0, 0, 1};
  }

  parallel_for(static_cast<size_t>(cam.height), [&](size_t y) {
    for (int x = 0; x < cam.width; ++x) {
      Vec3 d_cam{(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0};
      Vec3 dir = normalized(rot.tmul(d_cam));
      double best = std::numeric_limits<double>::infinity();
      size_t best_f = 0;
      for (size_t f = 0; f < mesh.faces.size(); ++f) {
        const auto& face = mesh.faces[f];
        const Vec3& v0 = mesh.vertices[face[0]];
        Vec3 e1 = mesh.vertices[face[1]] - v0;
        Vec3 e2 = mesh.vertices[face[2]] - v0;
        Vec3 p = cross(dir, e2);
        double det = dot(e1, p);
        if (std::fabs(det) < 1e-14) continue;
        double inv = 1.0 / det;
        Vec3 tv = origin - v0;
        double u = dot(tv, p) * inv;
        if (u < 0 || u > 1) continue;
        Vec3 q = cross(tv, e1);
        double v = dot(dir, q) * inv;
        if (v < 0 || u + v > 1) continue;
        double t = dot(e2, q) * inv;
        if (t > 1e-9 && t < best) {
          best = t;
          best_f = f;
        }
      }
      int yy = static_cast<int>(y);
      if (!std::isfinite(best)) continue;  // background stays black, depth/alpha 0
      Vec3 n = fnormal[best_f];
      if (dot(n, dir) > 0) n = -n;  // double-sided
      double shade = 0.3 + 0.7 * std::fmax(0.0, dot(n, light_dir));
      Vec3 albedo = part_albedo[face_part[best_f]];
      for (int ch = 0; ch < 3; ++ch) out.rgb.at(x, yy, ch) = clampd(albedo[ch] * shade, 0, 1);
      out.depth.at(x, yy, 0) = best;
      out.alpha.at(x, yy, 0) = 1.0;
    }
  });
  return out;
}

void generate_fixture(const FixtureSpec& spec, const std::string& out_dir) {
  spec.validate();
  FixtureObject obj = build_fixture_object(spec);
  std::vector<Camera> cams = fixture_camera_ring(spec.views_per_state, spec.resolution);

  fs::create_directories(fs::path(out_dir) / "state_0");
  fs::create_directories(fs::path(out_dir) / "state_1");
  fs::create_directories(fs::path(out_dir) / "gt");

  for (int state = 0; state < 2; ++state) {
    TriangleMesh mesh = fixture_mesh_at_state(obj, static_cast<double>(state));
    std::string sdir = (fs::path(out_dir) / ("state_" + std::to_string(state))).string();
    save_cameras_json(sdir + "/cameras.json", cams);
    parallel_for(cams.size(), [&](size_t i) {
      ReferenceRenderOut r =
          reference_render(mesh, obj.face_part, obj.part_albedo, cams[i], default_light_dir());
      save_png(sdir + "/" + cams[i].file, r.rgb);
    });
  }

  save_mesh_ply((fs::path(out_dir) / "gt" / "mesh_s0.ply").string(),
                fixture_mesh_at_state(obj, 0.0));
  save_mesh_ply((fs::path(out_dir) / "gt" / "mesh_s0.5.ply").string(),
                fixture_mesh_at_state(obj, 0.5));
  save_mesh_ply((fs::path(out_dir) / "gt" / "mesh_s1.ply").string(),
                fixture_mesh_at_state(obj, 1.0));
  save_joints_json((fs::path(out_dir) / "gt" / "joint.json").string(), obj.joints);
  json labels = obj.face_part;
  std::ofstream lf((fs::path(out_dir) / "gt" / "labels.json").string());
  lf << labels.dump() << "\n";
}

}  // namespace artsurf
