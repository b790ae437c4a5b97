#pragma once

#include <string>
#include <vector>

#include "artsurf/articulation.hpp"
#include "artsurf/geometry.hpp"
#include "artsurf/image.hpp"
#include "artsurf/meshing.hpp"

namespace artsurf {

enum class FixtureKind { kHingedBox, kDrawer, kLaptop, kTwoDrawer, kStaticSphere };

struct FixtureSpec {
  FixtureKind kind = FixtureKind::kHingedBox;
  int views_per_state = 16;
  int resolution = 128;
  uint64_t seed = 1;
  double angle_deg = 45.0;  // revolute travel from state 0 to state 1
  double travel = 0.3;      // prismatic travel in normalized units

  static FixtureSpec parse_json(const std::string& path);
  void validate() const;
};

// Canonical-state geometry plus ground truth articulation, normalized to a
// unit bounding-box diagonal centered at the origin.
struct FixtureObject {
  TriangleMesh canonical;          // concatenated parts, canonical articulation state
  std::vector<int> face_part;      // per-face part index (0 static, k>=1 dynamic)
  std::vector<Vec3> part_albedo;   // indexed by part
  std::vector<JointModel> joints;  // joints[i] drives part i+1
};

FixtureObject build_fixture_object(const FixtureSpec& spec);

// Mesh posed at state s (dynamic parts deformed with the same articulation math
// the reconstruction uses).
TriangleMesh fixture_mesh_at_state(const FixtureObject& obj, double s);

// Azimuth-uniform camera ring at two elevations (20 and 45 degrees),
// radius 2.5x the object diagonal, look-at the origin.
std::vector<Camera> fixture_camera_ring(int n_views, int resolution);

struct ReferenceRenderOut {
  Image rgb, depth, alpha;  // depth = first-hit ray depth, alpha = hit mask
};

// CPU ray tracer: Lambertian with one directional light plus 0.3 ambient,
// flat per-part albedo.
ReferenceRenderOut reference_render(const TriangleMesh& mesh, const std::vector<int>& face_part,
                                    const std::vector<Vec3>& part_albedo, const Camera& cam,
                                    const Vec3& light_dir);

// Writes state_0/ and state_1/ (PNGs + cameras.json) and gt/ (three meshes,
// joint.json, labels.json).
void generate_fixture(const FixtureSpec& spec, const std::string& out_dir);

Vec3 default_light_dir();

}  // namespace artsurf
