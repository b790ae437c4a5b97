#pragma once

#include <functional>
#include <vector>

#include "artsurf/gaussian.hpp"
#include "artsurf/geometry.hpp"
#include "artsurf/image.hpp"
#include "artsurf/sdf.hpp"

namespace artsurf {

// One Gaussian's contribution along a ray, at its peak depth t*.
struct RayHit {
  int gaussian_id = -1;
  double t_star = 0;     // clamped to [t_near, inf)
  double epsilon = 0;    // exp(-0.5 |o_L + t* r_L|^2), peak contribution
  double sigma_hat = 0;  // SDF-derived opacity of the center
  double sigma = 0;      // sigma_hat * epsilon (clamped below 1)
  double weight = 0;     // blend weight sigma_i * prod_{j<i}(1 - sigma_j); 0 if never blended
  Vec3 o_local, r_local;
  double f_center = 0;   // SDF value at the Gaussian's (canonical) center
  double f_next = 0;     // successor SDF value used in sdf_to_opacity
  int next_gaussian = -1;  // id providing f_next, or -1 when it came from the push point
  Vec3 normal;             // camera-facing world normal (zero if degenerate)
};

struct RayRecord {
  Vec3 origin, dir;
  std::vector<RayHit> hits;  // ascending (t_star, id); truncated at early termination
  double alpha = 0;
  double depth = 0;
};

// f_next of the geometrically last hit on a ray comes from pushing that hit's center
// one local standard deviation forward along the ray.
struct PushQuery {
  int ray = -1;
  int gaussian_id = -1;
  Vec3 world_point;  // center + dir / |r_local|
  Vec3 r_local;
  Vec3 dir;
};

struct RenderOptions {
  Vec3 background{0, 0, 0};
  double epsilon_cutoff = std::exp(-4.5);  // 3-sigma contribution cull
  double t_near = 1e-4;
  double early_stop_transmittance = 1e-4;
  double sigma_max = 0.999;
  OpacityActivation activation = OpacityActivation::kBell;
  int grid_threshold = 5000;  // brute force below, AABB grid above
  int tile = 16;
};

struct RenderOutput {
  Image rgb;     // 3 channels
  Image depth;   // 1 channel, blend-weighted mean of t*
  Image alpha;   // 1 channel
  Image normal;  // 3 channels, blend-weighted sum of unit normals
  std::vector<RayRecord> records;   // one per pixel, row-major
  std::vector<PushQuery> pushes;    // ray-ordered
  int width = 0, height = 0;
};

// Geometry-only pass: gathers sorted hits and the push queries. f values and
// compositing are applied afterwards so the SDF can be evaluated in one batch.
void render_gather(const Scene& scene, const Camera& cam, const RenderOptions& opts,
                   RenderOutput& out);

// Fills sigma/weights and composites the images. f_centers is indexed by gaussian id;
// f_push by push query index.
void render_composite(const Scene& scene, const std::vector<double>& f_centers,
                      const std::vector<double>& f_push, double k, const RenderOptions& opts,
                      RenderOutput& out);

// Convenience: full forward pass with the SDF evaluated at world-space centers
// (static scene; articulated rendering goes through the training orchestrator).
RenderOutput render(const Scene& scene, const SdfNetwork& sdf, const Camera& cam,
                    const RenderOptions& opts = {});

// Upstream gradients for the backward pass. Image adjoints may be empty (treated
// as zero); hit_extras, when present, is indexed like records ([ray][hit]).
struct HitExtra {
  double d_w = 0, d_t = 0;
  Vec3 d_n{0, 0, 0};
};
using HitExtras = std::vector<std::vector<HitExtra>>;

struct RenderAdjoints {
  Image d_rgb, d_depth, d_alpha, d_normal;
  const HitExtras* hit_extras = nullptr;
};

// Gradients with respect to the posed scene parameters plus the scalar f inputs.
struct SceneGrads {
  std::vector<Vec3> center;
  std::vector<std::array<double, 4>> rotation;  // tangent-projected quaternion grads
  std::vector<Vec3> log_scale;
  std::vector<std::vector<double>> sh;
  double k = 0;

  void init(const Scene& scene);
  void add_scaled(const SceneGrads& o, double s);
  double squared_norm() const;
  void scale(double s);
};

struct RenderBackwardResult {
  SceneGrads scene;
  std::vector<double> f_center_bar;  // dL/df(center_i), per gaussian
  std::vector<double> f_push_bar;    // dL/df(push point), per push query
};

RenderBackwardResult render_backward(const Scene& scene, const RenderOutput& out,
                                     const RenderAdjoints& adj, double k,
                                     const RenderOptions& opts);

// Position chain of the push-point f evaluations: delta_grads[i] is dL/d(dir/|r_local|)
// for push i (already pulled back to the posed frame by the caller). Adds the induced
// rotation/scale gradients through |r_local|.
void render_backward_push_delta(const Scene& scene, const RenderOutput& out,
                                const std::vector<Vec3>& delta_grads, SceneGrads& grads);

// --- articulated rendering ------------------------------------------------------

struct JointModel;  // articulation.hpp

// Applies each part's deformation (and quaternion alignment) at state s.
// joints[i] drives part label i+1; label 0 is static.
Scene pose_scene(const Scene& canonical, const std::vector<JointModel>& joints, double s);

// Canonical-space pullback of a push query's world point: the SDF lives in the
// canonical frame, so f_next is evaluated at x_canon + R(-theta_s) * delta.
Vec3 push_point_canonical(const Scene& canonical, const std::vector<JointModel>& joints,
                          double s, const PushQuery& pq);

// Forward render of the posed scene with the SDF evaluated at canonical centers.
RenderOutput render_articulated(const Scene& canonical, const SdfNetwork& sdf,
                                const std::vector<JointModel>& joints, double s,
                                const Camera& cam, const RenderOptions& opts = {});

// Peak depth of the local-frame quadratic, clamped to [t_near, inf).
double peak_depth(const Vec3& o_local, const Vec3& r_local, double t_near = 1e-4);
// Peak contribution epsilon at the (clamped) peak depth.
double contribution(const Vec3& o_local, const Vec3& r_local, double t_near = 1e-4);
// GOF-style Gaussian normal: normalize(-(R S^-1) r_local), flipped to face the camera.
Vec3 gaussian_normal(const GaussianPrimitive& g, const Vec3& r_local, const Vec3& ray_dir);

// Updates densification bookkeeping from one backward pass: accumulates center-gradient
// norms and peak blended opacity for every primitive that appeared in a record.
void accumulate_densify_stats(const RenderOutput& out, const SceneGrads& grads, Scene& scene);

}  // namespace artsurf
