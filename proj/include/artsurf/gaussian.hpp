#pragma once

#include <string>
#include <vector>

#include "artsurf/core.hpp"
#include "artsurf/geometry.hpp"
#include "artsurf/rng.hpp"

namespace artsurf {

// part_label: 0 = static, k >= 1 = dynamic part k.
constexpr int kStaticPart = 0;

struct GaussianPrimitive {
  Vec3 center;
  UnitQuaternion rotation;
  Vec3 log_scale;           // scale = exp(log_scale), componentwise
  std::vector<double> sh;   // 3*(degree+1)^2, coefficient-major: sh[coeff*3 + channel]
  int part_label = kStaticPart;

  Vec3 scale() const {
    return {std::exp(log_scale.x), std::exp(log_scale.y), std::exp(log_scale.z)};
  }
  double max_scale() const {
    Vec3 s = scale();
    return std::fmax(s.x, std::fmax(s.y, s.z));
  }
};

// Per-primitive densification bookkeeping, reset after every densify/prune pass.
struct DensifyStats {
  std::vector<double> grad_accum;  // accumulated ||dL/dcenter||
  std::vector<int> view_count;     // passes in which the primitive was blended
  std::vector<double> max_sigma;   // peak rendered opacity since last reset

  void resize(size_t n) {
    grad_accum.assign(n, 0.0);
    view_count.assign(n, 0);
    max_sigma.assign(n, 0.0);
  }
  size_t size() const { return grad_accum.size(); }
};

struct Scene {
  std::vector<GaussianPrimitive> primitives;
  int sh_degree = 2;
  DensifyStats densify_stats;

  size_t size() const { return primitives.size(); }
  int sh_coeffs() const { return (sh_degree + 1) * (sh_degree + 1); }
  Bounds3 bounds() const;
};

// Local frame of a Gaussian: x_L = S^-1 R^T (x_w - center). In this frame the
// primitive is the unit isotropic Gaussian exp(-0.5 x_L^T x_L).
void to_local_frame(const GaussianPrimitive& g, const Ray& ray, Vec3& o_local, Vec3& r_local);

// Real spherical harmonics basis values for a unit direction, degrees 0..3.
void sh_basis(int degree, const Vec3& dir, double* out);  // out size (degree+1)^2
// Color from SH coefficients: clamp(0.5 + sum_c basis_c * sh[c*3+ch]).
Vec3 sh_eval(const std::vector<double>& sh, int degree, const Vec3& dir);

struct DensifyOptions {
  double grad_threshold = 2e-4;    // mean positional gradient per view
  double split_scale = 0.02;       // world-space scale above which split instead of clone
  double scale_divisor = 1.6;
  double prune_opacity = 0.005;
  size_t max_gaussians = 200000;   // no clone/split above this count
};

struct DensifyReport {
  size_t clones = 0, splits = 0, pruned = 0;
  bool rejected = false;        // prune would have emptied the scene
  std::vector<int> parent;      // old index each surviving/new primitive came from
};

DensifyReport densify_and_prune(Scene& scene, const DensifyOptions& opts);

// Binary little-endian PLY with per-vertex properties
// x,y,z, rot_w,rot_x,rot_y,rot_z, log_scale_0..2, sh_0..sh_{3(D+1)^2-1}, part_label.
void save_gaussians_ply(const std::string& path, const Scene& scene);
Scene load_gaussians_ply(const std::string& path);

}  // namespace artsurf
