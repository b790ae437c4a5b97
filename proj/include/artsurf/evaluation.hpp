#pragma once

#include <string>
#include <vector>

#include "artsurf/geometry.hpp"
#include "artsurf/kdtree.hpp"
#include "artsurf/meshing.hpp"

namespace artsurf {

struct MetricReport {
  double cd_ws = 0, cd_rs = 0, f1 = 0, emd = 0;
  size_t n_pred = 0, n_gt = 0;
  double f1_threshold = 0.4;
  uint64_t seed = 0;
};

// Area-weighted uniform surface sampling; deterministic given the seed.
std::vector<Vec3> sample_surface(const TriangleMesh& mesh, size_t n, uint64_t seed);

// Symmetric Chamfer distance x1000: mean over the two directions of the mean
// (squared, by default) nearest-neighbour distance.
double chamfer_ws(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                  bool squared = true);

// First ray-triangle intersections (Moller-Trumbore) of uniformly distributed pixel
// rays from every camera; misses are discarded.
std::vector<Vec3> raycast_sample(const TriangleMesh& mesh, const std::vector<Camera>& cameras,
                                 size_t n_per_view, uint64_t seed);

double chamfer_rs(const TriangleMesh& pred, const TriangleMesh& gt,
                  const std::vector<Camera>& cameras, size_t n_per_view = 2048,
                  uint64_t seed = 0, bool squared = true);

// F1 at a fixed distance threshold: precision over pred, recall over gt.
double f1_score(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                double threshold = 0.4);

// Mean matched distance under an exact minimum-cost perfect matching
// (shortest augmenting path). Requires equal cardinality.
double emd(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt);

struct EvalOptions {
  size_t surface_samples = 100000;
  size_t rays_per_view = 2048;
  double f1_threshold = 0.4;
  size_t emd_samples = 1024;
  bool squared_chamfer = true;
  uint64_t seed = 0;
};

MetricReport evaluate_meshes(const TriangleMesh& pred, const TriangleMesh& gt,
                             const std::vector<Camera>& cameras, const EvalOptions& opts);

void save_metric_report(const std::string& path, const MetricReport& rep);

}  // namespace artsurf
