#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "artsurf/articulation.hpp"
#include "artsurf/gaussian.hpp"
#include "artsurf/geometry.hpp"
#include "artsurf/image.hpp"
#include "artsurf/renderer.hpp"
#include "artsurf/sdf.hpp"

namespace artsurf {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> colors;  // per-vertex rgb in [0,1]; may be empty

  bool empty() const { return faces.empty(); }
  Bounds3 bounds() const;
  double area() const;
  // Area-weighted per-vertex normals.
  std::vector<Vec3> vertex_normals() const;
  void transform(const Mat3& rot, const Vec3& trans);
};

void save_mesh_ply(const std::string& path, const TriangleMesh& mesh);
TriangleMesh load_mesh_ply(const std::string& path);

// Sparse voxel-block grid of truncated signed distances (8^3 blocks).
class TsdfVolume {
 public:
  TsdfVolume(double voxel_size, double truncation);

  double voxel_size() const { return voxel_size_; }
  double truncation() const { return truncation_; }
  size_t block_count() const { return blocks_.size(); }
  size_t observed_voxels() const;

  // Projective TSDF update from one rendered view. depth stores ray depth
  // (distance along the unit pixel ray); pixels gate on alpha > 0.5.
  void integrate(const Image& depth, const Image& rgb, const Image& alpha, const Camera& cam);

  TriangleMesh extract_mesh() const;  // marching cubes over observed voxels

  struct Voxel {
    float tsdf = 0;    // normalized to [-1, 1]
    float weight = 0;
    float r = 0, g = 0, b = 0;
  };
  static constexpr int kBlock = 8;

  const Voxel* find_voxel(int gx, int gy, int gz) const;

 private:
  using BlockKey = std::array<int, 3>;
  double voxel_size_, truncation_;
  std::map<BlockKey, std::vector<Voxel>> blocks_;  // ordered: deterministic iteration

  Voxel& voxel(int gx, int gy, int gz);
};

// Vertex colors from the 8 nearest Gaussians, weighted by exp(-0.5 Mahalanobis^2),
// SH evaluated along the vertex outward normal; mid-gray fallback.
void assign_vertex_colors(TriangleMesh& mesh, const Scene& scene);

struct ExtractOptions {
  double voxel_size = 0;      // <= 0: scene-bound diagonal / 256
  double trunc_voxels = 4.0;  // truncation = trunc_voxels * voxel_size
  RenderOptions render;
};

// Full pipeline: pose the scene at state s, render depth/rgb/alpha from every
// camera, TSDF-fuse, run marching cubes and colorize. Warns (with volume
// statistics) when the result is empty.
TriangleMesh extract_textured_mesh(const Scene& scene, const SdfNetwork& sdf,
                                   const std::vector<JointModel>& joints, double s,
                                   const std::vector<Camera>& cameras,
                                   const ExtractOptions& opts);

}  // namespace artsurf
