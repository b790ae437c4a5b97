#include "artsurf/meshing.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_map>

#include "artsurf/errors.hpp"
#include "artsurf/kdtree.hpp"
#include "artsurf/parallel.hpp"
#include "mc_tables.hpp"

namespace artsurf {

Bounds3 TriangleMesh::bounds() const {
  Bounds3 b;
  for (const Vec3& v : vertices) b.expand(v);
  return b;
}

double TriangleMesh::area() const {
  double a = 0;
  for (const auto& f : faces)
    a += 0.5 * norm(cross(vertices[f[1]] - vertices[f[0]], vertices[f[2]] - vertices[f[0]]));
  return a;
}

std::vector<Vec3> TriangleMesh::vertex_normals() const {
  std::vector<Vec3> n(vertices.size(), Vec3{});
  for (const auto& f : faces) {
    Vec3 fn = cross(vertices[f[1]] - vertices[f[0]], vertices[f[2]] - vertices[f[0]]);
    for (int k = 0; k < 3; ++k) n[f[k]] += fn;  // area-weighted
  }
  for (Vec3& v : n) {
    double l = norm(v);
    if (l > 1e-12) v = v / l;
  }
  return n;
}

void TriangleMesh::transform(const Mat3& rot, const Vec3& trans) {
  for (Vec3& v : vertices) v = rot * v + trans;
}

void save_mesh_ply(const std::string& path, const TriangleMesh& mesh) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw RuntimeFailure("cannot open for write: " + path);
  std::ostringstream hdr;
  hdr << "ply\nformat binary_little_endian 1.0\n";
  hdr << "element vertex " << mesh.vertices.size() << "\n";
  hdr << "property float x\nproperty float y\nproperty float z\n";
  hdr << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  hdr << "element face " << mesh.faces.size() << "\n";
  hdr << "property list uchar int vertex_indices\n";
  hdr << "end_header\n";
  std::string h = hdr.str();
  std::fwrite(h.data(), 1, h.size(), fp);
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    float p[3] = {static_cast<float>(mesh.vertices[i].x), static_cast<float>(mesh.vertices[i].y),
                  static_cast<float>(mesh.vertices[i].z)};
    std::fwrite(p, 4, 3, fp);
    Vec3 c = i < mesh.colors.size() ? mesh.colors[i] : Vec3{0.5, 0.5, 0.5};
    uint8_t rgb[3] = {static_cast<uint8_t>(std::lround(clampd(c.x, 0, 1) * 255.0)),
                      static_cast<uint8_t>(std::lround(clampd(c.y, 0, 1) * 255.0)),
                      static_cast<uint8_t>(std::lround(clampd(c.z, 0, 1) * 255.0))};
    std::fwrite(rgb, 1, 3, fp);
  }
  for (const auto& f : mesh.faces) {
    uint8_t n = 3;
    int32_t idx[3] = {f[0], f[1], f[2]};
    std::fwrite(&n, 1, 1, fp);
    std::fwrite(idx, 4, 3, fp);
  }
  std::fclose(fp);
}

TriangleMesh load_mesh_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open PLY: " + path);
  std::string line;
  size_t n_vert = 0, n_face = 0;
  bool has_color = false;
  int extra_vertex_floats = 0;
  if (!std::getline(in, line) || line != "ply") throw ValidationError(path + ": not a PLY file");
  if (!std::getline(in, line) || line != "format binary_little_endian 1.0")
    throw ValidationError(path + ": expected binary little-endian PLY");
  std::string element;
  int vertex_props_seen = 0;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "element") {
      std::string name;
      size_t count;
      ls >> name >> count;
      element = name;
      if (name == "vertex") n_vert = count;
      else if (name == "face") n_face = count;
      else throw ValidationError(path + ": unsupported element " + name);
    } else if (tok == "property" && element == "vertex") {
      std::string type, name;
      ls >> type >> name;
      vertex_props_seen++;
      if (name == "red") has_color = true;
      if (vertex_props_seen > 3 && type == "float" && name != "x" && name != "y" && name != "z")
        extra_vertex_floats++;
    }
  }
  TriangleMesh mesh;
  mesh.vertices.resize(n_vert);
  if (has_color) mesh.colors.resize(n_vert);
  for (size_t i = 0; i < n_vert; ++i) {
    float p[3];
    in.read(reinterpret_cast<char*>(p), 12);
    if (extra_vertex_floats) in.ignore(extra_vertex_floats * 4);
    mesh.vertices[i] = {p[0], p[1], p[2]};
    if (has_color) {
      uint8_t rgb[3];
      in.read(reinterpret_cast<char*>(rgb), 3);
      mesh.colors[i] = {rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0};
    }
  }
  mesh.faces.resize(n_face);
  for (size_t i = 0; i < n_face; ++i) {
    uint8_t n;
    in.read(reinterpret_cast<char*>(&n), 1);
    if (n != 3) throw ValidationError(path + ": only triangle faces supported");
    int32_t idx[3];
    in.read(reinterpret_cast<char*>(idx), 12);
    mesh.faces[i] = {idx[0], idx[1], idx[2]};
  }
  if (!in) throw ValidationError(path + ": truncated PLY data");
  return mesh;
}

TsdfVolume::TsdfVolume(double voxel_size, double truncation)
    : voxel_size_(voxel_size), truncation_(truncation) {
  if (!(voxel_size > 0)) throw ValidationError("TsdfVolume: voxel_size must be positive");
  if (truncation < 2.0 * voxel_size)
    throw ValidationError("TsdfVolume: truncation must be >= 2 * voxel_size");
}

size_t TsdfVolume::observed_voxels() const {
  size_t n = 0;
  for (const auto& [key, vox] : blocks_)
    for (const Voxel& v : vox)
      if (v.weight > 0) n++;
  return n;
}

namespace {
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
}  // namespace

TsdfVolume::Voxel& TsdfVolume::voxel(int gx, int gy, int gz) {
  BlockKey key{floor_div(gx, kBlock), floor_div(gy, kBlock), floor_div(gz, kBlock)};
  auto& block = blocks_[key];
  if (block.empty()) block.resize(kBlock * kBlock * kBlock);
  int lx = gx - key[0] * kBlock, ly = gy - key[1] * kBlock, lz = gz - key[2] * kBlock;
  return block[(lz * kBlock + ly) * kBlock + lx];
}

const TsdfVolume::Voxel* TsdfVolume::find_voxel(int gx, int gy, int gz) const {
  BlockKey key{floor_div(gx, kBlock), floor_div(gy, kBlock), floor_div(gz, kBlock)};
  auto it = blocks_.find(key);
  if (it == blocks_.end()) return nullptr;
  int lx = gx - key[0] * kBlock, ly = gy - key[1] * kBlock, lz = gz - key[2] * kBlock;
  return &it->second[(lz * kBlock + ly) * kBlock + lx];
}

void TsdfVolume::integrate(const Image& depth, const Image& rgb, const Image& alpha,
                           const Camera& cam) {
  if (depth.width != cam.width || depth.height != cam.height || !depth.same_shape(alpha))
    throw ValidationError("tsdf_integrate: image dimensions do not match the camera");
  // Allocate blocks around observed surface points.
  Vec3 origin = cam.center();
  Mat3 rot = cam.rotation();
  double pad = truncation_ + voxel_size_;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      if (alpha.at(x, y, 0) <= 0.5) continue;
      double t = depth.at(x, y, 0);
      if (!(t > 0)) continue;
      Vec3 d_cam{(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0};
      Vec3 p = origin + normalized(rot.tmul(d_cam)) * t;
      int x0 = static_cast<int>(std::floor((p.x - pad) / voxel_size_));
      int x1 = static_cast<int>(std::floor((p.x + pad) / voxel_size_));
      int y0 = static_cast<int>(std::floor((p.y - pad) / voxel_size_));
      int y1 = static_cast<int>(std::floor((p.y + pad) / voxel_size_));
      int z0 = static_cast<int>(std::floor((p.z - pad) / voxel_size_));
      int z1 = static_cast<int>(std::floor((p.z + pad) / voxel_size_));
      for (int bz = floor_div(z0, kBlock); bz <= floor_div(z1, kBlock); ++bz)
        for (int by = floor_div(y0, kBlock); by <= floor_div(y1, kBlock); ++by)
          for (int bx = floor_div(x0, kBlock); bx <= floor_div(x1, kBlock); ++bx) {
            auto& block = blocks_[{bx, by, bz}];
            if (block.empty()) block.resize(kBlock * kBlock * kBlock);
          }
    }

  // Projective update, parallel over blocks (disjoint writes).
  std::vector<std::pair<const BlockKey, std::vector<Voxel>>*> block_ptrs;
  for (auto& kv : blocks_) block_ptrs.push_back(&kv);
  parallel_for(block_ptrs.size(), [&](size_t bi) {
    const BlockKey& key = block_ptrs[bi]->first;
    std::vector<Voxel>& vox = block_ptrs[bi]->second;
    for (int lz = 0; lz < kBlock; ++lz)
      for (int ly = 0; ly < kBlock; ++ly)
        for (int lx = 0; lx < kBlock; ++lx) {
          Vec3 p{(key[0] * kBlock + lx + 0.5) * voxel_size_,
                 (key[1] * kBlock + ly + 0.5) * voxel_size_,
                 (key[2] * kBlock + lz + 0.5) * voxel_size_};
          double px, py;
          if (!cam.project(p, px, py)) continue;
          int ix = static_cast<int>(std::floor(px));
          int iy = static_cast<int>(std::floor(py));
          if (ix < 0 || ix >= cam.width || iy < 0 || iy >= cam.height) continue;
          if (alpha.at(ix, iy, 0) <= 0.5) continue;
          double t = depth.at(ix, iy, 0);
          if (!(t > 0)) continue;
          // Depth images store ray depth; convert to camera-z at this pixel.
          Vec3 d_cam{(ix + 0.5 - cam.cx) / cam.fx, (iy + 0.5 - cam.cy) / cam.fy, 1.0};
          double z_surf = t / norm(d_cam);
          double sdf = z_surf - cam.depth_of(p);
          if (sdf < -truncation_) continue;
          double d = clampd(sdf / truncation_, -1.0, 1.0);
          Voxel& v = vox[(lz * kBlock + ly) * kBlock + lx];
          double w = v.weight;
          v.tsdf = static_cast<float>((v.tsdf * w + d) / (w + 1.0));
          v.r = static_cast<float>((v.r * w + rgb.at(ix, iy, 0)) / (w + 1.0));
          v.g = static_cast<float>((v.g * w + rgb.at(ix, iy, 1)) / (w + 1.0));
          v.b = static_cast<float>((v.b * w + rgb.at(ix, iy, 2)) / (w + 1.0));
          v.weight = static_cast<float>(w + 1.0);
        }
  });
}

TriangleMesh TsdfVolume::extract_mesh() const {
  TriangleMesh mesh;
  // Global edge key -> vertex index, so block boundaries weld exactly.
  struct EdgeKey {
    int64_t k1, k2;
    bool operator==(const EdgeKey& o) const { return k1 == o.k1 && k2 == o.k2; }
  };
  struct EdgeHash {
    size_t operator()(const EdgeKey& e) const {
      return std::hash<int64_t>()(e.k1 * 1000003 + e.k2);
    }
  };
  std::unordered_map<EdgeKey, int, EdgeHash> edge_vertex;

  auto corner = [&](int gx, int gy, int gz, double& val, bool& ok) {
    const Voxel* v = find_voxel(gx, gy, gz);
    if (!v || v->weight <= 0) {
      ok = false;
      return;
    }
    val = v->tsdf;
  };

  bool any_crossing = false;
  for (const auto& [key, block] : blocks_) {
    (void)block;
    for (int lz = 0; lz < kBlock; ++lz)
      for (int ly = 0; ly < kBlock; ++ly)
        for (int lx = 0; lx < kBlock; ++lx) {
          int gx = key[0] * kBlock + lx;
          int gy = key[1] * kBlock + ly;
          int gz = key[2] * kBlock + lz;
          double val[8];
          bool ok = true;
          for (int c = 0; c < 8 && ok; ++c)
            corner(gx + mc::kCornerOffset[c][0], gy + mc::kCornerOffset[c][1],
                   gz + mc::kCornerOffset[c][2], val[c], ok);
          if (!ok) continue;
          int cube = 0;
          for (int c = 0; c < 8; ++c)
            if (val[c] < 0) cube |= 1 << c;
          if (cube == 0 || cube == 255) continue;
          any_crossing = true;

          auto edge_vert = [&](int e) -> int {
            int c0 = mc::kEdgeCorners[e][0], c1 = mc::kEdgeCorners[e][1];
            int a[3] = {gx + mc::kCornerOffset[c0][0], gy + mc::kCornerOffset[c0][1],
                        gz + mc::kCornerOffset[c0][2]};
            int b[3] = {gx + mc::kCornerOffset[c1][0], gy + mc::kCornerOffset[c1][1],
                        gz + mc::kCornerOffset[c1][2]};
            auto pack = [](const int* p) {
              return (static_cast<int64_t>(p[0] + (1 << 20)) << 42) |
                     (static_cast<int64_t>(p[1] + (1 << 20)) << 21) |
                     static_cast<int64_t>(p[2] + (1 << 20));
            };
            EdgeKey ek{std::min(pack(a), pack(b)), std::max(pack(a), pack(b))};
            auto it = edge_vertex.find(ek);
            if (it != edge_vertex.end()) return it->second;
            double v0 = val[c0], v1 = val[c1];
            double t = v0 / (v0 - v1);  // zero crossing; signs differ by table construction
            t = clampd(t, 0.0, 1.0);
            Vec3 pa{(a[0] + 0.5) * voxel_size_, (a[1] + 0.5) * voxel_size_,
                    (a[2] + 0.5) * voxel_size_};
            Vec3 pb{(b[0] + 0.5) * voxel_size_, (b[1] + 0.5) * voxel_size_,
                    (b[2] + 0.5) * voxel_size_};
            Vec3 p = pa + (pb - pa) * t;
            int idx = static_cast<int>(mesh.vertices.size());
            mesh.vertices.push_back(p);
            // Color: interpolate the two corner voxels' running color averages.
            const Voxel* va = find_voxel(a[0], a[1], a[2]);
            const Voxel* vb = find_voxel(b[0], b[1], b[2]);
            Vec3 ca{va->r, va->g, va->b}, cb{vb->r, vb->g, vb->b};
            mesh.colors.push_back(ca + (cb - ca) * t);
            edge_vertex.emplace(ek, idx);
            return idx;
          };

          const int* tris = mc::kTriTable[cube];
          for (int t = 0; tris[t] >= 0; t += 3) {
            int i0 = edge_vert(tris[t]);
            int i1 = edge_vert(tris[t + 1]);
            int i2 = edge_vert(tris[t + 2]);
            if (i0 == i1 || i1 == i2 || i0 == i2) continue;
            Vec3 area = cross(mesh.vertices[i1] - mesh.vertices[i0],
                              mesh.vertices[i2] - mesh.vertices[i0]);
            if (norm2(area) < 1e-24) continue;  // degenerate sliver
            // Winding: normals point toward positive tsdf (outward).
            mesh.faces.push_back({i0, i2, i1});
          }
        }
  }
  if (!any_crossing) std::cerr << "[warn] marching_cubes: no sign change; empty mesh\n";
  return mesh;
}

void assign_vertex_colors(TriangleMesh& mesh, const Scene& scene) {
  if (scene.primitives.empty()) throw RuntimeFailure("assign_vertex_colors: empty scene");
  std::vector<Vec3> centers(scene.size());
  for (size_t i = 0; i < scene.size(); ++i) centers[i] = scene.primitives[i].center;
  KdTree tree(centers);
  std::vector<Vec3> normals = mesh.vertex_normals();
  mesh.colors.assign(mesh.vertices.size(), Vec3{0.5, 0.5, 0.5});
  parallel_for(mesh.vertices.size(), [&](size_t vi) {
    std::vector<int> nn;
    tree.knearest(mesh.vertices[vi], 8, nn);
    Vec3 acc{};
    double wsum = 0;
    for (int id : nn) {
      const GaussianPrimitive& g = scene.primitives[id];
      Mat3 r = quat_to_matrix(g.rotation);
      Vec3 local = Vec3{1, 1, 1}.cwise_div(g.scale()).cwise_mul(r.tmul(mesh.vertices[vi] - g.center));
      double w = std::exp(-0.5 * dot(local, local));
      if (w < 1e-12) continue;
      acc += sh_eval(g.sh, scene.sh_degree, normals[vi]) * w;
      wsum += w;
    }
    if (wsum >= 1e-6) mesh.colors[vi] = acc / wsum;
  });
}

TriangleMesh extract_textured_mesh(const Scene& scene, const SdfNetwork& sdf,
                                   const std::vector<JointModel>& joints, double s,
                                   const std::vector<Camera>& cameras,
                                   const ExtractOptions& opts) {
  if (cameras.empty()) throw ValidationError("extract_textured_mesh: no cameras given");
  if (s < 0.0 || s > 1.0) throw ValidationError("state must lie in [0,1]");
  Scene posed = pose_scene(scene, joints, s);
  double voxel = opts.voxel_size;
  if (voxel <= 0) {
    Bounds3 b = posed.bounds();
    voxel = std::fmax(b.diagonal(), 1e-6) / 256.0;
  }
  TsdfVolume vol(voxel, opts.trunc_voxels * voxel);
  for (const Camera& cam : cameras) {
    RenderOutput out = render_articulated(scene, sdf, joints, s, cam, opts.render);
    vol.integrate(out.depth, out.rgb, out.alpha, cam);
  }
  TriangleMesh mesh = vol.extract_mesh();
  if (mesh.empty()) {
    std::cerr << "[warn] extract_textured_mesh: empty mesh (blocks=" << vol.block_count()
              << ", observed voxels=" << vol.observed_voxels() << ", voxel=" << voxel << ")\n";
    return mesh;
  }
  assign_vertex_colors(mesh, posed);
  return mesh;
}

}  // namespace artsurf
