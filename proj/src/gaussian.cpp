#include "artsurf/gaussian.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "artsurf/errors.hpp"

namespace artsurf {

Bounds3 Scene::bounds() const {
  Bounds3 b;
  for (const auto& g : primitives) b.expand(g.center);
  return b;
}

void to_local_frame(const GaussianPrimitive& g, const Ray& ray, Vec3& o_local, Vec3& r_local) {
  Mat3 r = quat_to_matrix(g.rotation);
  Vec3 inv_s = Vec3{1, 1, 1}.cwise_div(g.scale());
  o_local = inv_s.cwise_mul(r.tmul(ray.origin - g.center));
  r_local = inv_s.cwise_mul(r.tmul(ray.dir));
}

namespace {
constexpr double kC0 = 0.28209479177387814;
constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                           -1.0925484305920792, 0.5462742152960396};
constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554,  -0.4570457994644658,
                           0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                           -0.5900435899266435};
}  // namespace

void sh_basis(int degree, const Vec3& dir, double* out) {
  double x = dir.x, y = dir.y, z = dir.z;
  out[0] = kC0;
  if (degree < 1) return;
  out[1] = -kC1 * y;
  out[2] = kC1 * z;
  out[3] = -kC1 * x;
  if (degree < 2) return;
  double xx = x * x, yy = y * y, zz = z * z;
  out[4] = kC2[0] * x * y;
  out[5] = kC2[1] * y * z;
  out[6] = kC2[2] * (2 * zz - xx - yy);
  out[7] = kC2[3] * x * z;
  out[8] = kC2[4] * (xx - yy);
  if (degree < 3) return;
  out[9] = kC3[0] * y * (3 * xx - yy);
  out[10] = kC3[1] * x * y * z;
  out[11] = kC3[2] * y * (4 * zz - xx - yy);
  out[12] = kC3[3] * z * (2 * zz - 3 * xx - 3 * yy);
  out[13] = kC3[4] * x * (4 * zz - xx - yy);
  out[14] = kC3[5] * z * (xx - yy);
  out[15] = kC3[6] * x * (xx - 3 * yy);
}

Vec3 sh_eval(const std::vector<double>& sh, int degree, const Vec3& dir) {
  double basis[16];
  sh_basis(degree, dir, basis);
  int n = (degree + 1) * (degree + 1);
  Vec3 rgb;
  for (int ch = 0; ch < 3; ++ch) {
    double v = 0.5;
    for (int c = 0; c < n; ++c) v += basis[c] * sh[static_cast<size_t>(c) * 3 + ch];
    rgb[ch] = clampd(v, 0.0, 1.0);
  }
  return rgb;
}

DensifyReport densify_and_prune(Scene& scene, const DensifyOptions& opts) {
  DensifyReport rep;
  auto& st = scene.densify_stats;
  if (st.size() != scene.size())
    throw RuntimeFailure("densify_and_prune: stats length does not match primitive count");

  size_t n = scene.size();
  std::vector<char> prune(n, 0);
  size_t survivors = 0;
  for (size_t i = 0; i < n; ++i) {
    prune[i] = st.view_count[i] > 0 && st.max_sigma[i] < opts.prune_opacity;
    if (!prune[i]) survivors++;
  }
  if (survivors == 0) {
    std::cerr << "[warn] densify_and_prune would remove every primitive; scene left unchanged\n";
    rep.rejected = true;
    st.resize(n);
    return rep;
  }

  std::vector<GaussianPrimitive> out;
  out.reserve(n + n / 4);
  for (size_t i = 0; i < n; ++i) {
    if (prune[i]) {
      rep.pruned++;
      continue;
    }
    const GaussianPrimitive& g = scene.primitives[i];
    double mean_grad =
        st.view_count[i] > 0 ? st.grad_accum[i] / static_cast<double>(st.view_count[i]) : 0.0;
    bool grow = mean_grad > opts.grad_threshold &&
                out.size() + (n - i) < opts.max_gaussians;  // soft cap
    if (!grow) {
      out.push_back(g);
      rep.parent.push_back(static_cast<int>(i));
      continue;
    }
    if (g.max_scale() < opts.split_scale) {
      out.push_back(g);
      out.push_back(g);
      rep.parent.push_back(static_cast<int>(i));
      rep.parent.push_back(static_cast<int>(i));
      rep.clones++;
    } else {
      // Split along the dominant principal axis; children shrink by the fixed divisor.
      Vec3 s = g.scale();
      int axis = s.x >= s.y && s.x >= s.z ? 0 : (s.y >= s.z ? 1 : 2);
      Vec3 dir_world = quat_to_matrix(g.rotation).col(axis);
      double step = 0.5 * s[axis];
      GaussianPrimitive a = g, b = g;
      a.center = g.center + dir_world * step;
      b.center = g.center - dir_world * step;
      double shrink = std::log(opts.scale_divisor);
      a.log_scale -= Vec3{shrink, shrink, shrink};
      b.log_scale -= Vec3{shrink, shrink, shrink};
      out.push_back(a);
      out.push_back(b);
      rep.parent.push_back(static_cast<int>(i));
      rep.parent.push_back(static_cast<int>(i));
      rep.splits++;
    }
  }
  scene.primitives = std::move(out);
  scene.densify_stats.resize(scene.size());
  return rep;
}

namespace {

void write_exact(FILE* fp, const void* p, size_t bytes) {
  if (std::fwrite(p, 1, bytes, fp) != bytes) throw RuntimeFailure("PLY write failed");
}

}  // namespace

void save_gaussians_ply(const std::string& path, const Scene& scene) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw RuntimeFailure("cannot open for write: " + path);
  int n_sh = 3 * scene.sh_coeffs();
  std::ostringstream hdr;
  hdr << "ply\nformat binary_little_endian 1.0\n";
  hdr << "element vertex " << scene.size() << "\n";
  for (const char* p : {"x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "log_scale_0",
                        "log_scale_1", "log_scale_2"})
    hdr << "property float " << p << "\n";
  for (int i = 0; i < n_sh; ++i) hdr << "property float sh_" << i << "\n";
  hdr << "property int part_label\n";
  hdr << "end_header\n";
  std::string h = hdr.str();
  write_exact(fp, h.data(), h.size());

  for (const auto& g : scene.primitives) {
    float f[10] = {static_cast<float>(g.center.x),    static_cast<float>(g.center.y),
                   static_cast<float>(g.center.z),    static_cast<float>(g.rotation.w),
                   static_cast<float>(g.rotation.x),  static_cast<float>(g.rotation.y),
                   static_cast<float>(g.rotation.z),  static_cast<float>(g.log_scale.x),
                   static_cast<float>(g.log_scale.y), static_cast<float>(g.log_scale.z)};
    write_exact(fp, f, sizeof(f));
    std::vector<float> sh(g.sh.begin(), g.sh.end());
    sh.resize(n_sh, 0.0f);
    write_exact(fp, sh.data(), sh.size() * 4);
    int32_t label = g.part_label;
    write_exact(fp, &label, 4);
  }
  std::fclose(fp);
}

Scene load_gaussians_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open PLY: " + path);
  std::string line;
  size_t count = 0;
  int n_sh = -1;
  std::vector<std::string> props;
  if (!std::getline(in, line) || line != "ply") throw ValidationError(path + ": not a PLY file");
  if (!std::getline(in, line) || line != "format binary_little_endian 1.0")
    throw ValidationError(path + ": expected binary little-endian PLY");
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw ValidationError(path + ": unexpected element " + name);
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    }
  }
  n_sh = 0;
  for (const auto& p : props)
    if (p.rfind("sh_", 0) == 0) n_sh++;
  int coeffs = n_sh / 3;
  int degree = static_cast<int>(std::lround(std::sqrt(static_cast<double>(coeffs)))) - 1;
  if ((degree + 1) * (degree + 1) != coeffs || degree < 0 || degree > 3)
    throw ValidationError(path + ": sh property count does not match a degree in 0..3");
  if (props.size() != static_cast<size_t>(10 + n_sh + 1))
    throw ValidationError(path + ": unexpected property layout");

  Scene scene;
  scene.sh_degree = degree;
  scene.primitives.resize(count);
  for (size_t i = 0; i < count; ++i) {
    float f[10];
    in.read(reinterpret_cast<char*>(f), sizeof(f));
    std::vector<float> sh(n_sh);
    in.read(reinterpret_cast<char*>(sh.data()), n_sh * 4);
    int32_t label;
    in.read(reinterpret_cast<char*>(&label), 4);
    if (!in) throw ValidationError(path + ": truncated vertex data");
    GaussianPrimitive& g = scene.primitives[i];
    g.center = {f[0], f[1], f[2]};
    g.rotation = UnitQuaternion(f[3], f[4], f[5], f[6]);
    g.log_scale = {f[7], f[8], f[9]};
    g.sh.assign(sh.begin(), sh.end());
    g.part_label = label;
  }
  if (scene.primitives.empty()) throw ValidationError(path + ": scene must contain at least one primitive");
  scene.densify_stats.resize(scene.size());
  return scene;
}

}  // namespace artsurf
