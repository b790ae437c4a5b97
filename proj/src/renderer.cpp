#include "artsurf/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "artsurf/articulation.hpp"
#include "artsurf/errors.hpp"
#include "artsurf/parallel.hpp"

namespace artsurf {

double peak_depth(const Vec3& o_local, const Vec3& r_local, double t_near) {
  double rr = dot(r_local, r_local);
  double t = -dot(o_local, r_local) / rr;
  return t < t_near ? t_near : t;
}

double contribution(const Vec3& o_local, const Vec3& r_local, double t_near) {
  double t = peak_depth(o_local, r_local, t_near);
  Vec3 q = o_local + r_local * t;
  return std::exp(-0.5 * dot(q, q));
}

Vec3 gaussian_normal(const GaussianPrimitive& g, const Vec3& r_local, const Vec3& ray_dir) {
  Mat3 r = quat_to_matrix(g.rotation);
  Vec3 inv_s = Vec3{1, 1, 1}.cwise_div(g.scale());
  Vec3 m = -(r * inv_s.cwise_mul(r_local));
  double n = norm(m);
  if (n < 1e-12) return {0, 0, 0};
  Vec3 u = m / n;
  return dot(u, ray_dir) < 0 ? u : -u;
}

namespace {

struct PosedFrame {
  Mat3 rot;     // local -> world
  Vec3 inv_s;   // 1 / scale
};

std::vector<PosedFrame> make_frames(const Scene& scene) {
  std::vector<PosedFrame> frames(scene.size());
  for (size_t i = 0; i < scene.size(); ++i) {
    frames[i].rot = quat_to_matrix(scene.primitives[i].rotation);
    frames[i].inv_s = Vec3{1, 1, 1}.cwise_div(scene.primitives[i].scale());
  }
  return frames;
}

// Loose world-space AABB grid over the 3-sigma extents, for hit culling at scale.
struct GaussianGrid {
  Bounds3 bounds;
  Vec3 cell_size;
  int nx = 0, ny = 0, nz = 0;
  std::vector<std::vector<int>> cells;

  void build(const Scene& scene, const std::vector<PosedFrame>& frames) {
    std::vector<Vec3> ext(scene.size());
    Bounds3 b;
    for (size_t i = 0; i < scene.size(); ++i) {
      Vec3 s = scene.primitives[i].scale();
      const Mat3& r = frames[i].rot;
      Vec3 e;
      for (int a = 0; a < 3; ++a) {
        double sum = 0;
        for (int j = 0; j < 3; ++j) {
          double v = r(a, j) * s[j];
          sum += v * v;
        }
        e[a] = 3.0 * std::sqrt(sum);
      }
      ext[i] = e;
      b.expand(scene.primitives[i].center - e);
      b.expand(scene.primitives[i].center + e);
    }
    bounds = b.inflated(1e-9);
    Vec3 span = bounds.extent();
    double target = std::cbrt(span.x * span.y * span.z / 32768.0);  // ~32^3 cells
    if (!(target > 0)) target = 1.0;
    nx = std::clamp(static_cast<int>(std::ceil(span.x / target)), 1, 64);
    ny = std::clamp(static_cast<int>(std::ceil(span.y / target)), 1, 64);
    nz = std::clamp(static_cast<int>(std::ceil(span.z / target)), 1, 64);
    cell_size = {span.x / nx, span.y / ny, span.z / nz};
    cells.assign(static_cast<size_t>(nx) * ny * nz, {});
    for (size_t i = 0; i < scene.size(); ++i) {
      Vec3 lo = scene.primitives[i].center - ext[i] - bounds.lo;
      Vec3 hi = scene.primitives[i].center + ext[i] - bounds.lo;
      int x0 = std::clamp(static_cast<int>(lo.x / cell_size.x), 0, nx - 1);
      int y0 = std::clamp(static_cast<int>(lo.y / cell_size.y), 0, ny - 1);
      int z0 = std::clamp(static_cast<int>(lo.z / cell_size.z), 0, nz - 1);
      int x1 = std::clamp(static_cast<int>(hi.x / cell_size.x), 0, nx - 1);
      int y1 = std::clamp(static_cast<int>(hi.y / cell_size.y), 0, ny - 1);
      int z1 = std::clamp(static_cast<int>(hi.z / cell_size.z), 0, nz - 1);
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x)
            cells[(static_cast<size_t>(z) * ny + y) * nx + x].push_back(static_cast<int>(i));
    }
  }

  size_t cell_index(int x, int y, int z) const {
    return (static_cast<size_t>(z) * ny + y) * nx + x;
  }

  // Amanatides-Woo traversal; dedups with the caller's stamp buffer.
  void candidates(const Ray& ray, std::vector<int>& out, std::vector<int>& stamp,
                  int stamp_val) const {
    out.clear();
    double t0 = 0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      double o = ray.origin[a], d = ray.dir[a];
      double lo = bounds.lo[a], hi = bounds.hi[a];
      if (std::fabs(d) < 1e-15) {
        if (o < lo || o > hi) return;
      } else {
        double ta = (lo - o) / d, tb = (hi - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::fmax(t0, ta);
        t1 = std::fmin(t1, tb);
      }
    }
    if (t0 > t1) return;
    Vec3 p = ray.point_at(t0 + 1e-12);
    int cx = std::clamp(static_cast<int>((p.x - bounds.lo.x) / cell_size.x), 0, nx - 1);
    int cy = std::clamp(static_cast<int>((p.y - bounds.lo.y) / cell_size.y), 0, ny - 1);
    int cz = std::clamp(static_cast<int>((p.z - bounds.lo.z) / cell_size.z), 0, nz - 1);
    int step[3], c[3] = {cx, cy, cz}, n[3] = {nx, ny, nz};
    double t_max[3], t_delta[3];
    for (int a = 0; a < 3; ++a) {
      double d = ray.dir[a];
      if (std::fabs(d) < 1e-15) {
        step[a] = 0;
        t_max[a] = std::numeric_limits<double>::infinity();
        t_delta[a] = std::numeric_limits<double>::infinity();
      } else {
        step[a] = d > 0 ? 1 : -1;
        double cs = cell_size[a];
        double edge = bounds.lo[a] + (c[a] + (d > 0 ? 1 : 0)) * cs;
        t_max[a] = (edge - ray.origin[a]) / d;
        t_delta[a] = cs / std::fabs(d);
      }
    }
    for (;;) {
      for (int id : cells[cell_index(c[0], c[1], c[2])]) {
        if (stamp[id] != stamp_val) {
          stamp[id] = stamp_val;
          out.push_back(id);
        }
      }
      int a = t_max[0] < t_max[1] ? (t_max[0] < t_max[2] ? 0 : 2) : (t_max[1] < t_max[2] ? 1 : 2);
      if (t_max[a] > t1) break;
      c[a] += step[a];
      if (c[a] < 0 || c[a] >= n[a]) break;
      t_max[a] += t_delta[a];
    }
  }
};

struct TileLayout {
  int tile = 16, tx = 0, ty = 0;
  TileLayout(int w, int h, int t) : tile(t), tx((w + t - 1) / t), ty((h + t - 1) / t) {}
  size_t count() const { return static_cast<size_t>(tx) * ty; }
};

}  // namespace

void render_gather(const Scene& scene, const Camera& cam, const RenderOptions& opts,
                   RenderOutput& out) {
  if (scene.primitives.empty()) throw RuntimeFailure("render: scene is empty");
  int w = cam.width, h = cam.height;
  out.width = w;
  out.height = h;
  out.records.assign(static_cast<size_t>(w) * h, {});
  out.pushes.clear();

  std::vector<PosedFrame> frames = make_frames(scene);
  bool use_grid = static_cast<int>(scene.size()) >= opts.grid_threshold;
  GaussianGrid grid;
  if (use_grid) grid.build(scene, frames);

  Mat3 cam_rot = cam.rotation();
  Vec3 cam_center = cam.center();
  TileLayout tiles(w, h, opts.tile);
  double cutoff_e2 = -2.0 * std::log(opts.epsilon_cutoff);

  parallel_for(tiles.count(), [&](size_t job) {
    int tx = static_cast<int>(job) % tiles.tx;
    int ty = static_cast<int>(job) / tiles.tx;
    std::vector<int> stamp;
    std::vector<int> cand;
    if (use_grid) stamp.assign(scene.size(), -1);
    int stamp_val = 0;
    for (int y = ty * opts.tile; y < std::min(h, (ty + 1) * opts.tile); ++y)
      for (int x = tx * opts.tile; x < std::min(w, (tx + 1) * opts.tile); ++x) {
        Ray ray;
        ray.origin = cam_center;
        Vec3 d_cam{(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0};
        ray.dir = normalized(cam_rot.tmul(d_cam));
        RayRecord& rec = out.records[static_cast<size_t>(y) * w + x];
        rec.origin = ray.origin;
        rec.dir = ray.dir;

        auto test = [&](int id) {
          const GaussianPrimitive& g = scene.primitives[id];
          const PosedFrame& fr = frames[id];
          Vec3 o_l = fr.inv_s.cwise_mul(fr.rot.tmul(ray.origin - g.center));
          Vec3 r_l = fr.inv_s.cwise_mul(fr.rot.tmul(ray.dir));
          double rr = dot(r_l, r_l);
          if (rr < 1e-24) return;  // degenerate local direction
          double t = -dot(o_l, r_l) / rr;
          if (t < opts.t_near) t = opts.t_near;
          Vec3 q = o_l + r_l * t;
          double e2 = dot(q, q);
          if (e2 > cutoff_e2) return;  // below contribution cutoff
          RayHit hit;
          hit.gaussian_id = id;
          hit.t_star = t;
          hit.epsilon = std::exp(-0.5 * e2);
          hit.o_local = o_l;
          hit.r_local = r_l;
          hit.normal = gaussian_normal(g, r_l, ray.dir);
          rec.hits.push_back(hit);
        };

        if (use_grid) {
          grid.candidates(ray, cand, stamp, ++stamp_val);
          std::sort(cand.begin(), cand.end());
          for (int id : cand) test(id);
        } else {
          for (size_t id = 0; id < scene.size(); ++id) test(static_cast<int>(id));
        }
        std::sort(rec.hits.begin(), rec.hits.end(), [](const RayHit& a, const RayHit& b) {
          return a.t_star != b.t_star ? a.t_star < b.t_star : a.gaussian_id < b.gaussian_id;
        });
      }
  });

  // Push queries in ray order (deterministic).
  for (size_t r = 0; r < out.records.size(); ++r) {
    RayRecord& rec = out.records[r];
    if (rec.hits.empty()) continue;
    const RayHit& last = rec.hits.back();
    PushQuery pq;
    pq.ray = static_cast<int>(r);
    pq.gaussian_id = last.gaussian_id;
    double rl = norm(last.r_local);
    pq.world_point = scene.primitives[last.gaussian_id].center + rec.dir / rl;
    pq.r_local = last.r_local;
    pq.dir = rec.dir;
    out.pushes.push_back(pq);
  }
}

namespace {

// Maps ray index -> push index; -1 where the ray has no hits.
std::vector<int> push_index_of_ray(const RenderOutput& out) {
  std::vector<int> idx(out.records.size(), -1);
  for (size_t i = 0; i < out.pushes.size(); ++i) idx[out.pushes[i].ray] = static_cast<int>(i);
  return idx;
}

}  // namespace

void render_composite(const Scene& scene, const std::vector<double>& f_centers,
                      const std::vector<double>& f_push, double k, const RenderOptions& opts,
                      RenderOutput& out) {
  int w = out.width, h = out.height;
  out.rgb = Image(w, h, 3);
  out.depth = Image(w, h, 1);
  out.alpha = Image(w, h, 1);
  out.normal = Image(w, h, 3);
  std::vector<int> push_idx = push_index_of_ray(out);

  TileLayout tiles(w, h, opts.tile);
  parallel_for(tiles.count(), [&](size_t job) {
    int tx = static_cast<int>(job) % tiles.tx;
    int ty = static_cast<int>(job) / tiles.tx;
    for (int y = ty * opts.tile; y < std::min(h, (ty + 1) * opts.tile); ++y)
      for (int x = tx * opts.tile; x < std::min(w, (tx + 1) * opts.tile); ++x) {
        size_t ridx = static_cast<size_t>(y) * w + x;
        RayRecord& rec = out.records[ridx];
        Vec3 color{0, 0, 0}, nrm{0, 0, 0};
        double alpha = 0, dsum = 0, trans = 1.0;
        size_t kept = 0;
        for (size_t i = 0; i < rec.hits.size(); ++i) {
          if (trans < opts.early_stop_transmittance) break;
          RayHit& hit = rec.hits[i];
          hit.f_center = f_centers[hit.gaussian_id];
          if (i + 1 < rec.hits.size()) {
            hit.next_gaussian = rec.hits[i + 1].gaussian_id;
            hit.f_next = f_centers[hit.next_gaussian];
          } else {
            hit.next_gaussian = -1;
            hit.f_next = f_push[push_idx[ridx]];
          }
          hit.sigma_hat = sdf_to_opacity(hit.f_center, hit.f_next, k, opts.activation);
          hit.sigma = std::fmin(hit.sigma_hat * hit.epsilon, opts.sigma_max);
          hit.weight = hit.sigma * trans;
          const GaussianPrimitive& g = scene.primitives[hit.gaussian_id];
          Vec3 c = sh_eval(g.sh, scene.sh_degree, rec.dir);
          color += c * hit.weight;
          nrm += hit.normal * hit.weight;
          alpha += hit.weight;
          dsum += hit.t_star * hit.weight;
          trans *= (1.0 - hit.sigma);
          kept = i + 1;
        }
        rec.hits.resize(kept);
        rec.alpha = alpha;
        rec.depth = dsum / std::fmax(alpha, 1e-8);
        color += opts.background * trans;
        for (int c = 0; c < 3; ++c) {
          out.rgb.at(x, y, c) = color[c];
          out.normal.at(x, y, c) = nrm[c];
        }
        out.alpha.at(x, y, 0) = alpha;
        out.depth.at(x, y, 0) = rec.depth;
      }
  });
}

RenderOutput render(const Scene& scene, const SdfNetwork& sdf, const Camera& cam,
                    const RenderOptions& opts) {
  RenderOutput out;
  render_gather(scene, cam, opts, out);
  std::vector<Vec3> centers(scene.size());
  for (size_t i = 0; i < scene.size(); ++i) centers[i] = scene.primitives[i].center;
  std::vector<double> f_centers;
  sdf.eval_batch(centers, f_centers);
  std::vector<Vec3> push_pts(out.pushes.size());
  for (size_t i = 0; i < out.pushes.size(); ++i) push_pts[i] = out.pushes[i].world_point;
  std::vector<double> f_push;
  sdf.eval_batch(push_pts, f_push);
  render_composite(scene, f_centers, f_push, sdf.k(), opts, out);
  return out;
}

void SceneGrads::init(const Scene& scene) {
  center.assign(scene.size(), Vec3{});
  rotation.assign(scene.size(), {0, 0, 0, 0});
  log_scale.assign(scene.size(), Vec3{});
  sh.assign(scene.size(), std::vector<double>(3 * scene.sh_coeffs(), 0.0));
  k = 0;
}

void SceneGrads::add_scaled(const SceneGrads& o, double s) {
  for (size_t i = 0; i < center.size(); ++i) {
    center[i] += o.center[i] * s;
    for (int j = 0; j < 4; ++j) rotation[i][j] += o.rotation[i][j] * s;
    log_scale[i] += o.log_scale[i] * s;
    for (size_t j = 0; j < sh[i].size(); ++j) sh[i][j] += o.sh[i][j] * s;
  }
  k += o.k * s;
}

double SceneGrads::squared_norm() const {
  double s = 0;
  for (size_t i = 0; i < center.size(); ++i) {
    s += norm2(center[i]) + norm2(log_scale[i]);
    for (int j = 0; j < 4; ++j) s += rotation[i][j] * rotation[i][j];
    for (double v : sh[i]) s += v * v;
  }
  s += k * k;
  return s;
}

void SceneGrads::scale(double s) {
  for (size_t i = 0; i < center.size(); ++i) {
    center[i] *= s;
    for (int j = 0; j < 4; ++j) rotation[i][j] *= s;
    log_scale[i] *= s;
    for (double& v : sh[i]) v *= s;
  }
  k *= s;
}

namespace {

// dL/dq (tangent-projected) from dL/dR for a unit quaternion.
std::array<double, 4> quat_backward(const UnitQuaternion& q, const Mat3& dr) {
  double w = q.w, x = q.x, y = q.y, z = q.z;
  auto contract = [&](const Mat3& d) {
    double s = 0;
    for (int i = 0; i < 9; ++i) s += dr.m[i] * d.m[i];
    return s;
  };
  Mat3 dw, dx, dy, dz;
  dw.m = {0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0};
  dx.m = {0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x};
  dy.m = {-4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y};
  dz.m = {-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0};
  std::array<double, 4> g{contract(dw), contract(dx), contract(dy), contract(dz)};
  double dotqg = g[0] * w + g[1] * x + g[2] * y + g[3] * z;
  g[0] -= dotqg * w;
  g[1] -= dotqg * x;
  g[2] -= dotqg * y;
  g[3] -= dotqg * z;
  return g;
}

struct GaussGrad {
  Vec3 c;
  std::array<double, 4> q{0, 0, 0, 0};
  Vec3 ls;
  double fbar = 0;
  std::vector<double> sh;
};

struct TileGrads {
  std::vector<int> ids;
  std::vector<GaussGrad> g;
  double k_bar = 0;
};

}  // namespace

RenderBackwardResult render_backward(const Scene& scene, const RenderOutput& out,
                                     const RenderAdjoints& adj, double k,
                                     const RenderOptions& opts) {
  RenderBackwardResult res;
  res.scene.init(scene);
  res.f_center_bar.assign(scene.size(), 0.0);
  res.f_push_bar.assign(out.pushes.size(), 0.0);
  if (out.records.empty()) throw RuntimeFailure("render_backward: no blend records retained");

  int w = out.width, h = out.height;
  int n_sh = 3 * scene.sh_coeffs();
  std::vector<PosedFrame> frames = make_frames(scene);
  std::vector<int> push_idx = push_index_of_ray(out);

  auto img_grad = [](const Image& im, int x, int y, int c) {
    return im.data.empty() ? 0.0 : im.at(x, y, c);
  };

  TileLayout tiles(w, h, opts.tile);
  std::vector<TileGrads> tile_grads(tiles.count());

  parallel_for(tiles.count(), [&](size_t job) {
    int tx = static_cast<int>(job) % tiles.tx;
    int ty = static_cast<int>(job) / tiles.tx;
    TileGrads& tg = tile_grads[job];
    std::vector<int> slot(scene.size(), -1);
    auto slot_of = [&](int id) -> GaussGrad& {
      if (slot[id] < 0) {
        slot[id] = static_cast<int>(tg.ids.size());
        tg.ids.push_back(id);
        tg.g.emplace_back();
        tg.g.back().sh.assign(n_sh, 0.0);
      }
      return tg.g[slot[id]];
    };

    double basis[16];
    for (int y = ty * opts.tile; y < std::min(h, (ty + 1) * opts.tile); ++y)
      for (int x = tx * opts.tile; x < std::min(w, (tx + 1) * opts.tile); ++x) {
        size_t ridx = static_cast<size_t>(y) * w + x;
        const RayRecord& rec = out.records[ridx];
        size_t nh = rec.hits.size();
        if (nh == 0) continue;

        Vec3 cbar{img_grad(adj.d_rgb, x, y, 0), img_grad(adj.d_rgb, x, y, 1),
                  img_grad(adj.d_rgb, x, y, 2)};
        double abar = adj.d_alpha.data.empty() ? 0.0 : adj.d_alpha.at(x, y, 0);
        double dbar = adj.d_depth.data.empty() ? 0.0 : adj.d_depth.at(x, y, 0);
        Vec3 nbar{img_grad(adj.d_normal, x, y, 0), img_grad(adj.d_normal, x, y, 1),
                  img_grad(adj.d_normal, x, y, 2)};
        const std::vector<HitExtra>* extras =
            adj.hit_extras ? &(*adj.hit_extras)[ridx] : nullptr;

        sh_basis(scene.sh_degree, rec.dir, basis);

        // Recompute transmittances and per-hit colors.
        std::vector<double> trans(nh);
        std::vector<Vec3> colors(nh);
        double t_run = 1.0;
        double alpha_sum = 0.0, dsum = 0.0;
        for (size_t i = 0; i < nh; ++i) {
          trans[i] = t_run;
          t_run *= (1.0 - rec.hits[i].sigma);
          const GaussianPrimitive& g = scene.primitives[rec.hits[i].gaussian_id];
          colors[i] = sh_eval(g.sh, scene.sh_degree, rec.dir);
          alpha_sum += rec.hits[i].weight;
          dsum += rec.hits[i].weight * rec.hits[i].t_star;
        }
        double t_final = t_run;
        double amax = std::fmax(alpha_sum, 1e-8);
        double agate = alpha_sum > 1e-8 ? 1.0 : 0.0;
        double bg_dot = dot(cbar, opts.background);

        // dL/dw_i, then sigma bars via the suffix scan; the background term adds
        // a dL/dT_final path.
        std::vector<double> wbar(nh), tbar(nh);
        for (size_t i = 0; i < nh; ++i) {
          const RayHit& hit = rec.hits[i];
          wbar[i] = dot(cbar, colors[i]) + abar + nbar.x * hit.normal.x +
                    nbar.y * hit.normal.y + nbar.z * hit.normal.z +
                    dbar * (hit.t_star * amax - dsum * agate) / (amax * amax);
          tbar[i] = dbar * hit.weight / amax;
          if (extras) {
            wbar[i] += (*extras)[i].d_w;
            tbar[i] += (*extras)[i].d_t;
          }
        }
        double suffix = 0.0;  // sum_{j>i} wbar_j w_j
        for (size_t ii = nh; ii-- > 0;) {
          const RayHit& hit = rec.hits[ii];
          double one_minus = 1.0 - hit.sigma;
          double sigma_bar =
              wbar[ii] * trans[ii] - (suffix + bg_dot * t_final) / one_minus;
          suffix += wbar[ii] * hit.weight;

          const GaussianPrimitive& g = scene.primitives[hit.gaussian_id];
          GaussGrad& gg = slot_of(hit.gaussian_id);
          const PosedFrame& fr = frames[hit.gaussian_id];

          // sh coefficients (clamp-gated).
          Vec3 chbar = cbar * hit.weight;
          for (int ch = 0; ch < 3; ++ch) {
            if (chbar[ch] == 0.0) continue;
            double pre = 0.5;
            for (int c = 0; c < scene.sh_coeffs(); ++c)
              pre += basis[c] * g.sh[static_cast<size_t>(c) * 3 + ch];
            if (pre <= 0.0 || pre >= 1.0) continue;
            for (int c = 0; c < scene.sh_coeffs(); ++c)
              gg.sh[static_cast<size_t>(c) * 3 + ch] += chbar[ch] * basis[c];
          }

          // sigma = min(sigma_hat * epsilon, sigma_max)
          double shat_bar = 0, eps_bar = 0;
          if (hit.sigma_hat * hit.epsilon < opts.sigma_max) {
            shat_bar = sigma_bar * hit.epsilon;
            eps_bar = sigma_bar * hit.sigma_hat;
          }

          // sigma_hat -> (f_center, f_next, k)
          if (shat_bar != 0.0) {
            SdfOpacityGrad og;
            sdf_to_opacity(hit.f_center, hit.f_next, k, opts.activation, &og);
            gg.fbar += shat_bar * og.d_fi;
            tg.k_bar += shat_bar * og.d_k;
            if (hit.next_gaussian >= 0)
              slot_of(hit.next_gaussian).fbar += shat_bar * og.d_fnext;
            else
              res.f_push_bar[push_idx[ridx]] += shat_bar * og.d_fnext;
          }

          // epsilon and t* -> local frame
          Vec3 olbar{}, rlbar{};
          double t_total_bar = tbar[ii];
          {
            Vec3 qv = hit.o_local + hit.r_local * hit.t_star;
            Vec3 qbar = qv * (-hit.epsilon * eps_bar);
            olbar += qbar;
            rlbar += qbar * hit.t_star;
            t_total_bar += dot(qbar, hit.r_local);
            double rr = dot(hit.r_local, hit.r_local);
            double t_raw = -dot(hit.o_local, hit.r_local) / rr;
            if (t_raw > opts.t_near) {  // clamp inactive: t* gradient flows
              olbar += hit.r_local * (-t_total_bar / rr);
              rlbar += (hit.o_local * (-rr) + hit.r_local * (2.0 * dot(hit.o_local, hit.r_local))) *
                       (t_total_bar / (rr * rr));
            }
          }

          Mat3 drot = Mat3::zero();

          // normal -> (rotation, scale, r_local)
          Vec3 nhit_bar = nbar * hit.weight;
          if (extras) nhit_bar += (*extras)[ii].d_n;
          if ((nhit_bar.x != 0 || nhit_bar.y != 0 || nhit_bar.z != 0)) {
            Vec3 v = fr.inv_s.cwise_mul(hit.r_local);
            Vec3 m = -(fr.rot * v);
            double mn = norm(m);
            if (mn > 1e-12) {
              Vec3 u = m / mn;
              double flip = dot(u, rec.dir) < 0 ? 1.0 : -1.0;
              Vec3 mbar = (nhit_bar - u * dot(u, nhit_bar)) * (flip / mn);
              Vec3 vbar = -(fr.rot.tmul(mbar));
              for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) drot(a, b) += mbar[a] * (-v[b]);
              for (int j = 0; j < 3; ++j) {
                rlbar[j] += vbar[j] * fr.inv_s[j];
                gg.ls[j] += vbar[j] * (-fr.inv_s[j] * hit.r_local[j]);
              }
            }
          }

          // local frame -> (center, rotation, log_scale)
          Vec3 u_o = rec.origin - g.center;
          Vec3 d_ol = fr.inv_s.cwise_mul(olbar);
          Vec3 d_rl = fr.inv_s.cwise_mul(rlbar);
          gg.c += -(fr.rot * d_ol);
          for (int j = 0; j < 3; ++j)
            gg.ls[j] += -olbar[j] * hit.o_local[j] - rlbar[j] * hit.r_local[j];
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) drot(a, b) += u_o[a] * d_ol[b] + rec.dir[a] * d_rl[b];

          std::array<double, 4> qb = quat_backward(g.rotation, drot);
          for (int j = 0; j < 4; ++j) gg.q[j] += qb[j];
        }
      }
  });

  // Deterministic reduction in tile order.
  for (const TileGrads& tg : tile_grads) {
    res.scene.k += tg.k_bar;
    for (size_t s = 0; s < tg.ids.size(); ++s) {
      int id = tg.ids[s];
      const GaussGrad& gg = tg.g[s];
      res.scene.center[id] += gg.c;
      for (int j = 0; j < 4; ++j) res.scene.rotation[id][j] += gg.q[j];
      res.scene.log_scale[id] += gg.ls;
      for (int j = 0; j < n_sh; ++j) res.scene.sh[id][j] += gg.sh[j];
      res.f_center_bar[id] += gg.fbar;
    }
  }
  return res;
}

void render_backward_push_delta(const Scene& scene, const RenderOutput& out,
                                const std::vector<Vec3>& delta_grads, SceneGrads& grads) {
  std::vector<PosedFrame> frames = make_frames(scene);
  for (size_t i = 0; i < out.pushes.size(); ++i) {
    const PushQuery& pq = out.pushes[i];
    const Vec3& db = delta_grads[i];
    if (db.x == 0 && db.y == 0 && db.z == 0) continue;
    // delta = dir / |r_local|: gradient flows into r_local, then rotation/scale.
    double rl = norm(pq.r_local);
    double ubar = dot(db, pq.dir);                     // d/d(1/|r_local|)
    Vec3 rlbar = pq.r_local * (-ubar / (rl * rl * rl));
    const PosedFrame& fr = frames[pq.gaussian_id];
    Vec3 d_rl = fr.inv_s.cwise_mul(rlbar);
    Mat3 drot = Mat3::zero();
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) drot(a, b) += pq.dir[a] * d_rl[b];
    std::array<double, 4> qb =
        quat_backward(scene.primitives[pq.gaussian_id].rotation, drot);
    for (int j = 0; j < 4; ++j) grads.rotation[pq.gaussian_id][j] += qb[j];
    for (int j = 0; j < 3; ++j)
      grads.log_scale[pq.gaussian_id][j] += -rlbar[j] * pq.r_local[j];
  }
}

Scene pose_scene(const Scene& canonical, const std::vector<JointModel>& joints, double s) {
  Scene posed = canonical;
  for (auto& g : posed.primitives) {
    if (g.part_label <= 0) continue;
    if (static_cast<size_t>(g.part_label) > joints.size())
      throw RuntimeFailure("pose_scene: part label without a joint");
    const JointModel& j = joints[g.part_label - 1];
    g.center = deform_point(g.center, j, s);
    if (j.kind == JointKind::kRevolute) g.rotation = align_quaternion(g.rotation, j, s);
  }
  return posed;
}

Vec3 push_point_canonical(const Scene& canonical, const std::vector<JointModel>& joints,
                          double s, const PushQuery& pq) {
  const GaussianPrimitive& g = canonical.primitives[pq.gaussian_id];
  Vec3 delta = pq.dir / norm(pq.r_local);
  if (g.part_label <= 0) return g.center + delta;
  const JointModel& j = joints[g.part_label - 1];
  if (j.kind == JointKind::kPrismatic) return g.center + delta;
  double th = theta_at_state(j.theta(), s, 0.5);
  return g.center + rodrigues_matrix(j.axis(), -th) * delta;
}

RenderOutput render_articulated(const Scene& canonical, const SdfNetwork& sdf,
                                const std::vector<JointModel>& joints, double s,
                                const Camera& cam, const RenderOptions& opts) {
  Scene posed = pose_scene(canonical, joints, s);
  RenderOutput out;
  render_gather(posed, cam, opts, out);
  std::vector<Vec3> centers(canonical.size());
  for (size_t i = 0; i < canonical.size(); ++i) centers[i] = canonical.primitives[i].center;
  std::vector<double> f_centers;
  sdf.eval_batch(centers, f_centers);
  std::vector<Vec3> push_pts(out.pushes.size());
  for (size_t i = 0; i < out.pushes.size(); ++i)
    push_pts[i] = push_point_canonical(canonical, joints, s, out.pushes[i]);
  std::vector<double> f_push;
  sdf.eval_batch(push_pts, f_push);
  render_composite(posed, f_centers, f_push, sdf.k(), opts, out);
  return out;
}

void accumulate_densify_stats(const RenderOutput& out, const SceneGrads& grads, Scene& scene) {
  auto& st = scene.densify_stats;
  if (st.size() != scene.size()) st.resize(scene.size());
  std::vector<char> seen(scene.size(), 0);
  for (const RayRecord& rec : out.records)
    for (const RayHit& hit : rec.hits) {
      seen[hit.gaussian_id] = 1;
      if (hit.sigma > st.max_sigma[hit.gaussian_id]) st.max_sigma[hit.gaussian_id] = hit.sigma;
    }
  for (size_t i = 0; i < scene.size(); ++i)
    if (seen[i]) {
      st.view_count[i]++;
      st.grad_accum[i] += norm(grads.center[i]);
    }
}

}  // namespace artsurf
