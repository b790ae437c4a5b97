#include "artsurf/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "artsurf/errors.hpp"
#include "artsurf/parallel.hpp"
#include "artsurf/rng.hpp"

namespace artsurf {

std::vector<Vec3> sample_surface(const TriangleMesh& mesh, size_t n, uint64_t seed) {
  if (mesh.empty()) throw ValidationError("sample_surface: mesh is empty");
  if (n < 1) throw ValidationError("sample_surface: n must be >= 1");
  std::vector<double> cum(mesh.faces.size());
  double total = 0;
  for (size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    total += 0.5 * norm(cross(mesh.vertices[f[1]] - mesh.vertices[f[0]],
                              mesh.vertices[f[2]] - mesh.vertices[f[0]]));
    cum[i] = total;
  }
  if (!(total > 0)) throw ValidationError("sample_surface: mesh has zero area");
  Rng rng(seed, "surface-sample");
  std::vector<Vec3> out(n);
  for (size_t i = 0; i < n; ++i) {
    double u = rng.double_at(3 * i) * total;
    size_t fi = std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
    if (fi >= mesh.faces.size()) fi = mesh.faces.size() - 1;
    double r1 = std::sqrt(rng.double_at(3 * i + 1));
    double r2 = rng.double_at(3 * i + 2);
    const auto& f = mesh.faces[fi];
    out[i] = mesh.vertices[f[0]] * (1.0 - r1) + mesh.vertices[f[1]] * (r1 * (1.0 - r2)) +
             mesh.vertices[f[2]] * (r1 * r2);
  }
  return out;
}

namespace {

double directed_mean_nn(const std::vector<Vec3>& from, const KdTree& to_tree, bool squared) {
  std::vector<double> partial((from.size() + 1023) / 1024, 0.0);
  parallel_for(partial.size(), [&](size_t b) {
    double acc = 0;
    size_t begin = b * 1024, end = std::min(from.size(), begin + 1024);
    for (size_t i = begin; i < end; ++i) {
      double d2;
      to_tree.nearest(from[i], &d2);
      acc += squared ? d2 : std::sqrt(d2);
    }
    partial[b] = acc;
  });
  double total = 0;
  for (double p : partial) total += p;
  return total / static_cast<double>(from.size());
}

}  // namespace

double chamfer_ws(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, bool squared) {
  if (pred.empty() || gt.empty()) throw ValidationError("chamfer: point sets must be nonempty");
  KdTree pred_tree(pred), gt_tree(gt);
  double a = directed_mean_nn(pred, gt_tree, squared);
  double b = directed_mean_nn(gt, pred_tree, squared);
  return 1000.0 * 0.5 * (a + b);
}

namespace {

// Moller-Trumbore; returns t or infinity.
double ray_triangle(const Vec3& o, const Vec3& d, const Vec3& v0, const Vec3& v1,
                    const Vec3& v2) {
  constexpr double kEps = 1e-12;
  Vec3 e1 = v1 - v0, e2 = v2 - v0;
  Vec3 p = cross(d, e2);
  double det = dot(e1, p);
  if (std::fabs(det) < kEps) return std::numeric_limits<double>::infinity();
  double inv = 1.0 / det;
  Vec3 tv = o - v0;
  double u = dot(tv, p) * inv;
  if (u < 0 || u > 1) return std::numeric_limits<double>::infinity();
  Vec3 q = cross(tv, e1);
  double v = dot(d, q) * inv;
  if (v < 0 || u + v > 1) return std::numeric_limits<double>::infinity();
  double t = dot(e2, q) * inv;
  return t > kEps ? t : std::numeric_limits<double>::infinity();
}

}  // namespace

std::vector<Vec3> raycast_sample(const TriangleMesh& mesh, const std::vector<Camera>& cameras,
                                 size_t n_per_view, uint64_t seed) {
  if (cameras.empty()) throw ValidationError("raycast_sample: need at least one camera");
  if (mesh.empty()) return {};
  std::vector<std::vector<Vec3>> per_view(cameras.size());
  parallel_for(cameras.size(), [&](size_t ci) {
    const Camera& cam = cameras[ci];
    Rng rng(seed, "raycast");
    Rng view_rng = rng.fork(ci);
    for (size_t i = 0; i < n_per_view; ++i) {
      double px = view_rng.double_at(2 * i) * cam.width;
      double py = view_rng.double_at(2 * i + 1) * cam.height;
      Ray ray = cam.pixel_ray(std::min(px, cam.width - 1e-9), std::min(py, cam.height - 1e-9));
      double best = std::numeric_limits<double>::infinity();
      for (const auto& f : mesh.faces) {
        double t = ray_triangle(ray.origin, ray.dir, mesh.vertices[f[0]], mesh.vertices[f[1]],
                                mesh.vertices[f[2]]);
        if (t < best) best = t;
      }
      if (std::isfinite(best)) per_view[ci].push_back(ray.point_at(best));
    }
  });
  std::vector<Vec3> out;
  for (const auto& v : per_view) out.insert(out.end(), v.begin(), v.end());
  return out;
}

double chamfer_rs(const TriangleMesh& pred, const TriangleMesh& gt,
                  const std::vector<Camera>& cameras, size_t n_per_view, uint64_t seed,
                  bool squared) {
  auto ps = raycast_sample(pred, cameras, n_per_view, seed);
  auto gs = raycast_sample(gt, cameras, n_per_view, seed);
  if (ps.empty() || gs.empty())
    throw RuntimeFailure("chamfer_rs: a mesh produced no ray samples");
  return chamfer_ws(ps, gs, squared);
}

double f1_score(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double threshold) {
  if (pred.empty() || gt.empty()) throw ValidationError("f1_score: point sets must be nonempty");
  KdTree pred_tree(pred), gt_tree(gt);
  double t2 = threshold * threshold;
  auto frac_within = [&](const std::vector<Vec3>& from, const KdTree& tree) {
    size_t hit = 0;
    for (const Vec3& p : from) {
      double d2;
      tree.nearest(p, &d2);
      if (d2 <= t2) hit++;
    }
    return static_cast<double>(hit) / static_cast<double>(from.size());
  };
  double precision = frac_within(pred, gt_tree);
  double recall = frac_within(gt, pred_tree);
  if (precision + recall <= 0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double emd(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
  if (pred.size() != gt.size())
    throw ValidationError("emd: point sets must have equal cardinality");
  int n = static_cast<int>(pred.size());
  if (n == 0) throw ValidationError("emd: point sets must be nonempty");

  // Jonker-Volgenant style shortest augmenting path assignment on the distance matrix.
  std::vector<double> cost(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost[static_cast<size_t>(i) * n + j] = norm(pred[i] - gt[j]);

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> match_col(n + 1, n);  // p[j]: row matched to column j (n = none)
  std::vector<int> way(n + 1, 0);
  for (int i = 0; i < n; ++i) {
    match_col[n] = i;
    int j0 = n;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = match_col[j0], j1 = -1;
      double delta = kInf;
      for (int j = 0; j < n; ++j) {
        if (used[j]) continue;
        double cur = cost[static_cast<size_t>(i0) * n + j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != n);
    do {
      int j1 = way[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    } while (j0 != n);
  }
  double total = 0;
  for (int j = 0; j < n; ++j)
    if (match_col[j] != n) total += cost[static_cast<size_t>(match_col[j]) * n + j];
  return total / static_cast<double>(n);
}

MetricReport evaluate_meshes(const TriangleMesh& pred, const TriangleMesh& gt,
                             const std::vector<Camera>& cameras, const EvalOptions& opts) {
  if (pred.empty() || gt.empty())
    throw ValidationError("evaluate_meshes: meshes must be nonempty");
  MetricReport rep;
  rep.seed = opts.seed;
  rep.f1_threshold = opts.f1_threshold;
  auto pred_pts = sample_surface(pred, opts.surface_samples, opts.seed);
  auto gt_pts = sample_surface(gt, opts.surface_samples, opts.seed + 1);
  rep.n_pred = pred_pts.size();
  rep.n_gt = gt_pts.size();
  rep.cd_ws = chamfer_ws(pred_pts, gt_pts, opts.squared_chamfer);
  rep.cd_rs = chamfer_rs(pred, gt, cameras, opts.rays_per_view, opts.seed, opts.squared_chamfer);
  rep.f1 = f1_score(pred_pts, gt_pts, opts.f1_threshold);
  size_t ne = std::min(opts.emd_samples, std::min(pred_pts.size(), gt_pts.size()));
  std::vector<Vec3> pe(pred_pts.begin(), pred_pts.begin() + ne);
  std::vector<Vec3> ge(gt_pts.begin(), gt_pts.begin() + ne);
  rep.emd = emd(pe, ge);
  return rep;
}

void save_metric_report(const std::string& path, const MetricReport& rep) {
  nlohmann::json j;
  j["cd_ws"] = rep.cd_ws;
  j["cd_rs"] = rep.cd_rs;
  j["f1"] = rep.f1;
  j["emd"] = rep.emd;
  j["n_pred"] = rep.n_pred;
  j["n_gt"] = rep.n_gt;
  j["threshold"] = rep.f1_threshold;
  j["seed"] = rep.seed;
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << j.dump(1) << "\n";
}

}  // namespace artsurf
