#include "artsurf/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "artsurf/errors.hpp"
#include "artsurf/parallel.hpp"
#include "artsurf/rng.hpp"

namespace artsurf {

namespace fs = std::filesystem;
using json = nlohmann::json;

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0)) throw ValidationError(std::string(name) + " must be positive");
  };
  if (iterations_stage1 < 1 || iterations_stage2 < 1)
    throw ValidationError("iteration counts must be positive");
  if (warmup_iters < 1 || warmup_iters >= iterations_stage2)
    throw ValidationError("warmup_iters must lie in [1, iterations_stage2)");
  if (reseg_interval < 1) throw ValidationError("reseg_interval must be positive");
  positive(lr_centers, "lr_centers");
  positive(lr_centers_final, "lr_centers_final");
  positive(lr_rotations, "lr_rotations");
  positive(lr_scales, "lr_scales");
  positive(lr_sh, "lr_sh");
  positive(lr_sdf, "lr_sdf");
  positive(lr_k, "lr_k");
  positive(lr_joint, "lr_joint");
  positive(lr_warmup_centers, "lr_warmup_centers");
  if (densify_interval < 1) throw ValidationError("densify_interval must be positive");
  positive(densify_grad_threshold, "densify_grad_threshold");
  positive(prune_opacity, "prune_opacity");
  positive(split_scale_frac, "split_scale_frac");
  if (densify_end_frac < 0 || densify_end_frac > 1)
    throw ValidationError("densify_end_frac must lie in [0,1]");
  if (init_gaussians < 1 || max_gaussians < init_gaussians)
    throw ValidationError("init_gaussians must lie in [1, max_gaussians]");
  weights.validate();
  if (sdf_hidden_layers < 1 || sdf_hidden_width < 1 || pe_frequencies < 0)
    throw ValidationError("sdf architecture fields must be positive");
  if (eikonal_samples < 0 || normal_samples < 0 || unbias_max_samples < 0)
    throw ValidationError("sample counts must be nonnegative");
  if (unbias_weight_threshold < 0 || unbias_weight_threshold >= 1)
    throw ValidationError("unbias_weight_threshold must lie in [0,1)");
  if (psnr_floor < 0) throw ValidationError("psnr_floor must be nonnegative");
  if (holdout_every < 0) throw ValidationError("holdout_every must be nonnegative");
  positive(motion_floor, "motion_floor");
  if (max_parts < 1) throw ValidationError("max_parts must be >= 1");
  positive(clip_norm, "clip_norm");
  if (log_every < 1) throw ValidationError("log_every must be positive");
}

Dataset load_dataset_dir(const std::string& dir) {
  Dataset ds;
  ds.cameras = load_cameras_json((fs::path(dir) / "cameras.json").string());
  for (auto& cam : ds.cameras) {
    if (cam.file.empty()) throw ValidationError(dir + "/cameras.json: view missing \"file\"");
    ds.images.push_back(load_png((fs::path(dir) / cam.file).string()));
    const Image& im = ds.images.back();
    if (im.width != cam.width || im.height != cam.height)
      throw ValidationError(dir + "/" + cam.file + ": image size does not match camera");
  }
  return ds;
}

SceneInit estimate_scene_init(const std::vector<Camera>& cams) {
  if (cams.empty()) throw ValidationError("estimate_scene_init: no cameras");
  // Least-squares intersection of the optical axes.
  Mat3 a = Mat3::zero();
  Vec3 b{};
  for (const Camera& cam : cams) {
    Vec3 d = cam.optical_axis();
    Mat3 proj = Mat3::identity() - Mat3::outer(d, d);
    a = a + proj;
    b += proj * cam.center();
  }
  // Solve a * x = b via the adjugate (a is symmetric positive definite here).
  double det = a.det();
  if (std::fabs(det) < 1e-12) throw ValidationError("camera axes are degenerate");
  Mat3 inv;
  inv.m = {a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1), a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2),
           a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1), a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2),
           a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0), a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2),
           a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0), a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1),
           a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)};
  for (double& v : inv.m) v /= det;
  SceneInit si;
  si.center = inv * b;
  std::vector<double> radii;
  for (const Camera& cam : cams) {
    double half_fov = std::atan(std::fmin(cam.width / (2 * cam.fx), cam.height / (2 * cam.fy)));
    radii.push_back(norm(cam.center() - si.center) * std::tan(half_fov));
  }
  std::nth_element(radii.begin(), radii.begin() + radii.size() / 2, radii.end());
  si.radius = 0.8 * radii[radii.size() / 2];
  return si;
}

Scene init_scene(const SceneInit& si, int n, int sh_degree, uint64_t seed) {
  Scene scene;
  scene.sh_degree = sh_degree;
  Rng rng(seed, "scene-init");
  double r = 0.9 * si.radius;
  double sigma0 = si.radius * std::cbrt(4.0 / std::fmax(1.0, static_cast<double>(n)));
  for (int i = 0; i < n; ++i) {
    Rng g = rng.fork(static_cast<uint64_t>(i));
    Vec3 p;
    do {
      p = {g.uniform(-r, r), g.uniform(-r, r), g.uniform(-r, r)};
    } while (norm(p) > r);
    GaussianPrimitive prim;
    prim.center = si.center + p;
    prim.rotation = UnitQuaternion::identity();
    double ls = std::log(sigma0);
    prim.log_scale = {ls, ls, ls};
    prim.sh.assign(3 * (sh_degree + 1) * (sh_degree + 1), 0.0);
    scene.primitives.push_back(prim);
  }
  scene.densify_stats.resize(scene.size());
  return scene;
}

namespace {

Vec3 deformed_sdf_gradient(const Vec3& g_can, const JointModel* joint, double s) {
  if (!joint || joint->kind == JointKind::kPrismatic) return g_can;
  double th = theta_at_state(joint->theta(), s, 0.5);
  return rodrigues_matrix(joint->axis(), th) * g_can;
}

}  // namespace

IterationResult evaluate_iteration(const Scene& scene, const SdfNetwork& sdf,
                                   const std::vector<JointModel>& joints, double s,
                                   const Camera& cam, const Image& target,
                                   const TrainConfig& cfg, uint64_t iter, bool compute_grads,
                                   const FrozenSamples* frozen, bool color_only) {
  IterationResult res;
  RenderOptions ropts;
  ropts.activation = cfg.bell_activation ? OpacityActivation::kBell : OpacityActivation::kSigmoid;
  const LossWeights& lw = cfg.weights;
  double k = sdf.k();
  size_t n = scene.size();

  Vec3 scene_center = cfg.scene_radius > 0 ? cfg.scene_center : scene.bounds().center();
  double scene_radius =
      cfg.scene_radius > 0 ? cfg.scene_radius : 0.5 * std::fmax(scene.bounds().diagonal(), 1e-6);
  double depth_span = cfg.depth_span > 0 ? cfg.depth_span : 2.6 * scene_radius;

  // ---- forward render ----
  Scene posed = pose_scene(scene, joints, s);
  RenderOutput& out = res.render;
  render_gather(posed, cam, ropts, out);
  std::vector<Vec3> canon_centers(n);
  for (size_t i = 0; i < n; ++i) canon_centers[i] = scene.primitives[i].center;
  std::vector<double> f_centers;
  sdf.eval_batch(canon_centers, f_centers);
  std::vector<Vec3> push_pts(out.pushes.size());
  for (size_t i = 0; i < out.pushes.size(); ++i)
    push_pts[i] = push_point_canonical(scene, joints, s, out.pushes[i]);
  std::vector<double> f_push;
  sdf.eval_batch(push_pts, f_push);
  render_composite(posed, f_centers, f_push, k, ropts, out);

  // ---- losses ----
  Image g_l1, g_ssim;
  res.report.l1 = loss_l1(out.rgb, target, compute_grads ? &g_l1 : nullptr);
  res.report.dssim = lw.lambda_c_ssim > 0
                         ? loss_dssim(out.rgb, target, compute_grads ? &g_ssim : nullptr)
                         : 0.0;

  HitExtras extras;
  bool want_extras = compute_grads && !color_only;
  if (want_extras) extras.resize(out.records.size());

  if (!color_only)
    res.report.distortion = loss_distortion(out.records, depth_span,
                                            want_extras ? lw.lambda_dist : 0.0,
                                            want_extras ? &extras : nullptr);

  // unbias samples (canonical frame, detached)
  std::vector<UnbiasSample> usamples;
  std::vector<double> f_unbias, fbar_unbias;
  if (!color_only) {
    if (frozen && frozen->has_unbias) {
      usamples = frozen->unbias;
    } else {
      for (const RayRecord& rec : out.records)
        for (const RayHit& hit : rec.hits) {
          if (hit.weight <= cfg.unbias_weight_threshold) continue;
          Vec3 p = rec.origin + rec.dir * hit.t_star;
          int part = scene.primitives[hit.gaussian_id].part_label;
          if (part > 0) p = inverse_deform_point(p, joints[part - 1], s);
          usamples.push_back({p, hit.weight});
        }
      if (cfg.unbias_max_samples > 0 &&
          usamples.size() > static_cast<size_t>(cfg.unbias_max_samples)) {
        Rng pick(cfg.seed, "unbias-subsample");
        Rng it_pick = pick.fork(iter);
        std::vector<size_t> idx(usamples.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (size_t i = 0; i < static_cast<size_t>(cfg.unbias_max_samples); ++i) {
          size_t j = i + it_pick.at(i) % (idx.size() - i);
          std::swap(idx[i], idx[j]);
        }
        std::vector<UnbiasSample> sub(cfg.unbias_max_samples);
        for (int i = 0; i < cfg.unbias_max_samples; ++i) sub[i] = usamples[idx[i]];
        usamples = std::move(sub);
      }
    }
    std::vector<Vec3> upts(usamples.size());
    for (size_t i = 0; i < usamples.size(); ++i) upts[i] = usamples[i].point;
    sdf.eval_batch(upts, f_unbias);
    res.report.unbias =
        loss_unbias_value(usamples, f_unbias, compute_grads ? &fbar_unbias : nullptr);
  }

  // eikonal samples
  std::vector<Vec3> eik_pts;
  std::vector<Vec3> eik_grads, eik_dgrads;
  if (!color_only && cfg.eikonal_samples > 0 && n > 0) {
    if (frozen && frozen->has_eikonal) {
      eik_pts = frozen->eikonal_points;
    } else {
      Rng rng(cfg.seed, "eikonal");
      Rng it_rng = rng.fork(iter);
      int half = cfg.eikonal_samples / 2;
      for (int i = 0; i < half; ++i) {
        Rng sr = it_rng.fork(static_cast<uint64_t>(i));
        size_t gid = sr.index(n);
        eik_pts.push_back(canon_centers[gid] +
                          Vec3{sr.normal(), sr.normal(), sr.normal()} * 0.01);
      }
      double ext = 1.1 * scene_radius;
      for (int i = half; i < cfg.eikonal_samples; ++i) {
        Rng sr = it_rng.fork(static_cast<uint64_t>(i) + 0x10000);
        eik_pts.push_back(scene_center + Vec3{sr.uniform(-ext, ext), sr.uniform(-ext, ext),
                                              sr.uniform(-ext, ext)});
      }
    }
    sdf.gradient_batch(eik_pts, eik_grads);
    res.report.eikonal = loss_eikonal(eik_grads, compute_grads ? &eik_dgrads : nullptr);
  }

  // normal pairs: qualifying hits, optionally subsampled
  struct PairRef {
    size_t ray;
    size_t hit;
  };
  std::vector<PairRef> pairs;
  std::vector<Vec3> pair_normals, pair_grads_def;
  std::vector<Vec3> unique_grad_canon;
  std::vector<int> unique_ids;
  std::vector<int> gauss_slot;
  if (!color_only && cfg.normal_samples > 0) {
    for (size_t r = 0; r < out.records.size(); ++r)
      for (size_t h = 0; h < out.records[r].hits.size(); ++h)
        if (out.records[r].hits[h].weight > cfg.unbias_weight_threshold &&
            norm2(out.records[r].hits[h].normal) > 0.5)
          pairs.push_back({r, h});
    if (pairs.size() > static_cast<size_t>(cfg.normal_samples)) {
      Rng pick(cfg.seed, "normal-subsample");
      Rng it_pick = pick.fork(iter);
      std::vector<size_t> idx(pairs.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (size_t i = 0; i < static_cast<size_t>(cfg.normal_samples); ++i) {
        size_t j = i + it_pick.at(i) % (idx.size() - i);
        std::swap(idx[i], idx[j]);
      }
      idx.resize(cfg.normal_samples);
      std::sort(idx.begin(), idx.end());
      std::vector<PairRef> sub;
      for (size_t i : idx) sub.push_back(pairs[i]);
      pairs = std::move(sub);
    }
    gauss_slot.assign(n, -1);
    for (const PairRef& pr : pairs) {
      int gid = out.records[pr.ray].hits[pr.hit].gaussian_id;
      if (gauss_slot[gid] < 0) {
        gauss_slot[gid] = static_cast<int>(unique_ids.size());
        unique_ids.push_back(gid);
      }
    }
    std::vector<Vec3> upts(unique_ids.size());
    for (size_t i = 0; i < unique_ids.size(); ++i) upts[i] = canon_centers[unique_ids[i]];
    sdf.gradient_batch(upts, unique_grad_canon);
    pair_normals.resize(pairs.size());
    pair_grads_def.resize(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
      const RayHit& hit = out.records[pairs[i].ray].hits[pairs[i].hit];
      pair_normals[i] = hit.normal;
      int part = scene.primitives[hit.gaussian_id].part_label;
      const JointModel* joint = part > 0 ? &joints[part - 1] : nullptr;
      pair_grads_def[i] =
          deformed_sdf_gradient(unique_grad_canon[gauss_slot[hit.gaussian_id]], joint, s);
    }
  }
  std::vector<Vec3> dn, dg;
  if (!pairs.empty())
    res.report.normal = loss_normal(pair_normals, pair_grads_def,
                                    compute_grads ? &dn : nullptr,
                                    compute_grads ? &dg : nullptr);

  combine_losses(res.report, lw);
  if (color_only) {
    res.report.total = (1.0 - lw.lambda_c_ssim) * res.report.l1 +
                       lw.lambda_c_ssim * res.report.dssim;
  }

  if (!compute_grads) return res;

  // ---- backward ----
  RenderAdjoints adj;
  adj.d_rgb = Image(out.width, out.height, 3);
  for (size_t i = 0; i < adj.d_rgb.data.size(); ++i)
    adj.d_rgb.data[i] = (1.0 - lw.lambda_c_ssim) * g_l1.data[i] +
                        (lw.lambda_c_ssim > 0 ? lw.lambda_c_ssim * g_ssim.data[i] : 0.0);

  // normal-loss adjoints enter through the per-hit extras
  std::vector<JointGrads> jgrads(joints.size());
  if (!pairs.empty()) {
    for (size_t i = 0; i < pairs.size(); ++i) {
      extras[pairs[i].ray][pairs[i].hit].d_n += dn[i] * lw.lambda_normal;
    }
  }
  if (want_extras) adj.hit_extras = &extras;

  RenderBackwardResult rb = render_backward(posed, out, adj, k, ropts);

  // SDF backward items; x-gradient slots: [0, n) canonical centers, [n, n+P) pushes.
  std::vector<SdfBackwardItem> items;
  std::vector<Vec3> p_accum(n, Vec3{});
  if (!pairs.empty()) {
    for (size_t i = 0; i < pairs.size(); ++i) {
      const RayHit& hit = out.records[pairs[i].ray].hits[pairs[i].hit];
      int gid = hit.gaussian_id;
      int part = scene.primitives[gid].part_label;
      Vec3 gbar = dg[i] * lw.lambda_normal;  // upstream on the deformed gradient
      if (part > 0 && joints[part - 1].kind == JointKind::kRevolute) {
        const JointModel& joint = joints[part - 1];
        double th = theta_at_state(joint.theta(), s, 0.5);
        Vec3 a = joint.axis();
        Mat3 rot = rodrigues_matrix(a, th);
        Mat3 kmat = Mat3::skew(a);
        Mat3 dr = kmat * std::cos(th) + (kmat * kmat) * std::sin(th);
        const Vec3& g_can = unique_grad_canon[gauss_slot[gid]];
        add_theta_s_gradient(joint, s, dot(gbar, dr * g_can), jgrads[part - 1]);
        p_accum[gid] += rot.tmul(gbar);
      } else {
        p_accum[gid] += gbar;
      }
    }
  }
  for (size_t g = 0; g < n; ++g) {
    bool has_f = rb.f_center_bar[g] != 0.0;
    bool has_p = p_accum[g].x != 0 || p_accum[g].y != 0 || p_accum[g].z != 0;
    if (!has_f && !has_p) continue;
    items.push_back({canon_centers[g], rb.f_center_bar[g], p_accum[g], static_cast<int>(g)});
  }
  for (size_t i = 0; i < out.pushes.size(); ++i)
    if (rb.f_push_bar[i] != 0.0)
      items.push_back({push_pts[i], rb.f_push_bar[i], Vec3{}, static_cast<int>(n + i)});
  for (size_t i = 0; i < usamples.size(); ++i)
    if (fbar_unbias[i] != 0.0)
      items.push_back({usamples[i].point, lw.lambda_unbias * fbar_unbias[i], Vec3{}, -1});
  for (size_t i = 0; i < eik_pts.size(); ++i) {
    Vec3 p = eik_dgrads[i] * lw.lambda_eik;
    if (p.x != 0 || p.y != 0 || p.z != 0) items.push_back({eik_pts[i], 0.0, p, -1});
  }

  res.sdf_grads.init_like(sdf);
  std::vector<Vec3> xg(n + out.pushes.size(), Vec3{});
  sdf_backward(sdf, items, res.sdf_grads, &xg);

  // Push-point position chains: canonical-center part plus the delta/theta chains.
  std::vector<Vec3> delta_grads(out.pushes.size(), Vec3{});
  for (size_t i = 0; i < out.pushes.size(); ++i) {
    Vec3 xgp = xg[n + i];
    if (xgp.x == 0 && xgp.y == 0 && xgp.z == 0) continue;
    const PushQuery& pq = out.pushes[i];
    int gid = pq.gaussian_id;
    xg[gid] += xgp;  // d p_canon / d x_canon = I
    int part = scene.primitives[gid].part_label;
    if (part > 0 && joints[part - 1].kind == JointKind::kRevolute) {
      const JointModel& joint = joints[part - 1];
      double th = theta_at_state(joint.theta(), s, 0.5);
      Vec3 a = joint.axis();
      Vec3 delta = pq.dir / norm(pq.r_local);
      Mat3 m_inv = rodrigues_matrix(a, -th);
      delta_grads[i] = m_inv.tmul(xgp);
      // p = x + M(-th) delta: dM(-th)/dth = -(cos(th) K - sin(th) K^2)
      Mat3 kmat = Mat3::skew(a);
      Mat3 dm = kmat * (-std::cos(th)) + (kmat * kmat) * std::sin(th);
      add_theta_s_gradient(joint, s, dot(xgp, dm * delta), jgrads[part - 1]);
    } else {
      delta_grads[i] = xgp;
    }
  }
  render_backward_push_delta(posed, out, delta_grads, rb.scene);

  // Posed-space gradients -> canonical parameters and joints.
  res.scene_grads.init(scene);
  for (size_t g = 0; g < n; ++g) {
    int part = scene.primitives[g].part_label;
    Vec3 pc = rb.scene.center[g];
    if (part > 0) {
      const JointModel& joint = joints[part - 1];
      res.scene_grads.center[g] +=
          deform_backward(canon_centers[g], joint, s, pc, jgrads[part - 1]);
      if (joint.kind == JointKind::kRevolute) {
        std::array<double, 4> local = align_quaternion_backward(
            scene.primitives[g].rotation, joint, s, rb.scene.rotation[g], jgrads[part - 1]);
        for (int j = 0; j < 4; ++j) res.scene_grads.rotation[g][j] += local[j];
      } else {
        for (int j = 0; j < 4; ++j) res.scene_grads.rotation[g][j] += rb.scene.rotation[g][j];
      }
    } else {
      res.scene_grads.center[g] += pc;
      for (int j = 0; j < 4; ++j) res.scene_grads.rotation[g][j] += rb.scene.rotation[g][j];
    }
    res.scene_grads.center[g] += xg[g];
    res.scene_grads.log_scale[g] += rb.scene.log_scale[g];
    for (size_t j = 0; j < rb.scene.sh[g].size(); ++j)
      res.scene_grads.sh[g][j] += rb.scene.sh[g][j];
  }
  res.log_k_grad = rb.scene.k * k;  // chain through k = exp(log_k)
  res.joint_grads = std::move(jgrads);
  return res;
}

// --------------------------------------------------------------------------------
// optimizer plumbing

namespace {

struct OptimState {
  AdamState centers, rotations, scales, sh, sdf, log_k, joints;

  void init(const Scene& scene, const SdfNetwork& net, size_t n_joints) {
    size_t n = scene.size();
    centers.resize(3 * n);
    rotations.resize(4 * n);
    scales.resize(3 * n);
    sh.resize(n * 3 * scene.sh_coeffs());
    sdf.resize(net.num_params());
    log_k.resize(1);
    joints.resize(11 * n_joints);
  }
};

void flatten_scene(const Scene& s, std::vector<double>& c, std::vector<double>& r,
                   std::vector<double>& sc, std::vector<double>& sh) {
  size_t n = s.size();
  int nsh = 3 * s.sh_coeffs();
  c.resize(3 * n);
  r.resize(4 * n);
  sc.resize(3 * n);
  sh.resize(n * nsh);
  for (size_t i = 0; i < n; ++i) {
    const auto& g = s.primitives[i];
    for (int j = 0; j < 3; ++j) c[3 * i + j] = g.center[j];
    r[4 * i] = g.rotation.w;
    r[4 * i + 1] = g.rotation.x;
    r[4 * i + 2] = g.rotation.y;
    r[4 * i + 3] = g.rotation.z;
    for (int j = 0; j < 3; ++j) sc[3 * i + j] = g.log_scale[j];
    for (int j = 0; j < nsh; ++j) sh[i * nsh + j] = g.sh[j];
  }
}

void unflatten_scene(Scene& s, const std::vector<double>& c, const std::vector<double>& r,
                     const std::vector<double>& sc, const std::vector<double>& sh) {
  size_t n = s.size();
  int nsh = 3 * s.sh_coeffs();
  for (size_t i = 0; i < n; ++i) {
    auto& g = s.primitives[i];
    g.center = {c[3 * i], c[3 * i + 1], c[3 * i + 2]};
    g.rotation = UnitQuaternion(r[4 * i], r[4 * i + 1], r[4 * i + 2], r[4 * i + 3]);
    g.log_scale = {sc[3 * i], sc[3 * i + 1], sc[3 * i + 2]};
    for (int j = 0; j < nsh; ++j) g.sh[j] = sh[i * nsh + j];
  }
}

void flatten_scene_grads(const SceneGrads& g, std::vector<double>& c, std::vector<double>& r,
                         std::vector<double>& sc, std::vector<double>& sh) {
  size_t n = g.center.size();
  size_t nsh = n ? g.sh[0].size() : 0;
  c.resize(3 * n);
  r.resize(4 * n);
  sc.resize(3 * n);
  sh.resize(n * nsh);
  for (size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) c[3 * i + j] = g.center[i][j];
    for (int j = 0; j < 4; ++j) r[4 * i + j] = g.rotation[i][j];
    for (int j = 0; j < 3; ++j) sc[3 * i + j] = g.log_scale[i][j];
    for (size_t j = 0; j < nsh; ++j) sh[i * nsh + j] = g.sh[i][j];
  }
}

void flatten_joints(const std::vector<JointModel>& js, std::vector<double>& out) {
  out.resize(11 * js.size());
  for (size_t i = 0; i < js.size(); ++i) {
    const JointModel& j = js[i];
    double* p = &out[11 * i];
    p[0] = j.pivot.x;
    p[1] = j.pivot.y;
    p[2] = j.pivot.z;
    p[3] = j.q.w;
    p[4] = j.q.x;
    p[5] = j.q.y;
    p[6] = j.q.z;
    p[7] = j.direction.x;
    p[8] = j.direction.y;
    p[9] = j.direction.z;
    p[10] = j.distance;
  }
}

void unflatten_joints(std::vector<JointModel>& js, const std::vector<double>& in) {
  for (size_t i = 0; i < js.size(); ++i) {
    JointModel& j = js[i];
    const double* p = &in[11 * i];
    j.pivot = {p[0], p[1], p[2]};
    j.q = UnitQuaternion::raw(p[3], p[4], p[5], p[6]);
    j.direction = {p[7], p[8], p[9]};
    j.distance = p[10];
    j.project();
  }
}

void flatten_joint_grads(const std::vector<JointGrads>& js, std::vector<double>& out) {
  out.resize(11 * js.size());
  for (size_t i = 0; i < js.size(); ++i) {
    const JointGrads& j = js[i];
    double* p = &out[11 * i];
    p[0] = j.pivot.x;
    p[1] = j.pivot.y;
    p[2] = j.pivot.z;
    for (int q = 0; q < 4; ++q) p[3 + q] = j.q[q];
    p[7] = j.direction.x;
    p[8] = j.direction.y;
    p[9] = j.direction.z;
    p[10] = j.distance;
  }
}

double total_grad_sqnorm(const IterationResult& res, const std::vector<double>& sdf_flat) {
  double s = res.scene_grads.squared_norm() + res.log_k_grad * res.log_k_grad;
  for (double v : sdf_flat) s += v * v;
  for (const JointGrads& j : res.joint_grads) s += j.squared_norm();
  return s;
}

struct UpdateScales {
  double lr_centers;
  bool centers_only = false;
  bool with_joints = false;
};

void apply_updates(Scene& scene, SdfNetwork& sdf, std::vector<JointModel>& joints,
                   IterationResult& res, OptimState& opt, const TrainConfig& cfg,
                   const UpdateScales& us) {
  std::vector<double> sdf_flat;
  res.sdf_grads.to_flat(sdf_flat);
  double gn2 = total_grad_sqnorm(res, sdf_flat);
  if (!std::isfinite(gn2)) throw RuntimeFailure("non-finite gradient norm");
  double scale = 1.0;
  if (gn2 > cfg.clip_norm * cfg.clip_norm) scale = cfg.clip_norm / std::sqrt(gn2);
  if (scale != 1.0) {
    res.scene_grads.scale(scale);
    for (double& v : sdf_flat) v *= scale;
    res.log_k_grad *= scale;
    for (JointGrads& j : res.joint_grads) j.scale(scale);
  }

  std::vector<double> pc, pr, ps, psh, gc, gr, gs, gsh;
  flatten_scene(scene, pc, pr, ps, psh);
  flatten_scene_grads(res.scene_grads, gc, gr, gs, gsh);
  adam_step(pc, gc, opt.centers, us.lr_centers);
  if (!us.centers_only) {
    adam_step(pr, gr, opt.rotations, cfg.lr_rotations);
    adam_step(ps, gs, opt.scales, cfg.lr_scales);
    adam_step(psh, gsh, opt.sh, cfg.lr_sh);
    std::vector<double> sdf_params;
    sdf.get_params(sdf_params);
    adam_step(sdf_params, sdf_flat, opt.sdf, cfg.lr_sdf);
    sdf.set_params(sdf_params);
    std::vector<double> lk{sdf.log_k()}, lkg{res.log_k_grad};
    adam_step(lk, lkg, opt.log_k, cfg.lr_k);
    sdf.set_log_k(lk[0]);
  }
  unflatten_scene(scene, pc, pr, ps, psh);  // quaternions renormalized on write-back

  if (us.with_joints && !joints.empty()) {
    std::vector<double> jp, jg;
    flatten_joints(joints, jp);
    flatten_joint_grads(res.joint_grads, jg);
    adam_step(jp, jg, opt.joints, cfg.lr_joint);
    unflatten_joints(joints, jp);  // renormalizes and clamps theta
  }
}

void remap_adam_after_densify(OptimState& opt, const std::vector<int>& parent, int sh_len) {
  auto remap = [&](AdamState& st, int per) {
    AdamState next;
    next.resize(parent.size() * per);
    next.step = st.step;
    for (size_t i = 0; i < parent.size(); ++i)
      for (int j = 0; j < per; ++j) {
        next.m[i * per + j] = st.m[parent[i] * per + j];
        next.v[i * per + j] = st.v[parent[i] * per + j];
      }
    st = std::move(next);
  };
  remap(opt.centers, 3);
  remap(opt.rotations, 4);
  remap(opt.scales, 3);
  remap(opt.sh, sh_len);
}

void check_finite(const LossReport& rep, int64_t iter) {
  const double vals[] = {rep.total, rep.l1,      rep.dssim,     rep.unbias,
                         rep.normal, rep.eikonal, rep.distortion};
  for (double v : vals)
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "NaN/Inf in loss at iteration " << iter << ": total=" << rep.total
         << " l1=" << rep.l1 << " dssim=" << rep.dssim << " unbias=" << rep.unbias
         << " normal=" << rep.normal << " eikonal=" << rep.eikonal
         << " distortion=" << rep.distortion;
      throw RuntimeFailure(os.str());
    }
}

std::vector<int> train_view_indices(size_t n_views, int holdout_every) {
  std::vector<int> idx;
  for (size_t i = 0; i < n_views; ++i)
    if (holdout_every <= 0 || i % holdout_every != 0) idx.push_back(static_cast<int>(i));
  if (idx.empty())
    for (size_t i = 0; i < n_views; ++i) idx.push_back(static_cast<int>(i));
  return idx;
}

std::vector<int> holdout_view_indices(size_t n_views, int holdout_every) {
  std::vector<int> idx;
  if (holdout_every > 0)
    for (size_t i = 0; i < n_views; i += holdout_every) idx.push_back(static_cast<int>(i));
  if (idx.empty()) idx.push_back(0);
  return idx;
}

}  // namespace

TrainLog::TrainLog(const std::string& path, bool json_lines) : path_(path), json_(json_lines) {
  if (path_.empty()) return;
  std::ofstream out(path_);
  if (!out) throw RuntimeFailure("cannot write training log: " + path_);
  if (!json_) out << "iter,total,l1,dssim,unbias,normal,eikonal,distortion,num_gaussians\n";
}

void TrainLog::append(const TrainLogRow& row) {
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::app);
  if (json_) {
    json j;
    j["iter"] = row.iter;
    j["total"] = row.report.total;
    j["l1"] = row.report.l1;
    j["dssim"] = row.report.dssim;
    j["unbias"] = row.report.unbias;
    j["normal"] = row.report.normal;
    j["eikonal"] = row.report.eikonal;
    j["distortion"] = row.report.distortion;
    j["num_gaussians"] = row.num_gaussians;
    out << j.dump() << "\n";
  } else {
    out << row.iter << "," << row.report.total << "," << row.report.l1 << ","
        << row.report.dssim << "," << row.report.unbias << "," << row.report.normal << ","
        << row.report.eikonal << "," << row.report.distortion << "," << row.num_gaussians
        << "\n";
  }
}

double holdout_psnr(const Scene& scene, const SdfNetwork& sdf,
                    const std::vector<JointModel>& joints, double s, const Dataset& data,
                    const TrainConfig& cfg) {
  RenderOptions ropts;
  ropts.activation = cfg.bell_activation ? OpacityActivation::kBell : OpacityActivation::kSigmoid;
  auto idx = holdout_view_indices(data.cameras.size(), cfg.holdout_every);
  double acc = 0;
  for (int i : idx) {
    RenderOutput out = render_articulated(scene, sdf, joints, s, data.cameras[i], ropts);
    acc += psnr(out.rgb, data.images[i]);
  }
  return acc / static_cast<double>(idx.size());
}

Stage1Result train_reconstruction(const Dataset& state0, const TrainConfig& cfg_in,
                                  TrainLog* log) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (state0.cameras.size() < 8)
    throw ValidationError("train_reconstruction: need at least 8 posed views");

  SceneInit si = estimate_scene_init(state0.cameras);
  cfg.scene_center = si.center;
  cfg.scene_radius = si.radius;
  cfg.depth_span = 2.6 * si.radius;

  Stage1Result res;
  res.scene = init_scene(si, cfg.init_gaussians, 2, cfg.seed);
  std::vector<int> hidden(cfg.sdf_hidden_layers, cfg.sdf_hidden_width);
  res.sdf = SdfNetwork::make(hidden, cfg.pe_frequencies, cfg.seed);
  geometric_init(res.sdf, si.center, 0.5, cfg.seed);
  res.sdf.set_log_k(std::log(0.1));

  OptimState opt;
  opt.init(res.scene, res.sdf, 0);
  std::vector<int> train_views = train_view_indices(state0.cameras.size(), cfg.holdout_every);
  Rng view_rng(cfg.seed, "stage1-views");
  std::vector<JointModel> no_joints;

  int densify_last = cfg.iterations_stage1 * cfg.densify_end_frac;
  for (int iter = 0; iter < cfg.iterations_stage1; ++iter) {
    int view = train_views[view_rng.at(iter) % train_views.size()];
    IterationResult it = evaluate_iteration(res.scene, res.sdf, no_joints, 0.0,
                                            state0.cameras[view], state0.images[view], cfg,
                                            static_cast<uint64_t>(iter), true);
    check_finite(it.report, iter);
    accumulate_densify_stats(it.render, it.scene_grads, res.scene);

    UpdateScales us;
    us.lr_centers = lr_exp_decay(cfg.lr_centers, cfg.lr_centers_final, iter,
                                 cfg.iterations_stage1);
    apply_updates(res.scene, res.sdf, no_joints, it, opt, cfg, us);

    if (log && (iter % cfg.log_every == 0 || iter + 1 == cfg.iterations_stage1))
      log->append({iter, it.report, res.scene.size()});

    bool densify_now = iter >= cfg.densify_start && iter <= densify_last &&
                       (iter + 1) % cfg.densify_interval == 0;
    if (densify_now) {
      DensifyOptions dopts;
      dopts.grad_threshold = cfg.densify_grad_threshold;
      dopts.split_scale = cfg.split_scale_frac * 2.0 * si.radius;
      dopts.prune_opacity = cfg.prune_opacity;
      dopts.max_gaussians = cfg.max_gaussians;
      DensifyReport rep = densify_and_prune(res.scene, dopts);
      if (!rep.rejected && (rep.clones || rep.splits || rep.pruned))
        remap_adam_after_densify(opt, rep.parent, 3 * res.scene.sh_coeffs());
    }
  }

  res.holdout_psnr = holdout_psnr(res.scene, res.sdf, no_joints, 0.0, state0, cfg);
  if (res.holdout_psnr < cfg.psnr_floor) {
    std::ostringstream os;
    os << "reconstruction PSNR " << res.holdout_psnr << " dB below the configured floor "
       << cfg.psnr_floor << " dB";
    throw RuntimeFailure(os.str());
  }
  return res;
}

namespace {

// Moves a part's canonical geometry between the state-0 pose and the canonical
// (midpoint) pose. dir = +1: state0 -> canonical (on admission); -1: canonical ->
// state0 (on demotion / baking).
void rebase_revolute_part(Scene& scene, const JointModel& joint, int part, int dir) {
  double th = -dir * joint.theta();  // +1: rotate by -theta; -1: rotate by +theta
  Vec3 a = joint.axis();
  UnitQuaternion qrot = UnitQuaternion::from_axis_angle(a, th);
  for (auto& g : scene.primitives) {
    if (g.part_label != part) continue;
    g.center = rodrigues_rotate(g.center, a, th, joint.pivot);
    g.rotation = quat_mul(qrot, g.rotation);
  }
}

}  // namespace

Stage2Result train_articulation(const Dataset& state0, const Dataset& state1, Scene& scene,
                                SdfNetwork& sdf, const TrainConfig& cfg_in, TrainLog* log) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (state1.cameras.empty()) throw ValidationError("train_articulation: state-1 views missing");

  SceneInit si = estimate_scene_init(state0.cameras);
  cfg.scene_center = si.center;
  cfg.scene_radius = si.radius;
  cfg.depth_span = 2.6 * si.radius;

  Stage2Result res;
  res.start_points.resize(scene.size());
  for (size_t i = 0; i < scene.size(); ++i) res.start_points[i] = scene.primitives[i].center;

  // Phase A: warm-up toward state 1, centers only, SDF frozen.
  OptimState warm_opt;
  warm_opt.init(scene, sdf, 0);
  std::vector<int> train1 = train_view_indices(state1.cameras.size(), cfg.holdout_every);
  Rng view_rng(cfg.seed, "warmup-views");
  std::vector<JointModel> no_joints;
  for (int it = 0; it < cfg.warmup_iters; ++it) {
    int view = train1[view_rng.at(it) % train1.size()];
    IterationResult r = evaluate_iteration(scene, sdf, no_joints, 0.0, state1.cameras[view],
                                           state1.images[view], cfg,
                                           static_cast<uint64_t>(1000000 + it), true, nullptr,
                                           /*color_only=*/true);
    check_finite(r.report, it);
    UpdateScales us;
    us.lr_centers = cfg.lr_warmup_centers;
    us.centers_only = true;
    apply_updates(scene, sdf, no_joints, r, warm_opt, cfg, us);
    if (log && it % cfg.log_every == 0) log->append({-1000 - it, r.report, scene.size()});
  }
  res.warm_points.resize(scene.size());
  for (size_t i = 0; i < scene.size(); ++i) res.warm_points[i] = scene.primitives[i].center;

  // Restore the canonical geometry and segment on the warm-up displacement field.
  for (size_t i = 0; i < scene.size(); ++i) scene.primitives[i].center = res.start_points[i];
  double max_disp = 0;
  for (size_t i = 0; i < scene.size(); ++i)
    max_disp = std::fmax(max_disp, norm1(res.warm_points[i] - res.start_points[i]));
  if (max_disp < cfg.motion_floor * 2.0 * si.radius)
    throw RuntimeFailure("no articulated motion detected");

  PartRecovery rec = peel_parts(res.start_points, res.warm_points, cfg.max_parts);
  if (rec.joints.empty()) throw RuntimeFailure("no articulated motion detected");
  for (size_t i = 0; i < scene.size(); ++i) scene.primitives[i].part_label = rec.labels[i];
  for (size_t p = 0; p < rec.joints.size(); ++p)
    if (rec.joints[p].kind == JointKind::kRevolute)
      rebase_revolute_part(scene, rec.joints[p], static_cast<int>(p) + 1, +1);

  // Phase B: joint optimization against both endpoint states.
  std::vector<JointModel>& joints = rec.joints;
  OptimState opt;
  opt.init(scene, sdf, joints.size());
  std::vector<int> train0 = train_view_indices(state0.cameras.size(), cfg.holdout_every);
  Rng view_rng_b(cfg.seed, "stage2-views");
  int phase_b = cfg.iterations_stage2 - cfg.warmup_iters;
  int reseg_round = 0;

  SegmentationState seg;
  seg.displacement.resize(scene.size());
  for (size_t i = 0; i < scene.size(); ++i)
    seg.displacement[i] = norm1(res.warm_points[i] - res.start_points[i]);
  seg.beta = std::accumulate(seg.displacement.begin(), seg.displacement.end(), 0.0) /
             std::fmax(1.0, static_cast<double>(scene.size()));
  {
    Bounds3 bb;
    for (size_t i = 0; i < scene.size(); ++i)
      if (rec.labels[i] > 0) bb.expand(res.start_points[i]);
    seg.phi_m = 0.1 * std::fmax(bb.valid() ? bb.diagonal() : 0.0, 1e-9);
  }

  for (int it = 0; it < phase_b; ++it) {
    double s = static_cast<double>(it % 2);
    const Dataset& data = s > 0.5 ? state1 : state0;
    const std::vector<int>& tviews = s > 0.5 ? train1 : train0;
    int view = tviews[view_rng_b.at(it) % tviews.size()];
    IterationResult r =
        evaluate_iteration(scene, sdf, joints, s, data.cameras[view], data.images[view], cfg,
                           static_cast<uint64_t>(2000000 + it), true);
    check_finite(r.report, it);
    UpdateScales us;
    us.lr_centers = lr_exp_decay(cfg.lr_centers, cfg.lr_centers_final, it, phase_b);
    us.with_joints = true;
    apply_updates(scene, sdf, joints, r, opt, cfg, us);
    if (log && it % cfg.log_every == 0) log->append({1000000 + it, r.report, scene.size()});

    if ((it + 1) % cfg.reseg_interval == 0 && it + 1 < phase_b) {
      reseg_round++;
      std::vector<int> labels(scene.size());
      for (size_t i = 0; i < scene.size(); ++i) labels[i] = scene.primitives[i].part_label;
      for (size_t p = 0; p < joints.size(); ++p) {
        seg.motion.assign(scene.size(), std::numeric_limits<double>::quiet_NaN());
        for (size_t i = 0; i < scene.size(); ++i) {
          if (labels[i] != 0 && labels[i] != static_cast<int>(p) + 1) continue;
          auto est =
              estimate_per_gaussian_motion(res.start_points[i], res.warm_points[i], joints[p]);
          if (!est) continue;
          // Observed travel (state 0 -> 1); canonical parameter is -travel/2 for
          // revolute joints and the travel itself for prismatic ones.
          seg.motion[i] = joints[p].kind == JointKind::kRevolute ? -0.5 * (*est) : *est;
        }
        ReevalResult rr = reevaluate_segmentation(labels, static_cast<int>(p) + 1, seg,
                                                  joints[p], reseg_round);
        if (!rr.kept_previous) {
          // Apply label flips with the matching canonical re-basing.
          for (size_t i = 0; i < scene.size(); ++i) {
            if (rr.labels[i] == labels[i]) continue;
            auto& g = scene.primitives[i];
            if (rr.labels[i] == static_cast<int>(p) + 1 &&
                joints[p].kind == JointKind::kRevolute) {
              double th = -joints[p].theta();
              g.center = rodrigues_rotate(g.center, joints[p].axis(), th, joints[p].pivot);
              g.rotation =
                  quat_mul(UnitQuaternion::from_axis_angle(joints[p].axis(), th), g.rotation);
            } else if (labels[i] == static_cast<int>(p) + 1 &&
                       joints[p].kind == JointKind::kRevolute) {
              double th = joints[p].theta();
              g.center = rodrigues_rotate(g.center, joints[p].axis(), th, joints[p].pivot);
              g.rotation =
                  quat_mul(UnitQuaternion::from_axis_angle(joints[p].axis(), th), g.rotation);
            }
            g.part_label = rr.labels[i];
          }
          labels = rr.labels;
        }
      }
    }
  }

  for (JointModel& j : joints) j.project();
  res.joints = joints;
  res.holdout_psnr_s0 = holdout_psnr(scene, sdf, joints, 0.0, state0, cfg);
  return res;
}

json config_to_json(const TrainConfig& cfg) {
  json j;
  j["iterations_stage1"] = cfg.iterations_stage1;
  j["iterations_stage2"] = cfg.iterations_stage2;
  j["warmup_iters"] = cfg.warmup_iters;
  j["reseg_interval"] = cfg.reseg_interval;
  j["lr_centers"] = cfg.lr_centers;
  j["lr_centers_final"] = cfg.lr_centers_final;
  j["lr_rotations"] = cfg.lr_rotations;
  j["lr_scales"] = cfg.lr_scales;
  j["lr_sh"] = cfg.lr_sh;
  j["lr_sdf"] = cfg.lr_sdf;
  j["lr_k"] = cfg.lr_k;
  j["lr_joint"] = cfg.lr_joint;
  j["lr_warmup_centers"] = cfg.lr_warmup_centers;
  j["densify_interval"] = cfg.densify_interval;
  j["densify_start"] = cfg.densify_start;
  j["densify_end_frac"] = cfg.densify_end_frac;
  j["densify_grad_threshold"] = cfg.densify_grad_threshold;
  j["prune_opacity"] = cfg.prune_opacity;
  j["split_scale_frac"] = cfg.split_scale_frac;
  j["max_gaussians"] = cfg.max_gaussians;
  j["init_gaussians"] = cfg.init_gaussians;
  j["lambda_c_ssim"] = cfg.weights.lambda_c_ssim;
  j["lambda_unbias"] = cfg.weights.lambda_unbias;
  j["lambda_normal"] = cfg.weights.lambda_normal;
  j["lambda_eik"] = cfg.weights.lambda_eik;
  j["lambda_dist"] = cfg.weights.lambda_dist;
  j["sdf_hidden_layers"] = cfg.sdf_hidden_layers;
  j["sdf_hidden_width"] = cfg.sdf_hidden_width;
  j["pe_frequencies"] = cfg.pe_frequencies;
  j["eikonal_samples"] = cfg.eikonal_samples;
  j["normal_samples"] = cfg.normal_samples;
  j["unbias_max_samples"] = cfg.unbias_max_samples;
  j["unbias_weight_threshold"] = cfg.unbias_weight_threshold;
  j["seed"] = cfg.seed;
  j["psnr_floor"] = cfg.psnr_floor;
  j["holdout_every"] = cfg.holdout_every;
  j["motion_floor"] = cfg.motion_floor;
  j["max_parts"] = cfg.max_parts;
  j["clip_norm"] = cfg.clip_norm;
  j["bell_activation"] = cfg.bell_activation;
  j["log_every"] = cfg.log_every;
  return j;
}

namespace {

uint64_t fnv1a_file(const std::string& path, uint64_t h) {
  std::ifstream in(path, std::ios::binary);
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i)
      h = (h ^ static_cast<uint8_t>(buf[i])) * 0x100000001b3ull;
    if (got < static_cast<std::streamsize>(sizeof(buf))) break;
  }
  return h;
}

}  // namespace

void Checkpoint::save(const std::string& dir) const {
  fs::create_directories(dir);
  save_gaussians_ply((fs::path(dir) / "gaussians.ply").string(), scene);
  sdf.save_json((fs::path(dir) / "sdf.json").string());
  save_joints_json((fs::path(dir) / "joints.json").string(), joints);
  save_cameras_json((fs::path(dir) / "cameras.json").string(), cameras);
  uint64_t h = 0xcbf29ce484222325ull;
  for (const char* f : {"gaussians.ply", "sdf.json", "joints.json", "cameras.json"})
    h = fnv1a_file((fs::path(dir) / f).string(), h);
  json meta = this->meta;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  meta["content_hash"] = hex;
  std::ofstream out((fs::path(dir) / "meta.json").string());
  if (!out) throw RuntimeFailure("cannot write meta.json in " + dir);
  out << meta.dump(1) << "\n";
}

Checkpoint Checkpoint::load(const std::string& dir) {
  Checkpoint ck;
  ck.scene = load_gaussians_ply((fs::path(dir) / "gaussians.ply").string());
  ck.sdf = SdfNetwork::load_json((fs::path(dir) / "sdf.json").string());
  ck.joints = load_joints_json((fs::path(dir) / "joints.json").string());
  ck.cameras = load_cameras_json((fs::path(dir) / "cameras.json").string());
  std::ifstream in((fs::path(dir) / "meta.json").string());
  if (in) in >> ck.meta;
  return ck;
}

}  // namespace artsurf
