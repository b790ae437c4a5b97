#include "artsurf/articulation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "artsurf/errors.hpp"

namespace artsurf {

using json = nlohmann::json;

Vec3 JointModel::axis() const {
  Vec3 a;
  double th;
  q.to_axis_angle(a, th);
  return a;
}

double JointModel::theta() const {
  Vec3 a;
  double th;
  q.to_axis_angle(a, th);
  return th;
}

void JointModel::set_axis_angle(const Vec3& a, double th) {
  q = UnitQuaternion::from_axis_angle(normalized(a), th);
}

void JointModel::project() {
  if (kind == JointKind::kRevolute) {
    q = q.normalized();
    Vec3 a;
    double th;
    q.to_axis_angle(a, th);
    th = clampd(th, -kPi / 2, kPi / 2);
    q = UnitQuaternion::from_axis_angle(a, th);
  } else {
    direction = normalized(direction);
  }
}

double theta_at_state(double theta, double s, double s_star) {
  return (s_star - s) / s_star * theta;
}

Vec3 deform_revolute(const Vec3& x, const JointModel& joint, double s) {
  double th = theta_at_state(joint.theta(), s, 0.5);
  if (th == 0.0) return x;
  return rodrigues_rotate(x, joint.axis(), th, joint.pivot);
}

Vec3 deform_prismatic(const Vec3& x, const JointModel& joint, double s) {
  return x + joint.direction * (s * joint.distance);
}

Vec3 deform_point(const Vec3& x, const JointModel& joint, double s) {
  return joint.kind == JointKind::kRevolute ? deform_revolute(x, joint, s)
                                            : deform_prismatic(x, joint, s);
}

Vec3 inverse_deform_point(const Vec3& x, const JointModel& joint, double s) {
  if (joint.kind == JointKind::kRevolute) {
    double th = theta_at_state(joint.theta(), s, 0.5);
    return rodrigues_rotate(x, joint.axis(), -th, joint.pivot);
  }
  return x - joint.direction * (s * joint.distance);
}

UnitQuaternion align_quaternion(const UnitQuaternion& q_local, const JointModel& joint,
                                double s) {
  double th = theta_at_state(joint.theta(), s, 0.5);
  return quat_mul(UnitQuaternion::from_axis_angle(joint.axis(), th), q_local);
}

void JointGrads::add_scaled(const JointGrads& o, double sc) {
  pivot += o.pivot * sc;
  for (int i = 0; i < 4; ++i) q[i] += o.q[i] * sc;
  direction += o.direction * sc;
  distance += o.distance * sc;
}

double JointGrads::squared_norm() const {
  double s = norm2(pivot) + norm2(direction) + distance * distance;
  for (int i = 0; i < 4; ++i) s += q[i] * q[i];
  return s;
}

void JointGrads::scale(double sc) {
  pivot *= sc;
  for (int i = 0; i < 4; ++i) q[i] *= sc;
  direction *= sc;
  distance *= sc;
}

namespace {

// dL/d(axis, theta) -> dL/dq for the unit quaternion (cos(t/2), sin(t/2) a),
// tangent-projected.
void axis_angle_backward(const UnitQuaternion& q, const Vec3& abar, double tbar,
                         std::array<double, 4>& qbar_out) {
  Vec3 v{q.x, q.y, q.z};
  double w = q.w;
  double flip = 1.0;
  if (w < 0) {  // to_axis_angle maps to the w >= 0 hemisphere
    w = -w;
    v = -v;
    flip = -1.0;
  }
  double vn = norm(v);
  if (vn < 1e-8) vn = 1e-8;
  Vec3 a = v / vn;
  double denom = vn * vn + w * w;  // = 1 for unit q
  // theta = 2 atan2(vn, w); a = v / vn.
  Vec3 dv = (abar - a * dot(a, abar)) / vn + a * (2.0 * w / denom * tbar);
  double dw = -2.0 * vn / denom * tbar;
  std::array<double, 4> g{flip * dw, flip * dv.x, flip * dv.y, flip * dv.z};
  double dotqg = g[0] * q.w + g[1] * q.x + g[2] * q.y + g[3] * q.z;
  g[0] -= dotqg * q.w;
  g[1] -= dotqg * q.x;
  g[2] -= dotqg * q.y;
  g[3] -= dotqg * q.z;
  for (int i = 0; i < 4; ++i) qbar_out[i] += g[i];
}

}  // namespace

Vec3 deform_backward(const Vec3& x, const JointModel& joint, double s, const Vec3& g,
                     JointGrads& jg) {
  if (joint.kind == JointKind::kPrismatic) {
    // x_s = x + s * m * normalize(d)
    Vec3 dn = normalized(joint.direction);
    double dl = norm(joint.direction);
    jg.distance += s * dot(dn, g);
    Vec3 ddn = g * (s * joint.distance);
    jg.direction += (ddn - dn * dot(dn, ddn)) / dl;
    return g;
  }
  Vec3 a = joint.axis();
  double theta = joint.theta();
  double cs = (0.5 - s) / 0.5;  // d theta_s / d theta
  double th = cs * theta;
  Mat3 rot = rodrigues_matrix(a, th);
  Vec3 u = x - joint.pivot;

  Vec3 xbar = rot.tmul(g);
  jg.pivot += g - xbar;

  // theta path
  Mat3 kmat = Mat3::skew(a);
  Mat3 k2 = kmat * kmat;
  double sth = std::sin(th), cth = std::cos(th);
  Mat3 dr_dth = kmat * cth + k2 * sth;
  double th_bar = dot(g, dr_dth * u);

  // axis path: dR/da_i = sin(th) [e_i]x + (1 - cos(th)) ([e_i]x K + K [e_i]x)
  Vec3 abar{0, 0, 0};
  for (int i = 0; i < 3; ++i) {
    Vec3 e{0, 0, 0};
    e[i] = 1.0;
    Mat3 ei = Mat3::skew(e);
    Mat3 dr_da = ei * sth + (ei * kmat + kmat * ei) * (1.0 - cth);
    abar[i] = dot(g, dr_da * u);
  }
  axis_angle_backward(joint.q, abar, th_bar * cs, jg.q);
  return xbar;
}

void add_theta_s_gradient(const JointModel& joint, double s, double d_theta_s, JointGrads& jg) {
  double cs = (0.5 - s) / 0.5;
  axis_angle_backward(joint.q, Vec3{0, 0, 0}, d_theta_s * cs, jg.q);
}

std::array<double, 4> align_quaternion_backward(const UnitQuaternion& q_local,
                                                const JointModel& joint, double s,
                                                const std::array<double, 4>& sbar,
                                                JointGrads& jg) {
  Vec3 a = joint.axis();
  double cs = (0.5 - s) / 0.5;
  double th = cs * joint.theta();
  UnitQuaternion qa = UnitQuaternion::from_axis_angle(a, th);
  // s = qa (x) q_local; both factors are linear in the product.
  const UnitQuaternion& b = q_local;
  std::array<double, 4> local_bar{
      qa.w * sbar[0] + qa.x * sbar[1] + qa.y * sbar[2] + qa.z * sbar[3],
      -qa.x * sbar[0] + qa.w * sbar[1] + qa.z * sbar[2] - qa.y * sbar[3],
      -qa.y * sbar[0] - qa.z * sbar[1] + qa.w * sbar[2] + qa.x * sbar[3],
      -qa.z * sbar[0] + qa.y * sbar[1] - qa.x * sbar[2] + qa.w * sbar[3]};
  std::array<double, 4> qa_bar{
      b.w * sbar[0] + b.x * sbar[1] + b.y * sbar[2] + b.z * sbar[3],
      -b.x * sbar[0] + b.w * sbar[1] - b.z * sbar[2] + b.y * sbar[3],
      -b.y * sbar[0] + b.z * sbar[1] + b.w * sbar[2] - b.x * sbar[3],
      -b.z * sbar[0] - b.y * sbar[1] + b.x * sbar[2] + b.w * sbar[3]};
  // qa = (cos(th/2), sin(th/2) a): chain into theta and axis, then into joint.q.
  double half = 0.5 * th;
  double sh = std::sin(half), ch = std::cos(half);
  Vec3 va{qa_bar[1], qa_bar[2], qa_bar[3]};
  double th_bar = -0.5 * sh * qa_bar[0] + 0.5 * ch * dot(a, va);
  Vec3 abar = va * sh;
  axis_angle_backward(joint.q, abar, th_bar * cs, jg.q);
  return local_bar;
}

std::vector<int> init_segmentation(const std::vector<double>& displacements) {
  size_t n = displacements.size();
  if (n < 2) throw ValidationError("init_segmentation: need at least 2 gaussians");
  double beta = std::accumulate(displacements.begin(), displacements.end(), 0.0) /
                static_cast<double>(n);
  std::vector<int> labels(n, 0);
  size_t dyn = 0;
  for (size_t i = 0; i < n; ++i)
    if (displacements[i] > beta) {
      labels[i] = 1;
      dyn++;
    }
  if (dyn == 0) {
    std::vector<double> sorted = displacements;
    std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
    double median = sorted[n / 2];
    for (size_t i = 0; i < n; ++i)
      if (displacements[i] > median) {
        labels[i] = 1;
        dyn++;
      }
  }
  if (dyn == 0) throw RuntimeFailure("no articulated motion detected");
  return labels;
}

RigidFit fit_procrustes(const std::vector<Vec3>& canon, const std::vector<Vec3>& now) {
  if (canon.size() != now.size() || canon.size() < 3)
    throw ValidationError("fit_procrustes: need >= 3 corresponding points");
  size_t n = canon.size();
  Vec3 c0{}, c1{};
  for (size_t i = 0; i < n; ++i) {
    c0 += canon[i];
    c1 += now[i];
  }
  c0 *= 1.0 / n;
  c1 *= 1.0 / n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < n; ++i) {
    Vec3 p = canon[i] - c0, q = now[i] - c1;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) cov(a, b) += q[a] * p[b];
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (u * v.transpose()).determinant() > 0 ? 1.0 : -1.0;
  Eigen::Matrix3d r = u * d * v.transpose();
  RigidFit fit;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) fit.rot(a, b) = r(a, b);
  fit.trans = c1 - fit.rot * c0;
  double acc = 0;
  for (size_t i = 0; i < n; ++i) acc += norm2(now[i] - (fit.rot * canon[i] + fit.trans));
  fit.rms = std::sqrt(acc / n);
  return fit;
}

double mean_pairwise_cosine(const std::vector<Vec3>& canon, const std::vector<Vec3>& now) {
  // sum_{i != j} di . dj = |sum di|^2 - n for unit displacement directions.
  Vec3 sum{};
  size_t n = 0;
  for (size_t i = 0; i < canon.size(); ++i) {
    Vec3 d = now[i] - canon[i];
    double dn = norm(d);
    if (dn < 1e-12) continue;
    sum += d / dn;
    n++;
  }
  if (n < 2) return 1.0;
  double total = norm2(sum) - static_cast<double>(n);
  return total / (static_cast<double>(n) * (n - 1));
}

JointKind classify_joint_type(const std::vector<Vec3>& canon, const std::vector<Vec3>& now) {
  if (canon.size() != now.size() || canon.size() < 10)
    throw ValidationError("classify_joint_type: need >= 10 corresponding points");
  RigidFit rot_fit = fit_procrustes(canon, now);
  Vec3 mean_disp{};
  for (size_t i = 0; i < canon.size(); ++i) mean_disp += now[i] - canon[i];
  mean_disp *= 1.0 / canon.size();
  double trans_acc = 0;
  for (size_t i = 0; i < canon.size(); ++i)
    trans_acc += norm2(now[i] - canon[i] - mean_disp);
  double trans_rms = std::sqrt(trans_acc / canon.size());

  Bounds3 b;
  for (const Vec3& p : canon) b.expand(p);
  double extent = b.diagonal();
  if (extent <= 0) extent = 1e-9;
  if (rot_fit.rms > 0.2 * extent && trans_rms > 0.2 * extent)
    throw RuntimeFailure("motion not rigid: residuals exceed 20% of part extent");

  if (mean_pairwise_cosine(canon, now) > 0.95) return JointKind::kPrismatic;
  return trans_rms <= rot_fit.rms ? JointKind::kPrismatic : JointKind::kRevolute;
}

std::optional<double> estimate_per_gaussian_motion(const Vec3& x_canon, const Vec3& x_now,
                                                   const JointModel& joint) {
  if (joint.kind == JointKind::kPrismatic)
    return dot(x_now - x_canon, normalized(joint.direction));
  Vec3 a = joint.axis();
  Vec3 u = x_canon - joint.pivot;
  Vec3 v = x_now - joint.pivot;
  Vec3 up = u - a * dot(u, a);
  Vec3 vp = v - a * dot(v, a);
  if (norm(up) < 1e-6 || norm(vp) < 1e-6) return std::nullopt;
  return std::atan2(dot(a, cross(up, vp)), dot(up, vp));
}

ReevalResult reevaluate_segmentation(const std::vector<int>& labels, int part,
                                     const SegmentationState& state, const JointModel& joint,
                                     int K) {
  if (K < 1) throw ValidationError("reevaluate_segmentation: K must be >= 1");
  ReevalResult res;
  res.labels = labels;
  double ref, tol;
  if (joint.kind == JointKind::kRevolute) {
    ref = joint.theta();
    tol = state.phi_theta / K;
  } else {
    ref = joint.distance;
    tol = state.phi_m / K;
  }
  size_t part_count = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != part) continue;  // other parts untouched
    double est = state.motion[i];
    if (std::isnan(est)) continue;  // undefined estimate: keep the current label
    bool fits = std::fabs(est - ref) < tol;
    if (fits && labels[i] == 0) {
      res.labels[i] = part;
      res.admitted++;
    } else if (!fits && labels[i] == part) {
      res.labels[i] = 0;
      res.demoted++;
    }
    if (res.labels[i] == part) part_count++;
  }
  if (part_count == 0) {
    std::cerr << "[warn] segmentation re-evaluation emptied part " << part
              << "; keeping previous labels\n";
    return {labels, 0, 0, true};
  }
  return res;
}

JointModel fit_joint(const std::vector<Vec3>& canon, const std::vector<Vec3>& now,
                     JointKind kind) {
  JointModel joint;
  joint.kind = kind;
  if (kind == JointKind::kPrismatic) {
    Vec3 mean_disp{};
    for (size_t i = 0; i < canon.size(); ++i) mean_disp += now[i] - canon[i];
    mean_disp *= 1.0 / canon.size();
    double m = norm(mean_disp);
    joint.direction = m > 1e-12 ? mean_disp / m : Vec3{1, 0, 0};
    joint.distance = m;
    return joint;
  }
  RigidFit fit = fit_procrustes(canon, now);
  // Rotation matrix -> axis/angle of the full travel.
  double tr = fit.rot(0, 0) + fit.rot(1, 1) + fit.rot(2, 2);
  double cos_phi = clampd(0.5 * (tr - 1.0), -1.0, 1.0);
  Vec3 w{fit.rot(2, 1) - fit.rot(1, 2), fit.rot(0, 2) - fit.rot(2, 0),
         fit.rot(1, 0) - fit.rot(0, 1)};
  double sin_phi = 0.5 * norm(w);
  double phi = std::atan2(sin_phi, cos_phi);
  Vec3 axis = sin_phi > 1e-9 ? normalized(w) : Vec3{0, 0, 1};
  // Travel from s=0 to s=1 equals a rotation by -2*theta about the axis.
  joint.set_axis_angle(axis, -0.5 * phi);
  // Pivot: least-norm solution of (I - R) o = t.
  Eigen::Matrix3d m;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) m(a, b) = (a == b ? 1.0 : 0.0) - fit.rot(a, b);
  Eigen::Vector3d t(fit.trans.x, fit.trans.y, fit.trans.z);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  svd.setThreshold(1e-6);
  Eigen::Vector3d o = svd.solve(t);
  joint.pivot = {o(0), o(1), o(2)};
  return joint;
}

PartRecovery peel_parts(const std::vector<Vec3>& start_points,
                        const std::vector<Vec3>& warm_points, int max_parts) {
  if (max_parts < 1) throw ValidationError("peel_parts: max_parts must be >= 1");
  size_t n = start_points.size();
  std::vector<double> disp(n);
  for (size_t i = 0; i < n; ++i) disp[i] = norm1(warm_points[i] - start_points[i]);
  PartRecovery out;
  out.labels.assign(n, 0);
  out.beta0 = std::accumulate(disp.begin(), disp.end(), 0.0) / static_cast<double>(n);

  std::vector<char> in_pool(n, 1);
  for (int part = 1; part <= max_parts; ++part) {
    // Residual criterion over the unexplained pool.
    std::vector<size_t> pool;
    double max_disp = 0;
    for (size_t i = 0; i < n; ++i)
      if (in_pool[i]) {
        pool.push_back(i);
        max_disp = std::fmax(max_disp, disp[i]);
      }
    if (pool.size() < 10 || max_disp < 2.0 * out.beta0) break;

    std::vector<double> pool_disp(pool.size());
    for (size_t j = 0; j < pool.size(); ++j) pool_disp[j] = disp[pool[j]];
    std::vector<int> active_labels;
    try {
      active_labels = init_segmentation(pool_disp);
    } catch (const RuntimeFailure&) {
      break;
    }
    std::vector<size_t> active;
    for (size_t j = 0; j < pool.size(); ++j)
      if (active_labels[j]) active.push_back(pool[j]);
    if (active.size() < 10) break;

    // Seed on the strongest mover plus its nearest active neighbours.
    size_t seed = active[0];
    for (size_t i : active)
      if (disp[i] > disp[seed]) seed = i;
    std::vector<std::pair<double, size_t>> by_dist;
    for (size_t i : active) by_dist.push_back({norm2(start_points[i] - start_points[seed]), i});
    std::sort(by_dist.begin(), by_dist.end());
    size_t n_seed = std::min<size_t>(50, by_dist.size());
    std::vector<size_t> members;
    for (size_t j = 0; j < n_seed; ++j) members.push_back(by_dist[j].second);

    auto gather = [&](const std::vector<size_t>& ids, std::vector<Vec3>& a,
                      std::vector<Vec3>& b) {
      a.clear();
      b.clear();
      for (size_t i : ids) {
        a.push_back(start_points[i]);
        b.push_back(warm_points[i]);
      }
    };
    std::vector<Vec3> pa, pb;
    gather(members, pa, pb);
    JointKind kind;
    try {
      kind = classify_joint_type(pa, pb);
    } catch (const RuntimeFailure&) {
      break;
    }
    JointModel joint = fit_joint(pa, pb, kind);

    // Grow by motion consistency, refit, repeat.
    SegmentationState st;
    Bounds3 bb;
    for (size_t i : active) bb.expand(start_points[i]);
    st.phi_m = 0.1 * std::fmax(bb.diagonal(), 1e-9);
    for (int round = 0; round < 3; ++round) {
      std::vector<size_t> grown;
      for (size_t i : active) {
        auto est = estimate_per_gaussian_motion(start_points[i], warm_points[i], joint);
        if (!est) continue;
        if (joint.kind == JointKind::kRevolute) {
          // Observed travel maps to the canonical parameter as theta = -travel/2.
          if (std::fabs(-0.5 * (*est) - joint.theta()) < st.phi_theta) grown.push_back(i);
        } else {
          if (std::fabs(*est - joint.distance) < st.phi_m) grown.push_back(i);
        }
      }
      if (grown.size() < 10) break;
      members = grown;
      gather(members, pa, pb);
      joint = fit_joint(pa, pb, kind);
    }
    if (members.size() < 10) break;
    for (size_t i : members) {
      out.labels[i] = part;
      in_pool[i] = 0;
    }
    out.joints.push_back(joint);
  }
  return out;
}

void save_joints_json(const std::string& path, const std::vector<JointModel>& joints) {
  json arr = json::array();
  for (const JointModel& j : joints) {
    json o;
    if (j.kind == JointKind::kRevolute) {
      o["kind"] = "revolute";
      o["pivot"] = {j.pivot.x, j.pivot.y, j.pivot.z};
      Vec3 a = j.axis();
      o["axis"] = {a.x, a.y, a.z};
      o["theta"] = j.theta();
      o["canonical_state"] = 0.5;
    } else {
      o["kind"] = "prismatic";
      o["direction"] = {j.direction.x, j.direction.y, j.direction.z};
      o["distance"] = j.distance;
      o["canonical_state"] = 0.0;
    }
    arr.push_back(o);
  }
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << arr.dump(1) << "\n";
}

std::vector<JointModel> load_joints_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open joints file: " + path);
  json arr;
  try {
    in >> arr;
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": JSON parse error: " + std::string(e.what()));
  }
  if (!arr.is_array()) throw ValidationError(path + ": expected a JSON array");
  std::vector<JointModel> joints;
  int idx = 0;
  for (const auto& o : arr) {
    std::string where = path + ": [" + std::to_string(idx++) + "]";
    JointModel j;
    std::string kind = o.value("kind", "");
    if (kind == "revolute") {
      j.kind = JointKind::kRevolute;
      auto p = o.at("pivot").get<std::vector<double>>();
      auto a = o.at("axis").get<std::vector<double>>();
      if (p.size() != 3 || a.size() != 3)
        throw ValidationError(where + ": pivot/axis must have 3 components");
      j.pivot = {p[0], p[1], p[2]};
      j.set_axis_angle({a[0], a[1], a[2]}, o.at("theta").get<double>());
    } else if (kind == "prismatic") {
      j.kind = JointKind::kPrismatic;
      auto d = o.at("direction").get<std::vector<double>>();
      if (d.size() != 3) throw ValidationError(where + ": direction must have 3 components");
      j.direction = normalized(Vec3{d[0], d[1], d[2]});
      j.distance = o.at("distance").get<double>();
    } else {
      throw ValidationError(where + ".kind: expected \"revolute\" or \"prismatic\"");
    }
    joints.push_back(j);
  }
  return joints;
}

}  // namespace artsurf
