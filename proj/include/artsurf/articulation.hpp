#pragma once

#include <optional>
#include <string>
#include <vector>

#include "artsurf/core.hpp"
#include "artsurf/geometry.hpp"

namespace artsurf {

enum class JointKind { kRevolute, kPrismatic };

// Canonical state: 0.5 for revolute joints (angle sweeps +theta..-theta across
// s in [0,1]), 0 for prismatic joints (pure linear interpolation).
struct JointModel {
  JointKind kind = JointKind::kRevolute;
  // revolute parameters
  Vec3 pivot;
  UnitQuaternion q;  // decodes into unit axis and angle in [-pi/2, pi/2]
  // prismatic parameters
  Vec3 direction{1, 0, 0};  // unit
  double distance = 0;

  double canonical_state() const { return kind == JointKind::kRevolute ? 0.5 : 0.0; }
  Vec3 axis() const;
  double theta() const;
  void set_axis_angle(const Vec3& a, double th);
  // Projection applied after every optimizer step: renormalize and clamp theta.
  void project();
};

// Eq-9-style schedule: theta_s = ((s* - s)/s*) * theta.
double theta_at_state(double theta, double s, double s_star);

Vec3 deform_revolute(const Vec3& x, const JointModel& joint, double s);
Vec3 deform_prismatic(const Vec3& x, const JointModel& joint, double s);
Vec3 deform_point(const Vec3& x, const JointModel& joint, double s);
Vec3 inverse_deform_point(const Vec3& x, const JointModel& joint, double s);

// Left-multiplies the local quaternion by the axis-angle quaternion of theta_s.
UnitQuaternion align_quaternion(const UnitQuaternion& q_local, const JointModel& joint, double s);

// --- backward helpers for the articulation stage -------------------------------

// Raw gradients with respect to a joint's learnable tensors.
struct JointGrads {
  Vec3 pivot;
  std::array<double, 4> q{0, 0, 0, 0};
  Vec3 direction;
  double distance = 0;

  void add_scaled(const JointGrads& o, double sc);
  double squared_norm() const;
  void scale(double sc);
};

// Chains dL/dx_s into dL/dx (returned) and the joint parameters.
Vec3 deform_backward(const Vec3& x, const JointModel& joint, double s, const Vec3& out_grad,
                     JointGrads& jg);
// Adds theta_s-only gradient (paths that touch R(theta_s) but not the pivot chain,
// e.g. quaternion alignment or rotated SDF gradients).
void add_theta_s_gradient(const JointModel& joint, double s, double d_theta_s, JointGrads& jg);
// Chains dL/dq_s of the aligned quaternion into q_local (returned) and the joint.
std::array<double, 4> align_quaternion_backward(const UnitQuaternion& q_local,
                                                const JointModel& joint, double s,
                                                const std::array<double, 4>& q_s_bar,
                                                JointGrads& jg);

// --- unsupervised segmentation and joint fitting -------------------------------

struct SegmentationState {
  std::vector<double> displacement;  // per-gaussian |dx| (L1) over warm-up
  double beta = 0;                   // mean displacement
  std::vector<double> motion;        // theta-hat or m-hat per gaussian; NaN = undefined
  double phi_theta = kPi / 6.0;
  double phi_m = 0.1;
  int round = 1;  // K
};

// Dynamic iff |dx| > mean; falls back to the median, then errors when still empty.
// Returns 0/1 labels (1 = dynamic).
std::vector<int> init_segmentation(const std::vector<double>& displacements);

struct RigidFit {
  Mat3 rot;
  Vec3 trans;  // x_now ~ rot * x_canon + trans
  double rms = 0;
};
RigidFit fit_procrustes(const std::vector<Vec3>& canon, const std::vector<Vec3>& now);

// Mean pairwise cosine of displacement directions, computed in closed form.
double mean_pairwise_cosine(const std::vector<Vec3>& canon, const std::vector<Vec3>& now);

// Chooses the motion model with the lower RMS residual; near-parallel displacement
// fields (mean pairwise cosine > 0.95) prefer prismatic. Throws RuntimeFailure when
// both residuals exceed 20% of the moving part's extent.
JointKind classify_joint_type(const std::vector<Vec3>& canon, const std::vector<Vec3>& now);

// Signed rotation angle about the joint axis (projections onto the plane
// perpendicular to the axis), or translation distance along the direction.
// nullopt when a projection is degenerate (point on the axis).
std::optional<double> estimate_per_gaussian_motion(const Vec3& x_canon, const Vec3& x_now,
                                                   const JointModel& joint);

struct ReevalResult {
  std::vector<int> labels;
  size_t admitted = 0, demoted = 0;
  bool kept_previous = false;
};

// Eq-12 re-evaluation for one part: keep/admit iff |motion - theta| < phi/K
// (or |motion - m| < phi_m/K). Gaussians labelled with other parts are untouched;
// an update that would empty the part keeps the previous labels and warns.
ReevalResult reevaluate_segmentation(const std::vector<int>& labels, int part,
                                     const SegmentationState& state, const JointModel& joint,
                                     int K);

// Fits one joint to corresponding point sets (kind chosen by classify_joint_type).
JointModel fit_joint(const std::vector<Vec3>& canon, const std::vector<Vec3>& now,
                     JointKind kind);

struct PartRecovery {
  std::vector<JointModel> joints;    // joints[i] drives part label i+1
  std::vector<int> labels;           // per gaussian: 0 static, k>=1 part k
  double beta0 = 0;                  // initial mean displacement
};

// Sequential multi-part peeling over the warm-up displacement field: seed at the
// largest unexplained displacement, fit, grow by motion consistency, freeze, repeat
// until the residual displacement drops below 2*beta0 or max_parts is reached.
PartRecovery peel_parts(const std::vector<Vec3>& start_points,
                        const std::vector<Vec3>& warm_points, int max_parts);

// joints.json (array; one entry per part in label order).
void save_joints_json(const std::string& path, const std::vector<JointModel>& joints);
std::vector<JointModel> load_joints_json(const std::string& path);

}  // namespace artsurf
