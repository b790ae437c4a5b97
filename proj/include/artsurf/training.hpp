#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "artsurf/articulation.hpp"
#include "artsurf/gaussian.hpp"
#include "artsurf/losses.hpp"
#include "artsurf/meshing.hpp"
#include "artsurf/optimizer.hpp"
#include "artsurf/renderer.hpp"
#include "artsurf/sdf.hpp"

namespace artsurf {

struct TrainConfig {
  int iterations_stage1 = 7000;
  int iterations_stage2 = 5000;  // includes the warm-up
  int warmup_iters = 500;
  int reseg_interval = 500;

  double lr_centers = 1.6e-4;
  double lr_centers_final = 1.6e-6;
  double lr_rotations = 1e-3;
  double lr_scales = 5e-3;
  double lr_sh = 2.5e-3;
  double lr_sdf = 5e-4;
  double lr_k = 1e-3;
  double lr_joint = 5e-3;
  double lr_warmup_centers = 2e-3;

  int densify_interval = 300;
  int densify_start = 500;
  double densify_end_frac = 0.8;
  double densify_grad_threshold = 2e-4;
  double prune_opacity = 0.005;
  double split_scale_frac = 0.02;  // x scene diagonal
  int max_gaussians = 40000;
  int init_gaussians = 2000;

  LossWeights weights;
  int sdf_hidden_layers = 8;
  int sdf_hidden_width = 64;
  int pe_frequencies = 4;

  int eikonal_samples = 512;
  int normal_samples = 1024;
  int unbias_max_samples = 4096;
  double unbias_weight_threshold = 0.05;

  uint64_t seed = 1;
  double psnr_floor = 15.0;
  int holdout_every = 8;  // view i is held out when i % holdout_every == 0
  double motion_floor = 0.01;  // x scene diagonal; below = no articulated motion
  int max_parts = 1;
  double clip_norm = 10.0;
  bool bell_activation = true;  // false: ablation with the monotone sigmoid
  int log_every = 10;
  bool json_logs = false;

  // Filled by the trainer from the camera ring so the objective does not take
  // its normalizations from the (moving) primitives. 0 = derive from the scene.
  double depth_span = 0;
  Vec3 scene_center{0, 0, 0};
  double scene_radius = 0;

  void validate() const;
};

struct Dataset {
  std::vector<Camera> cameras;
  std::vector<Image> images;
};

Dataset load_dataset_dir(const std::string& dir);

struct SceneInit {
  Vec3 center;
  double radius = 0.5;
};

// Look-at point from the camera ring (least-squares intersection of optical axes)
// plus a field-of-view based working radius.
SceneInit estimate_scene_init(const std::vector<Camera>& cams);

Scene init_scene(const SceneInit& si, int n, int sh_degree, uint64_t seed);

// --- single-iteration objective -------------------------------------------------

// Detached sampling state: unbias records (points already pulled back to the
// canonical frame) and eikonal sample positions. The training loop redraws these
// every iteration and treats them as constants; freezing them makes the objective
// a plain function of the parameters (used by the finite-difference gate).
struct FrozenSamples {
  bool has_unbias = false;
  std::vector<UnbiasSample> unbias;
  bool has_eikonal = false;
  std::vector<Vec3> eikonal_points;
};

struct IterationResult {
  LossReport report;
  RenderOutput render;
  // gradients, in canonical space (valid when compute_grads was set)
  SceneGrads scene_grads;
  SdfGrads sdf_grads;
  double log_k_grad = 0;
  std::vector<JointGrads> joint_grads;
};

// One full forward (and optional backward) pass of the training objective on a
// single view. `joints` empty renders the canonical scene directly. Deterministic
// given cfg.seed and iter; `color_only` restricts the objective to L_c (warm-up).
IterationResult evaluate_iteration(const Scene& scene, const SdfNetwork& sdf,
                                   const std::vector<JointModel>& joints, double s,
                                   const Camera& cam, const Image& target,
                                   const TrainConfig& cfg, uint64_t iter, bool compute_grads,
                                   const FrozenSamples* frozen = nullptr,
                                   bool color_only = false);

// --- training stages --------------------------------------------------------------

struct TrainLogRow {
  int64_t iter;
  LossReport report;
  size_t num_gaussians;
};

class TrainLog {
 public:
  TrainLog(const std::string& path, bool json_lines);
  void append(const TrainLogRow& row);

 private:
  std::string path_;
  bool json_;
};

struct Checkpoint {
  Scene scene;
  SdfNetwork sdf;
  std::vector<JointModel> joints;
  std::vector<Camera> cameras;
  nlohmann::json meta;

  void save(const std::string& dir) const;
  static Checkpoint load(const std::string& dir);
};

struct Stage1Result {
  Scene scene;
  SdfNetwork sdf;
  double holdout_psnr = 0;
};

Stage1Result train_reconstruction(const Dataset& state0, const TrainConfig& cfg,
                                  TrainLog* log = nullptr);

struct Stage2Result {
  std::vector<JointModel> joints;
  double holdout_psnr_s0 = 0;
  std::vector<Vec3> warm_points;   // per-gaussian warm-up (state-1 proxy) positions
  std::vector<Vec3> start_points;  // stage-1 positions the warm-up started from
};

// Two-phase articulation stage: warm-up on state-1 images (centers only), part
// segmentation + joint init, then joint optimization against both states. Mutates
// scene/sdf in place (labels, re-based canonical geometry, refined parameters).
Stage2Result train_articulation(const Dataset& state0, const Dataset& state1, Scene& scene,
                                SdfNetwork& sdf, const TrainConfig& cfg,
                                TrainLog* log = nullptr);

// Held-out-view PSNR of the (possibly articulated) model.
double holdout_psnr(const Scene& scene, const SdfNetwork& sdf,
                    const std::vector<JointModel>& joints, double s, const Dataset& data,
                    const TrainConfig& cfg);

nlohmann::json config_to_json(const TrainConfig& cfg);

}  // namespace artsurf
