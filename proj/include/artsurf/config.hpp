#pragma once

#include <string>
#include <vector>

#include "artsurf/evaluation.hpp"
#include "artsurf/training.hpp"

namespace artsurf {

// Flat key=value view over the training, meshing, and evaluation options.
// Unknown keys are rejected; every value is validated on load.
struct RunConfig {
  TrainConfig train;
  // meshing
  double voxel_frac = 1.0 / 256.0;  // voxel size = scene-bound diagonal * voxel_frac
  double trunc_voxels = 4.0;
  // evaluation
  int eval_samples = 100000;
  int eval_rays_per_view = 2048;
  double f1_threshold = 0.4;
  int emd_samples = 1024;
  bool chamfer_unsquared = false;

  void set(const std::string& key, const std::string& value);
  void load_file(const std::string& path);
  void validate() const;

  ExtractOptions extract_options() const;
  EvalOptions eval_options() const;

  // One line per key: "name = default  # description".
  static std::string help_table();
};

}  // namespace artsurf
