#include "artsurf/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "artsurf/errors.hpp"

namespace artsurf {

namespace {

enum class Kind { kInt, kDouble, kBool, kU64 };

struct Entry {
  const char* name;
  Kind kind;
  std::function<void*(RunConfig&)> ptr;
  const char* desc;
};

#define FIELD(name, kind, expr, desc) \
  {name, kind, [](RunConfig& c) -> void* { return &(expr); }, desc}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      FIELD("iterations_stage1", Kind::kInt, c.train.iterations_stage1,
            "stage-1 reconstruction iterations"),
      FIELD("iterations_stage2", Kind::kInt, c.train.iterations_stage2,
            "stage-2 articulation iterations (includes warm-up)"),
      FIELD("warmup_iters", Kind::kInt, c.train.warmup_iters, "stage-2 warm-up iterations"),
      FIELD("reseg_interval", Kind::kInt, c.train.reseg_interval,
            "iterations between segmentation re-evaluations"),
      FIELD("lr_centers", Kind::kDouble, c.train.lr_centers, "center learning rate (initial)"),
      FIELD("lr_centers_final", Kind::kDouble, c.train.lr_centers_final,
            "center learning rate after exponential decay"),
      FIELD("lr_rotations", Kind::kDouble, c.train.lr_rotations, "rotation learning rate"),
      FIELD("lr_scales", Kind::kDouble, c.train.lr_scales, "log-scale learning rate"),
      FIELD("lr_sh", Kind::kDouble, c.train.lr_sh, "SH coefficient learning rate"),
      FIELD("lr_sdf", Kind::kDouble, c.train.lr_sdf, "SDF weight learning rate"),
      FIELD("lr_k", Kind::kDouble, c.train.lr_k, "sharpness k learning rate (log-space)"),
      FIELD("lr_joint", Kind::kDouble, c.train.lr_joint, "joint parameter learning rate"),
      FIELD("lr_warmup_centers", Kind::kDouble, c.train.lr_warmup_centers,
            "center learning rate during stage-2 warm-up"),
      FIELD("densify_interval", Kind::kInt, c.train.densify_interval,
            "iterations between densify/prune passes"),
      FIELD("densify_start", Kind::kInt, c.train.densify_start, "first densify iteration"),
      FIELD("densify_end_frac", Kind::kDouble, c.train.densify_end_frac,
            "densification stops at this fraction of stage-1 iterations"),
      FIELD("densify_grad_threshold", Kind::kDouble, c.train.densify_grad_threshold,
            "mean positional gradient that triggers clone/split"),
      FIELD("prune_opacity", Kind::kDouble, c.train.prune_opacity,
            "peak opacity below which primitives are pruned"),
      FIELD("split_scale_frac", Kind::kDouble, c.train.split_scale_frac,
            "split (vs clone) above this fraction of the scene diagonal"),
      FIELD("max_gaussians", Kind::kInt, c.train.max_gaussians, "primitive count cap"),
      FIELD("init_gaussians", Kind::kInt, c.train.init_gaussians, "initial primitive count"),
      FIELD("lambda_c_ssim", Kind::kDouble, c.train.weights.lambda_c_ssim,
            "D-SSIM share of the color loss"),
      FIELD("lambda_unbias", Kind::kDouble, c.train.weights.lambda_unbias,
            "unbiased SDF regularization weight"),
      FIELD("lambda_normal", Kind::kDouble, c.train.weights.lambda_normal,
            "normal alignment weight"),
      FIELD("lambda_eik", Kind::kDouble, c.train.weights.lambda_eik, "Eikonal weight"),
      FIELD("lambda_dist", Kind::kDouble, c.train.weights.lambda_dist,
            "depth distortion weight (normalized depths)"),
      FIELD("sdf_hidden_layers", Kind::kInt, c.train.sdf_hidden_layers, "SDF MLP depth"),
      FIELD("sdf_hidden_width", Kind::kInt, c.train.sdf_hidden_width, "SDF MLP width"),
      FIELD("pe_frequencies", Kind::kInt, c.train.pe_frequencies,
            "positional encoding frequencies"),
      FIELD("eikonal_samples", Kind::kInt, c.train.eikonal_samples,
            "Eikonal samples per iteration"),
      FIELD("normal_samples", Kind::kInt, c.train.normal_samples,
            "normal-loss hit samples per iteration"),
      FIELD("unbias_max_samples", Kind::kInt, c.train.unbias_max_samples,
            "unbias samples per iteration (0 = all)"),
      FIELD("unbias_weight_threshold", Kind::kDouble, c.train.unbias_weight_threshold,
            "blend weight gate for unbias/normal hits"),
      FIELD("seed", Kind::kU64, c.train.seed, "master random seed"),
      FIELD("psnr_floor", Kind::kDouble, c.train.psnr_floor,
            "held-out PSNR the reconstruction must exceed"),
      FIELD("holdout_every", Kind::kInt, c.train.holdout_every,
            "every n-th view held out (0 = train on all)"),
      FIELD("motion_floor", Kind::kDouble, c.train.motion_floor,
            "min warm-up displacement (x scene diagonal) for motion"),
      FIELD("max_parts", Kind::kInt, c.train.max_parts, "articulated parts to recover"),
      FIELD("clip_norm", Kind::kDouble, c.train.clip_norm, "global gradient norm clip"),
      FIELD("bell_activation", Kind::kBool, c.train.bell_activation,
            "bell-shaped SDF->opacity activation (false: sigmoid ablation)"),
      FIELD("log_every", Kind::kInt, c.train.log_every, "training log interval"),
      FIELD("voxel_frac", Kind::kDouble, c.voxel_frac,
            "TSDF voxel size as a fraction of the scene diagonal"),
      FIELD("trunc_voxels", Kind::kDouble, c.trunc_voxels, "TSDF truncation in voxels"),
      FIELD("eval_samples", Kind::kInt, c.eval_samples, "surface samples for CD(ws)/F1"),
      FIELD("eval_rays_per_view", Kind::kInt, c.eval_rays_per_view, "rays per view for CD(rs)"),
      FIELD("f1_threshold", Kind::kDouble, c.f1_threshold, "F1 distance threshold"),
      FIELD("emd_samples", Kind::kInt, c.emd_samples, "point count for the EMD matching"),
      FIELD("chamfer_unsquared", Kind::kBool, c.chamfer_unsquared,
            "report unsquared Chamfer distances"),
  };
  return entries;
}

#undef FIELD

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError("config key \"" + key + "\": cannot parse \"" + v + "\" as a number");
  }
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Entry& e : registry()) {
    if (key != e.name) continue;
    void* p = e.ptr(*this);
    switch (e.kind) {
      case Kind::kInt: {
        double d = parse_double(value, key);
        if (d != std::floor(d))
          throw ValidationError("config key \"" + key + "\": expected an integer");
        *static_cast<int*>(p) = static_cast<int>(d);
        return;
      }
      case Kind::kDouble:
        *static_cast<double*>(p) = parse_double(value, key);
        return;
      case Kind::kBool: {
        if (value == "true" || value == "1") *static_cast<bool*>(p) = true;
        else if (value == "false" || value == "0") *static_cast<bool*>(p) = false;
        else
          throw ValidationError("config key \"" + key + "\": expected true/false");
        return;
      }
      case Kind::kU64: {
        double d = parse_double(value, key);
        if (d < 0 || d != std::floor(d))
          throw ValidationError("config key \"" + key + "\": expected a nonnegative integer");
        *static_cast<uint64_t*>(p) = static_cast<uint64_t>(d);
        return;
      }
    }
  }
  throw ValidationError("unknown config key \"" + key + "\"");
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    size_t b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      size_t x = s.find_first_not_of(" \t");
      size_t y = s.find_last_not_of(" \t");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::validate() const {
  train.validate();
  if (!(voxel_frac > 0 && voxel_frac < 0.5))
    throw ValidationError("voxel_frac must lie in (0, 0.5)");
  if (trunc_voxels < 2.0) throw ValidationError("trunc_voxels must be >= 2");
  if (eval_samples < 1 || eval_rays_per_view < 1 || emd_samples < 1)
    throw ValidationError("evaluation sample counts must be positive");
  if (!(f1_threshold > 0)) throw ValidationError("f1_threshold must be positive");
}

ExtractOptions RunConfig::extract_options() const {
  ExtractOptions o;
  o.voxel_size = 0;  // derived from the posed scene bounds via voxel_frac at call sites
  o.trunc_voxels = trunc_voxels;
  o.render.activation =
      train.bell_activation ? OpacityActivation::kBell : OpacityActivation::kSigmoid;
  return o;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions o;
  o.surface_samples = static_cast<size_t>(eval_samples);
  o.rays_per_view = static_cast<size_t>(eval_rays_per_view);
  o.f1_threshold = f1_threshold;
  o.emd_samples = static_cast<size_t>(emd_samples);
  o.squared_chamfer = !chamfer_unsquared;
  o.seed = train.seed;
  return o;
}

std::string RunConfig::help_table() {
  RunConfig defaults;
  std::ostringstream os;
  os << "Config keys (key=value file or --set key=value):\n";
  for (const Entry& e : registry()) {
    void* p = e.ptr(defaults);
    std::ostringstream val;
    switch (e.kind) {
      case Kind::kInt: val << *static_cast<int*>(p); break;
      case Kind::kDouble: val << *static_cast<double*>(p); break;
      case Kind::kBool: val << (*static_cast<bool*>(p) ? "true" : "false"); break;
      case Kind::kU64: val << *static_cast<uint64_t*>(p); break;
    }
    os << "  " << e.name << " = " << val.str();
    for (size_t i = val.str().size() + std::string(e.name).size(); i < 40; ++i) os << ' ';
    os << " # " << e.desc << "\n";
  }
  return os.str();
}

}  // namespace artsurf
