// Command-line front end: fixture generation, two-stage training, state-conditioned
// mesh extraction, rendering, and mesh evaluation.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "artsurf/config.hpp"
#include "artsurf/errors.hpp"
#include "artsurf/evaluation.hpp"
#include "artsurf/meshing.hpp"
#include "artsurf/parallel.hpp"
#include "artsurf/synth.hpp"
#include "artsurf/training.hpp"

namespace fs = std::filesystem;
using namespace artsurf;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
  bool json_logs = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "key=value config file");
  cmd->add_option("--set", args.sets, "config override, key=value (repeatable)");
  cmd->add_option("--seed", args.seed, "master random seed")
      ->each([&args](const std::string&) { args.seed_given = true; });
  cmd->add_option("--threads", args.threads, "worker threads (0 = hardware)");
  cmd->footer(RunConfig::help_table());
}

RunConfig make_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_file.empty()) cfg.load_file(args.config_file);
  for (const std::string& kv : args.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ValidationError("--set expects key=value, got \"" + kv + "\"");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed_given) cfg.train.seed = args.seed;
  cfg.train.json_logs = args.json_logs;
  cfg.validate();
  set_worker_count(args.threads);
  return cfg;
}

double checkpoint_voxel_size(const Checkpoint& ck, const RunConfig& cfg) {
  return std::fmax(ck.scene.bounds().diagonal(), 1e-6) * cfg.voxel_frac;
}

int run_synth(const std::string& spec_path, const std::string& out_dir) {
  FixtureSpec spec = FixtureSpec::parse_json(spec_path);
  generate_fixture(spec, out_dir);
  std::cout << "fixture written to " << out_dir << "\n";
  return 0;
}

int run_train(const std::string& data_dir, const std::string& out_dir, RunConfig& cfg) {
  Dataset state0 = load_dataset_dir((fs::path(data_dir) / "state_0").string());
  fs::create_directories(out_dir);
  TrainLog log((fs::path(out_dir) / (cfg.train.json_logs ? "train_log.jsonl" : "train_log.csv"))
                   .string(),
               cfg.train.json_logs);
  Stage1Result res = train_reconstruction(state0, cfg.train, &log);
  Checkpoint ck;
  ck.scene = std::move(res.scene);
  ck.sdf = std::move(res.sdf);
  ck.cameras = state0.cameras;
  ck.meta = config_to_json(cfg.train);
  ck.meta["stage"] = 1;
  ck.meta["iterations"] = cfg.train.iterations_stage1;
  ck.meta["holdout_psnr"] = res.holdout_psnr;
  ck.save(out_dir);
  std::cout << "stage-1 checkpoint written to " << out_dir << " (holdout PSNR "
            << res.holdout_psnr << " dB)\n";
  return 0;
}

int run_articulate(const std::string& data_dir, const std::string& ckpt_dir,
                   const std::string& out_dir, RunConfig& cfg) {
  Dataset state0 = load_dataset_dir((fs::path(data_dir) / "state_0").string());
  Dataset state1 = load_dataset_dir((fs::path(data_dir) / "state_1").string());
  Checkpoint ck = Checkpoint::load(ckpt_dir);
  fs::create_directories(out_dir);
  TrainLog log((fs::path(out_dir) / (cfg.train.json_logs ? "train_log.jsonl" : "train_log.csv"))
                   .string(),
               cfg.train.json_logs);
  Stage2Result res = train_articulation(state0, state1, ck.scene, ck.sdf, cfg.train, &log);
  ck.joints = res.joints;
  ck.meta = config_to_json(cfg.train);
  ck.meta["stage"] = 2;
  ck.meta["iterations"] = cfg.train.iterations_stage2;
  ck.meta["holdout_psnr_s0"] = res.holdout_psnr_s0;
  ck.save(out_dir);
  std::cout << "stage-2 checkpoint written to " << out_dir << " ("
            << res.joints.size() << " joint(s), holdout PSNR s=0 "
            << res.holdout_psnr_s0 << " dB)\n";
  return 0;
}

int run_extract(const std::string& ckpt_dir, double state, const std::string& out_path,
                RunConfig& cfg) {
  if (state < 0.0 || state > 1.0) throw ValidationError("state must lie in [0,1]");
  Checkpoint ck = Checkpoint::load(ckpt_dir);
  ExtractOptions opts = cfg.extract_options();
  opts.voxel_size = checkpoint_voxel_size(ck, cfg);
  TriangleMesh mesh = extract_textured_mesh(ck.scene, ck.sdf, ck.joints, state, ck.cameras, opts);
  save_mesh_ply(out_path, mesh);
  if (mesh.empty()) throw RuntimeFailure("extracted mesh is empty");
  std::cout << "mesh with " << mesh.vertices.size() << " vertices / " << mesh.faces.size()
            << " faces written to " << out_path << "\n";
  return 0;
}

int run_render(const std::string& ckpt_dir, double state, int view, const std::string& out_path,
               RunConfig& cfg) {
  if (state < 0.0 || state > 1.0) throw ValidationError("state must lie in [0,1]");
  Checkpoint ck = Checkpoint::load(ckpt_dir);
  if (view < 0 || view >= static_cast<int>(ck.cameras.size()))
    throw ValidationError("view index out of range (checkpoint has " +
                          std::to_string(ck.cameras.size()) + " views)");
  RenderOptions ropts;
  ropts.activation = cfg.train.bell_activation ? OpacityActivation::kBell
                                               : OpacityActivation::kSigmoid;
  RenderOutput out = render_articulated(ck.scene, ck.sdf, ck.joints, state, ck.cameras[view],
                                        ropts);
  save_png(out_path, out.rgb);
  fs::path depth_path = fs::path(out_path).replace_extension(".depth");
  save_depth(depth_path.string(), out.depth);
  std::cout << "render written to " << out_path << " and " << depth_path.string() << "\n";
  return 0;
}

int run_evaluate(const std::string& pred_path, const std::string& gt_path,
                 const std::string& cameras_path, const std::string& out_path, RunConfig& cfg) {
  TriangleMesh pred = load_mesh_ply(pred_path);
  TriangleMesh gt = load_mesh_ply(gt_path);
  std::vector<Camera> cams = load_cameras_json(cameras_path);
  if (cams.empty()) throw ValidationError(cameras_path + ": no views");
  MetricReport rep = evaluate_meshes(pred, gt, cams, cfg.eval_options());
  save_metric_report(out_path, rep);
  std::cout << "cd_ws=" << rep.cd_ws << " cd_rs=" << rep.cd_rs << " f1=" << rep.f1
            << " emd=" << rep.emd << " -> " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Articulated-object surface reconstruction from two-state multi-view images"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string spec_path, data_dir, ckpt_dir, out_path, pred_path, gt_path, cameras_path;
  double state = 0.0;
  int view = 0;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic two-state fixture");
  synth->add_option("--spec", spec_path, "fixture spec JSON")->required();
  synth->add_option("--out", out_path, "output dataset directory")->required();
  add_common(synth, common);

  CLI::App* train = app.add_subcommand("train", "stage-1 surface reconstruction (state 0)");
  train->add_option("--data", data_dir, "dataset directory (contains state_0/)")->required();
  train->add_option("--out", out_path, "output checkpoint directory")->required();
  train->add_flag("--json-logs", common.json_logs, "line-delimited JSON training log");
  add_common(train, common);

  CLI::App* artic = app.add_subcommand("articulate", "stage-2 articulation recovery");
  artic->add_option("--data", data_dir, "dataset directory (state_0/ and state_1/)")->required();
  artic->add_option("--ckpt", ckpt_dir, "stage-1 checkpoint")->required();
  artic->add_option("--out", out_path, "output checkpoint directory")->required();
  artic->add_flag("--json-logs", common.json_logs, "line-delimited JSON training log");
  add_common(artic, common);

  CLI::App* extract = app.add_subcommand("extract", "extract a textured mesh at a state");
  extract->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  extract->add_option("--state", state, "articulation state in [0,1]")->required();
  extract->add_option("--out", out_path, "output mesh PLY")->required();
  add_common(extract, common);

  CLI::App* render = app.add_subcommand("render", "render a training view at a state");
  render->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  render->add_option("--state", state, "articulation state in [0,1]")->required();
  render->add_option("--view", view, "camera index from the checkpoint ring")->required();
  render->add_option("--out", out_path, "output PNG (a .depth file is written alongside)")
      ->required();
  add_common(render, common);

  CLI::App* evaluate = app.add_subcommand("evaluate", "CD/F1/EMD metrics between two meshes");
  evaluate->add_option("--pred", pred_path, "predicted mesh PLY")->required();
  evaluate->add_option("--gt", gt_path, "ground-truth mesh PLY")->required();
  evaluate->add_option("--cameras", cameras_path, "test cameras JSON (for CD(rs))")->required();
  evaluate->add_option("--out", out_path, "output report JSON")->required();
  add_common(evaluate, common);

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = make_config(common);
    if (synth->parsed()) return run_synth(spec_path, out_path);
    if (train->parsed()) return run_train(data_dir, out_path, cfg);
    if (artic->parsed()) return run_articulate(data_dir, ckpt_dir, out_path, cfg);
    if (extract->parsed()) return run_extract(ckpt_dir, state, out_path, cfg);
    if (render->parsed()) return run_render(ckpt_dir, state, view, out_path, cfg);
    if (evaluate->parsed()) return run_evaluate(pred_path, gt_path, cameras_path, out_path, cfg);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeFailure& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
