#pragma once

#include <vector>

#include "artsurf/image.hpp"
#include "artsurf/renderer.hpp"
#include "artsurf/sdf.hpp"

namespace artsurf {

struct LossWeights {
  double lambda_c_ssim = 0.2;  // D-SSIM share inside L_c
  double lambda_unbias = 0.1;
  double lambda_normal = 0.05;
  double lambda_eik = 0.05;
  double lambda_dist = 100.0;  // applied to normalized depths

  void validate() const;
};

struct LossReport {
  double total = 0, l1 = 0, dssim = 0, unbias = 0, normal = 0, eikonal = 0, distortion = 0;
};

// Recombines components into the total objective:
// L = (1-l)L1 + l*DSSIM + l1*unbias + l2*normal + l3*eik + ldist*dist.
double combine_losses(LossReport& rep, const LossWeights& w);

// Mean absolute per-channel error; optional gradient wrt the first image.
double loss_l1(const Image& render, const Image& target, Image* grad = nullptr);

// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2,
// zero-padded same-size windows. grad, when given, receives d(mean ssim)/d(render).
double ssim_mean(const Image& render, const Image& target, Image* grad = nullptr);

// D-SSIM = (1 - SSIM)/2; gradient wrt render.
double loss_dssim(const Image& render, const Image& target, Image* grad = nullptr);

// L_c = lambda * D-SSIM + (1 - lambda) * L1.
double loss_color(const Image& render, const Image& target, double lambda,
                  Image* grad = nullptr);

// One qualifying (ray, hit) sample of the unbiased SDF regularizer.
struct UnbiasSample {
  Vec3 point;     // o + t* r, in the SDF's (canonical) frame
  double weight;  // blend weight, detached
};

// Collects hits with blend weight above the threshold. The deformed->canonical
// pullback, when needed, is applied by the caller afterwards.
std::vector<UnbiasSample> gather_unbias_samples(const std::vector<RayRecord>& records,
                                                double weight_threshold = 0.05);

// sum w f^2 / sum w over the samples; fbar (dL/df per sample) optional.
// Gradients flow into the SDF values only; weights and points are detached.
double loss_unbias_value(const std::vector<UnbiasSample>& samples,
                         const std::vector<double>& f_values, std::vector<double>* fbar);

// Convenience form that evaluates the SDF itself.
double loss_unbias(const SdfNetwork& sdf, const std::vector<RayRecord>& records,
                   double weight_threshold = 0.05);

// mean(1 - |n.g| / (|n| |g|)) over pairs; pairs with |g| <= 1e-8 are skipped.
// Optional gradients wrt both sides.
double loss_normal(const std::vector<Vec3>& normals, const std::vector<Vec3>& sdf_grads,
                   std::vector<Vec3>* d_normals = nullptr,
                   std::vector<Vec3>* d_grads = nullptr);

// mean (|g| - 1)^2 over sample gradients.
double loss_eikonal(const std::vector<Vec3>& grads, std::vector<Vec3>* d_grads = nullptr);

// Per ray sum_{i,j} w_i w_j |t_i - t_j| (all ordered pairs) on depths t/depth_scale,
// averaged over rays. With upstream != 0 and extras != null, accumulates d/dw and d/dt
// into the per-hit extras (scaled by upstream).
double loss_distortion(const std::vector<RayRecord>& records, double depth_scale = 1.0,
                       double upstream = 0.0, HitExtras* extras = nullptr);

}  // namespace artsurf
