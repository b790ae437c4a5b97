#include "artsurf/losses.hpp"

#include <cmath>
#include <iostream>

#include "artsurf/errors.hpp"

namespace artsurf {

void LossWeights::validate() const {
  if (lambda_c_ssim < 0 || lambda_c_ssim > 1)
    throw ValidationError("lambda_c_ssim must lie in [0,1]");
  if (lambda_unbias < 0 || lambda_normal < 0 || lambda_eik < 0 || lambda_dist < 0)
    throw ValidationError("loss weights must be nonnegative");
}

double combine_losses(LossReport& rep, const LossWeights& w) {
  rep.total = (1.0 - w.lambda_c_ssim) * rep.l1 + w.lambda_c_ssim * rep.dssim +
              w.lambda_unbias * rep.unbias + w.lambda_normal * rep.normal +
              w.lambda_eik * rep.eikonal + w.lambda_dist * rep.distortion;
  return rep.total;
}

double loss_l1(const Image& render, const Image& target, Image* grad) {
  if (!render.same_shape(target)) throw ValidationError("loss_l1: image dimensions differ");
  double s = 0;
  size_t n = render.data.size();
  if (grad) *grad = Image(render.width, render.height, render.channels);
  for (size_t i = 0; i < n; ++i) {
    double d = render.data[i] - target.data[i];
    s += std::fabs(d);
    if (grad) grad->data[i] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / static_cast<double>(n);
  }
  return s / static_cast<double>(n);
}

namespace {

constexpr int kWin = 11;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

const double* ssim_kernel() {
  static double k[kWin];
  static bool init = false;
  if (!init) {
    double sum = 0;
    for (int i = 0; i < kWin; ++i) {
      double d = i - (kWin - 1) / 2.0;
      k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += k[i];
    }
    for (int i = 0; i < kWin; ++i) k[i] /= sum;
    init = true;
  }
  return k;
}

// Separable same-size convolution with zero padding, one channel plane.
void conv_same(const std::vector<double>& src, int w, int h, std::vector<double>& dst,
               std::vector<double>& tmp) {
  const double* k = ssim_kernel();
  const int r = kWin / 2;
  tmp.resize(src.size());
  dst.resize(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) {
        int xx = x + i;
        if (xx >= 0 && xx < w) s += k[i + r] * src[static_cast<size_t>(y) * w + xx];
      }
      tmp[static_cast<size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) {
        int yy = y + i;
        if (yy >= 0 && yy < h) s += k[i + r] * tmp[static_cast<size_t>(yy) * w + x];
      }
      dst[static_cast<size_t>(y) * w + x] = s;
    }
}

}  // namespace

double ssim_mean(const Image& render, const Image& target, Image* grad) {
  if (!render.same_shape(target)) throw ValidationError("ssim: image dimensions differ");
  int w = render.width, h = render.height, nc = render.channels;
  size_t npx = render.pixel_count();
  if (grad) *grad = Image(w, h, nc);
  double total = 0;
  std::vector<double> x(npx), y(npx), mx, my, cxx, cyy, cxy, plane, tmp;
  std::vector<double> pmu(npx), pxx(npx), pxy(npx), conv_pmu, conv_pxx, conv_pxy;
  for (int c = 0; c < nc; ++c) {
    for (size_t i = 0; i < npx; ++i) {
      x[i] = render.data[i * nc + c];
      y[i] = target.data[i * nc + c];
    }
    conv_same(x, w, h, mx, tmp);
    conv_same(y, w, h, my, tmp);
    plane.resize(npx);
    for (size_t i = 0; i < npx; ++i) plane[i] = x[i] * x[i];
    conv_same(plane, w, h, cxx, tmp);
    for (size_t i = 0; i < npx; ++i) plane[i] = y[i] * y[i];
    conv_same(plane, w, h, cyy, tmp);
    for (size_t i = 0; i < npx; ++i) plane[i] = x[i] * y[i];
    conv_same(plane, w, h, cxy, tmp);

    double csum = 0;
    double u = 1.0 / (static_cast<double>(npx) * nc);  // d(mean)/d(ssim_p)
    for (size_t i = 0; i < npx; ++i) {
      double mux = mx[i], muy = my[i];
      double sxx = cxx[i] - mux * mux;
      double syy = cyy[i] - muy * muy;
      double sxy = cxy[i] - mux * muy;
      double a1 = 2 * mux * muy + kSsimC1;
      double a2 = 2 * sxy + kSsimC2;
      double b1 = mux * mux + muy * muy + kSsimC1;
      double b2 = sxx + syy + kSsimC2;
      double s = (a1 * a2) / (b1 * b2);
      csum += s;
      if (grad) {
        double dA1 = a2 / (b1 * b2);
        double dA2 = a1 / (b1 * b2);
        double dB1 = -s / b1;
        double dB2 = -s / b2;
        // A2 and B2 carry explicit mu_x terms through sigma_xy and sigma_x^2.
        pmu[i] = u * (dA1 * 2 * muy + dB1 * 2 * mux + dA2 * (-2 * muy) + dB2 * (-2 * mux));
        pxx[i] = u * dB2;
        pxy[i] = u * dA2 * 2;
      }
    }
    total += csum;
    if (grad) {
      conv_same(pmu, w, h, conv_pmu, tmp);
      conv_same(pxx, w, h, conv_pxx, tmp);
      conv_same(pxy, w, h, conv_pxy, tmp);
      for (size_t i = 0; i < npx; ++i)
        grad->data[i * nc + c] = conv_pmu[i] + 2 * x[i] * conv_pxx[i] + y[i] * conv_pxy[i];
    }
  }
  return total / (static_cast<double>(npx) * nc);
}

double loss_dssim(const Image& render, const Image& target, Image* grad) {
  double s = ssim_mean(render, target, grad);
  if (grad)
    for (double& v : grad->data) v *= -0.5;
  return 0.5 * (1.0 - s);
}

double loss_color(const Image& render, const Image& target, double lambda, Image* grad) {
  Image g1, g2;
  double l1 = loss_l1(render, target, grad ? &g1 : nullptr);
  double ds = lambda > 0 ? loss_dssim(render, target, grad ? &g2 : nullptr) : 0.0;
  if (grad) {
    *grad = Image(render.width, render.height, render.channels);
    for (size_t i = 0; i < grad->data.size(); ++i)
      grad->data[i] =
          (1.0 - lambda) * g1.data[i] + (lambda > 0 ? lambda * g2.data[i] : 0.0);
  }
  return (1.0 - lambda) * l1 + lambda * ds;
}

std::vector<UnbiasSample> gather_unbias_samples(const std::vector<RayRecord>& records,
                                                double weight_threshold) {
  std::vector<UnbiasSample> out;
  for (const RayRecord& rec : records)
    for (const RayHit& hit : rec.hits)
      if (hit.weight > weight_threshold)
        out.push_back({rec.origin + rec.dir * hit.t_star, hit.weight});
  return out;
}

double loss_unbias_value(const std::vector<UnbiasSample>& samples,
                         const std::vector<double>& f_values, std::vector<double>* fbar) {
  if (fbar) fbar->assign(samples.size(), 0.0);
  if (samples.empty()) return 0.0;
  double wsum = 0, acc = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    wsum += samples[i].weight;
    acc += samples[i].weight * f_values[i] * f_values[i];
  }
  if (wsum <= 0) return 0.0;
  if (fbar)
    for (size_t i = 0; i < samples.size(); ++i)
      (*fbar)[i] = 2.0 * samples[i].weight * f_values[i] / wsum;
  return acc / wsum;
}

double loss_unbias(const SdfNetwork& sdf, const std::vector<RayRecord>& records,
                   double weight_threshold) {
  auto samples = gather_unbias_samples(records, weight_threshold);
  std::vector<Vec3> pts(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) pts[i] = samples[i].point;
  std::vector<double> f;
  sdf.eval_batch(pts, f);
  return loss_unbias_value(samples, f, nullptr);
}

double loss_normal(const std::vector<Vec3>& normals, const std::vector<Vec3>& sdf_grads,
                   std::vector<Vec3>* d_normals, std::vector<Vec3>* d_grads) {
  if (normals.size() != sdf_grads.size())
    throw ValidationError("loss_normal: pair counts differ");
  if (d_normals) d_normals->assign(normals.size(), Vec3{});
  if (d_grads) d_grads->assign(normals.size(), Vec3{});
  size_t used = 0;
  for (size_t i = 0; i < normals.size(); ++i)
    if (norm(sdf_grads[i]) > 1e-8 && norm(normals[i]) > 1e-8) used++;
  if (used == 0) {
    if (!normals.empty())
      std::cerr << "[warn] loss_normal: all SDF gradients degenerate; returning 0\n";
    return 0.0;
  }
  double acc = 0;
  double inv = 1.0 / static_cast<double>(used);
  for (size_t i = 0; i < normals.size(); ++i) {
    const Vec3& n = normals[i];
    const Vec3& g = sdf_grads[i];
    double nn = norm(n), gn = norm(g);
    if (gn <= 1e-8 || nn <= 1e-8) continue;
    double d = dot(n, g);
    double cosv = d / (nn * gn);
    acc += 1.0 - std::fabs(cosv);
    if (d_normals || d_grads) {
      double sign = d >= 0 ? 1.0 : -1.0;
      // d/dn [ -|cos| ] = -sign * (g/(|n||g|) - cos * n/|n|^2)
      if (d_normals)
        (*d_normals)[i] = (g * (1.0 / (nn * gn)) - n * (cosv / (nn * nn))) * (-sign * inv);
      if (d_grads)
        (*d_grads)[i] = (n * (1.0 / (nn * gn)) - g * (cosv / (gn * gn))) * (-sign * inv);
    }
  }
  return acc * inv;
}

double loss_eikonal(const std::vector<Vec3>& grads, std::vector<Vec3>* d_grads) {
  if (grads.empty()) throw ValidationError("loss_eikonal: needs at least one sample");
  if (d_grads) d_grads->assign(grads.size(), Vec3{});
  double acc = 0;
  double inv = 1.0 / static_cast<double>(grads.size());
  for (size_t i = 0; i < grads.size(); ++i) {
    double gn = norm(grads[i]);
    double d = gn - 1.0;
    acc += d * d;
    if (d_grads && gn > 1e-12) (*d_grads)[i] = grads[i] * (2.0 * d / gn * inv);
  }
  return acc * inv;
}

double loss_distortion(const std::vector<RayRecord>& records, double depth_scale,
                       double upstream, HitExtras* extras) {
  if (records.empty()) return 0.0;
  if (extras && extras->size() != records.size()) extras->resize(records.size());
  double acc = 0;
  double inv_rays = 1.0 / static_cast<double>(records.size());
  for (size_t r = 0; r < records.size(); ++r) {
    const auto& hits = records[r].hits;
    if (extras) (*extras)[r].resize(hits.size());
    if (hits.size() < 2) continue;
    // sum over all ordered pairs = 2 * sum_{i<j} w_i w_j (t_j - t_i) with sorted t.
    double ray_loss = 0;
    for (size_t i = 0; i < hits.size(); ++i) {
      double ti = hits[i].t_star / depth_scale;
      double dw = 0, dt = 0;
      for (size_t j = 0; j < hits.size(); ++j) {
        if (i == j) continue;
        double tj = hits[j].t_star / depth_scale;
        double gap = std::fabs(ti - tj);
        ray_loss += hits[i].weight * hits[j].weight * gap;
        dw += 2.0 * hits[j].weight * gap;
        dt += 2.0 * hits[i].weight * hits[j].weight * (ti > tj ? 1.0 : (ti < tj ? -1.0 : 0.0));
      }
      if (extras && upstream != 0.0) {
        (*extras)[r][i].d_w += upstream * dw * inv_rays;
        (*extras)[r][i].d_t += upstream * dt * inv_rays / depth_scale;
      }
    }
    acc += ray_loss;
  }
  return acc * inv_rays;
}

}  // namespace artsurf
