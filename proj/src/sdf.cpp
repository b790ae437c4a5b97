#include "artsurf/sdf.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "artsurf/errors.hpp"
#include "artsurf/optimizer.hpp"
#include "artsurf/parallel.hpp"
#include "artsurf/rng.hpp"

namespace artsurf {

using json = nlohmann::json;

namespace {

// Softplus with beta = 10: smooth (C-infinity) so second derivatives exist for the
// double-backward used by Eikonal/normal regularization.
constexpr double kBeta = 10.0;

inline double act(double x) {
  double bx = kBeta * x;
  if (bx > 30.0) return x;
  return std::log1p(std::exp(bx)) / kBeta;
}
inline double act_d(double x) {
  double bx = kBeta * x;
  if (bx > 30.0) return 1.0;
  if (bx < -30.0) return std::exp(bx);
  return 1.0 / (1.0 + std::exp(-bx));
}
inline double act_dd(double x) {
  double s = act_d(x);
  return kBeta * s * (1.0 - s);
}

constexpr int kBatch = 256;

}  // namespace

SdfNetwork SdfNetwork::make(const std::vector<int>& hidden, int pe_frequencies, uint64_t seed) {
  SdfNetwork net;
  net.hidden_ = hidden;
  net.pe_frequencies_ = pe_frequencies;
  Rng rng(seed, "sdf-init");
  int in = net.input_dim();
  std::vector<int> dims;
  dims.push_back(in);
  for (int h : hidden) dims.push_back(h);
  dims.push_back(1);
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    Eigen::MatrixXd w(dims[l + 1], dims[l]);
    double std_dev = std::sqrt(2.0 / dims[l]);
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) w(r, c) = rng.normal() * std_dev;
    if (l + 2 == dims.size()) w.setZero();  // output layer starts flat
    net.weights_.push_back(std::move(w));
    net.biases_.push_back(Eigen::VectorXd::Zero(dims[l + 1]));
  }
  return net;
}

size_t SdfNetwork::num_params() const {
  size_t n = 0;
  for (size_t l = 0; l < weights_.size(); ++l)
    n += static_cast<size_t>(weights_[l].size()) + biases_[l].size();
  return n;
}

void SdfNetwork::get_params(std::vector<double>& out) const {
  out.clear();
  out.reserve(num_params());
  for (size_t l = 0; l < weights_.size(); ++l) {
    const auto& w = weights_[l];
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) out.push_back(w(r, c));
    for (int r = 0; r < biases_[l].size(); ++r) out.push_back(biases_[l](r));
  }
}

void SdfNetwork::set_params(const std::vector<double>& in) {
  if (in.size() != num_params()) throw RuntimeFailure("SdfNetwork::set_params: size mismatch");
  size_t i = 0;
  for (size_t l = 0; l < weights_.size(); ++l) {
    auto& w = weights_[l];
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) w(r, c) = in[i++];
    for (int r = 0; r < biases_[l].size(); ++r) biases_[l](r) = in[i++];
  }
}

void SdfGrads::init_like(const SdfNetwork& net) {
  dw.clear();
  db.clear();
  for (size_t l = 0; l < net.weights().size(); ++l) {
    dw.push_back(Eigen::MatrixXd::Zero(net.weights()[l].rows(), net.weights()[l].cols()));
    db.push_back(Eigen::VectorXd::Zero(net.biases()[l].size()));
  }
}

void SdfGrads::add(const SdfGrads& o) {
  for (size_t l = 0; l < dw.size(); ++l) {
    dw[l] += o.dw[l];
    db[l] += o.db[l];
  }
}

void SdfGrads::to_flat(std::vector<double>& out) const {
  out.clear();
  for (size_t l = 0; l < dw.size(); ++l) {
    const auto& w = dw[l];
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) out.push_back(w(r, c));
    for (int r = 0; r < db[l].size(); ++r) out.push_back(db[l](r));
  }
}

void SdfGrads::clear() {
  for (auto& w : dw) w.setZero();
  for (auto& b : db) b.setZero();
}

// All forward/backward passes share this helper so the positional encoding and its
// derivatives live in one place. Encoding: [x, sin(w_j x), cos(w_j x)]_{j<F} with
// w_j = pi * 2^j, applied componentwise.
struct SdfBackprop {
  const SdfNetwork& net;
  int freqs;
  int in_dim;

  explicit SdfBackprop(const SdfNetwork& n) : net(n), freqs(n.pe_frequencies_), in_dim(n.input_dim()) {}

  void encode(const Vec3& x, double* out) const {
    out[0] = x.x;
    out[1] = x.y;
    out[2] = x.z;
    int idx = 3;
    for (int j = 0; j < freqs; ++j) {
      double w = kPi * static_cast<double>(1 << j);
      for (int c = 0; c < 3; ++c) {
        double v = w * x[c];
        out[idx++] = std::sin(v);
        out[idx++] = std::cos(v);
      }
    }
  }

  // row -> (coordinate, d(pe_row)/d(coord), d2(pe_row)/d(coord)^2)
  void encode_derivs(const Vec3& x, double* d1, double* d2, int* coord) const {
    for (int c = 0; c < 3; ++c) {
      d1[c] = 1.0;
      d2[c] = 0.0;
      coord[c] = c;
    }
    int idx = 3;
    for (int j = 0; j < freqs; ++j) {
      double w = kPi * static_cast<double>(1 << j);
      for (int c = 0; c < 3; ++c) {
        double v = w * x[c];
        double s = std::sin(v), co = std::cos(v);
        d1[idx] = w * co;
        d2[idx] = -w * w * s;
        coord[idx] = c;
        idx++;
        d1[idx] = -w * s;
        d2[idx] = -w * w * co;
        coord[idx] = c;
        idx++;
      }
    }
  }
};

double SdfNetwork::eval(const Vec3& x) const {
  std::vector<double> v;
  eval_batch({x}, v);
  return v[0];
}

Vec3 SdfNetwork::gradient(const Vec3& x) const {
  std::vector<Vec3> g;
  gradient_batch({x}, g);
  return g[0];
}

namespace {

struct BatchWork {
  // Dense forward activations for one batch of points.
  Eigen::MatrixXd z0;                 // in_dim x B
  std::vector<Eigen::MatrixXd> a;     // pre-activations per hidden layer
  std::vector<Eigen::MatrixXd> z;     // activations per hidden layer
  Eigen::RowVectorXd f;               // 1 x B
};

void forward_batch(const SdfNetwork& net, const SdfBackprop& bp, const std::vector<Vec3>& xs,
                   size_t begin, size_t count, BatchWork& w) {
  int in_dim = bp.in_dim;
  w.z0.resize(in_dim, count);
  std::vector<double> enc(in_dim);
  for (size_t i = 0; i < count; ++i) {
    bp.encode(xs[begin + i], enc.data());
    for (int r = 0; r < in_dim; ++r) w.z0(r, static_cast<int>(i)) = enc[r];
  }
  int n_hidden = net.num_layers() - 1;
  w.a.resize(n_hidden);
  w.z.resize(n_hidden);
  const Eigen::MatrixXd* prev = &w.z0;
  for (int l = 0; l < n_hidden; ++l) {
    w.a[l] = net.weights()[l] * (*prev);
    w.a[l].colwise() += net.biases()[l];
    w.z[l] = w.a[l].unaryExpr([](double v) { return act(v); });
    prev = &w.z[l];
  }
  w.f = net.weights()[n_hidden] * (*prev);
  w.f.array() += net.biases()[n_hidden](0);
}

}  // namespace

void SdfNetwork::eval_batch(const std::vector<Vec3>& xs, std::vector<double>& values) const {
  values.resize(xs.size());
  if (xs.empty()) return;
  SdfBackprop bp(*this);
  size_t n_batches = (xs.size() + kBatch - 1) / kBatch;
  parallel_for(n_batches, [&](size_t b) {
    size_t begin = b * kBatch;
    size_t count = std::min<size_t>(kBatch, xs.size() - begin);
    BatchWork w;
    forward_batch(*this, bp, xs, begin, count, w);
    for (size_t i = 0; i < count; ++i) values[begin + i] = w.f(static_cast<int>(i));
  });
}

void SdfNetwork::gradient_batch(const std::vector<Vec3>& xs, std::vector<Vec3>& grads) const {
  grads.resize(xs.size());
  if (xs.empty()) return;
  SdfBackprop bp(*this);
  int n_hidden = num_layers() - 1;
  size_t n_batches = (xs.size() + kBatch - 1) / kBatch;
  parallel_for(n_batches, [&](size_t b) {
    size_t begin = b * kBatch;
    size_t count = std::min<size_t>(kBatch, xs.size() - begin);
    BatchWork w;
    forward_batch(*this, bp, xs, begin, count, w);
    // Reverse sweep with unit upstream on f, no weight grads.
    Eigen::MatrixXd g = weights_[n_hidden].transpose() * Eigen::RowVectorXd::Ones(count);
    for (int l = n_hidden - 1; l >= 0; --l) {
      Eigen::MatrixXd abar =
          (g.array() * w.a[l].unaryExpr([](double v) { return act_d(v); }).array()).matrix();
      g = weights_[l].transpose() * abar;
    }
    std::vector<double> d1(bp.in_dim), d2(bp.in_dim);
    std::vector<int> coord(bp.in_dim);
    for (size_t i = 0; i < count; ++i) {
      bp.encode_derivs(xs[begin + i], d1.data(), d2.data(), coord.data());
      Vec3 acc{0, 0, 0};
      for (int r = 0; r < bp.in_dim; ++r) acc[coord[r]] += g(r, static_cast<int>(i)) * d1[r];
      grads[begin + i] = acc;
    }
  });
}

void sdf_backward(const SdfNetwork& net, const std::vector<SdfBackwardItem>& items,
                  SdfGrads& grads, std::vector<Vec3>* x_grads) {
  if (items.empty()) return;
  SdfBackprop bp(net);
  int n_hidden = net.num_layers() - 1;
  size_t n_batches = (items.size() + kBatch - 1) / kBatch;
  std::vector<SdfGrads> partial(n_batches);
  std::vector<Vec3> local_xg(x_grads ? items.size() : 0);

  parallel_for(n_batches, [&](size_t b) {
    size_t begin = b * kBatch;
    size_t count = std::min<size_t>(kBatch, items.size() - begin);
    partial[b].init_like(net);
    auto& pg = partial[b];

    bool any_tangent = false;
    for (size_t i = 0; i < count; ++i) {
      const Vec3& p = items[begin + i].p;
      if (p.x != 0 || p.y != 0 || p.z != 0) any_tangent = true;
    }

    std::vector<Vec3> xs(count);
    for (size_t i = 0; i < count; ++i) xs[i] = items[begin + i].x;
    BatchWork w;
    forward_batch(net, bp, xs, 0, count, w);

    Eigen::RowVectorXd fbar(count);
    for (size_t i = 0; i < count; ++i) fbar(static_cast<int>(i)) = items[begin + i].fbar;

    std::vector<double> d1(bp.in_dim), d2(bp.in_dim);
    std::vector<int> coord(bp.in_dim);

    if (!any_tangent) {
      // Plain value backprop.
      pg.dw[n_hidden] += fbar * w.z[n_hidden - 1].transpose();
      pg.db[n_hidden](0) += fbar.sum();
      Eigen::MatrixXd g = net.weights()[n_hidden].transpose() * fbar;
      for (int l = n_hidden - 1; l >= 0; --l) {
        Eigen::MatrixXd abar =
            (g.array() * w.a[l].unaryExpr([](double v) { return act_d(v); }).array()).matrix();
        const Eigen::MatrixXd& zin = l == 0 ? w.z0 : w.z[l - 1];
        pg.dw[l] += abar * zin.transpose();
        pg.db[l] += abar.rowwise().sum();
        g = net.weights()[l].transpose() * abar;
      }
      if (x_grads) {
        for (size_t i = 0; i < count; ++i) {
          if (items[begin + i].x_grad_index < 0) continue;
          bp.encode_derivs(xs[i], d1.data(), d2.data(), coord.data());
          Vec3 acc{0, 0, 0};
          for (int r = 0; r < bp.in_dim; ++r) acc[coord[r]] += g(r, static_cast<int>(i)) * d1[r];
          local_xg[begin + i] = acc;
        }
      }
      return;
    }

    // Dual-number forward: tangent t tracks the directional derivative along p,
    // so the tangent output s equals p . grad f. Backprop through both streams
    // yields d(fbar*f + p . grad f)/d{W, b, x} in one sweep.
    Eigen::MatrixXd t0(bp.in_dim, count);
    for (size_t i = 0; i < count; ++i) {
      bp.encode_derivs(xs[i], d1.data(), d2.data(), coord.data());
      for (int r = 0; r < bp.in_dim; ++r)
        t0(r, static_cast<int>(i)) = d1[r] * items[begin + i].p[coord[r]];
    }
    std::vector<Eigen::MatrixXd> ta(n_hidden), t(n_hidden), phid(n_hidden);
    const Eigen::MatrixXd* tprev = &t0;
    for (int l = 0; l < n_hidden; ++l) {
      ta[l] = net.weights()[l] * (*tprev);
      phid[l] = w.a[l].unaryExpr([](double v) { return act_d(v); });
      t[l] = (phid[l].array() * ta[l].array()).matrix();
      tprev = &t[l];
    }
    // s = W_out t_L; upstream gradient on s is 1 (p already carries the scale).
    Eigen::RowVectorXd sbar = Eigen::RowVectorXd::Ones(count);

    pg.dw[n_hidden] += fbar * w.z[n_hidden - 1].transpose() + sbar * t[n_hidden - 1].transpose();
    pg.db[n_hidden](0) += fbar.sum();
    Eigen::MatrixXd gz = net.weights()[n_hidden].transpose() * fbar;
    Eigen::MatrixXd gt = net.weights()[n_hidden].transpose() * sbar;
    for (int l = n_hidden - 1; l >= 0; --l) {
      Eigen::MatrixXd phidd = w.a[l].unaryExpr([](double v) { return act_dd(v); });
      Eigen::MatrixXd abar =
          (gz.array() * phid[l].array() + gt.array() * phidd.array() * ta[l].array()).matrix();
      Eigen::MatrixXd tabar = (gt.array() * phid[l].array()).matrix();
      const Eigen::MatrixXd& zin = l == 0 ? w.z0 : w.z[l - 1];
      const Eigen::MatrixXd& tin = l == 0 ? t0 : t[l - 1];
      pg.dw[l] += abar * zin.transpose() + tabar * tin.transpose();
      pg.db[l] += abar.rowwise().sum();
      gz = net.weights()[l].transpose() * abar;
      gt = net.weights()[l].transpose() * tabar;
    }
    if (x_grads) {
      for (size_t i = 0; i < count; ++i) {
        if (items[begin + i].x_grad_index < 0) continue;
        bp.encode_derivs(xs[i], d1.data(), d2.data(), coord.data());
        Vec3 acc{0, 0, 0};
        const Vec3& p = items[begin + i].p;
        for (int r = 0; r < bp.in_dim; ++r) {
          acc[coord[r]] += gz(r, static_cast<int>(i)) * d1[r];
          // t0_r = d1_r * p_c depends on x through d1.
          acc[coord[r]] += gt(r, static_cast<int>(i)) * d2[r] * p[coord[r]];
        }
        local_xg[begin + i] = acc;
      }
    }
  });

  for (size_t b = 0; b < n_batches; ++b) grads.add(partial[b]);
  if (x_grads) {
    for (size_t i = 0; i < items.size(); ++i) {
      int idx = items[i].x_grad_index;
      if (idx >= 0) (*x_grads)[static_cast<size_t>(idx)] += local_xg[i];
    }
  }
}

namespace {
inline double log_cosh(double t) {
  double a = std::fabs(t);
  if (a > 20.0) return a - std::log(2.0);
  return std::log(std::cosh(a));
}
}  // namespace

double phi_k(double f, double k) {
  double t = std::fabs(k * f) * 0.5;  // |.| keeps symmetry bit-exact
  double sech = 1.0 / std::cosh(t);
  return 0.25 * sech * sech;
}

double phi_sigmoid(double f, double k) { return 1.0 / (1.0 + std::exp(-k * f)); }

double sdf_to_opacity(double f_i, double f_next, double k, OpacityActivation act,
                      SdfOpacityGrad* grad) {
  if (grad) *grad = {};
  if (act == OpacityActivation::kSigmoid) {
    double pi = phi_sigmoid(f_i, k);
    double pn = phi_sigmoid(f_next, k);
    double v = (pi - pn) / pi;
    if (v <= 0.0) return 0.0;
    if (grad) {
      double dpi = k * pi * (1 - pi);
      double dpn = k * pn * (1 - pn);
      grad->d_fi = dpi * pn / (pi * pi);
      grad->d_fnext = -dpn / pi;
      grad->d_k = (f_i * dpi / k) * pn / (pi * pi) - (f_next * dpn / k) / pi;
    }
    return v;
  }
  // log Phi_k(f) = log(1/4) - 2 log cosh(kf/2); sigma = 1 - exp(logPhi_n - logPhi_i).
  double delta = 2.0 * (log_cosh(0.5 * k * f_i) - log_cosh(0.5 * k * f_next));
  if (delta >= 0.0) return 0.0;
  double r = std::exp(delta);
  double v = 1.0 - r;
  if (grad) {
    double ti = std::tanh(0.5 * k * f_i);
    double tn = std::tanh(0.5 * k * f_next);
    // d delta/d f_i = k tanh(k f_i / 2), d delta/d f_next = -k tanh(k f_next / 2)
    grad->d_fi = -r * k * ti;
    grad->d_fnext = r * k * tn;
    grad->d_k = -r * (f_i * ti - f_next * tn);
  }
  return v;
}

void fit_sdf_supervised(SdfNetwork& net, const std::function<double(const Vec3&)>& target,
                        const Bounds3& bounds, int iters, int batch, double lr, uint64_t seed) {
  std::vector<double> params;
  net.get_params(params);
  AdamState adam;
  adam.resize(params.size());
  Rng rng(seed, "sdf-fit");
  Vec3 center = bounds.center();
  double focus_sigma = 0.1 * bounds.diagonal();
  std::vector<Vec3> pts(batch);
  std::vector<double> vals;
  SdfGrads grads;
  grads.init_like(net);
  std::vector<double> flat;
  for (int it = 0; it < iters; ++it) {
    Rng r = rng.fork(static_cast<uint64_t>(it));
    // Half uniform over the box, half packed around the center so the deep
    // interior is supervised too.
    for (int i = 0; i < batch; ++i) {
      if (i % 2 == 0) {
        pts[i] = {r.uniform(bounds.lo.x, bounds.hi.x), r.uniform(bounds.lo.y, bounds.hi.y),
                  r.uniform(bounds.lo.z, bounds.hi.z)};
      } else {
        pts[i] = center + Vec3{r.normal(), r.normal(), r.normal()} * focus_sigma;
      }
    }
    net.eval_batch(pts, vals);
    std::vector<SdfBackwardItem> items(batch);
    for (int i = 0; i < batch; ++i) {
      double err = vals[i] - target(pts[i]);
      items[i] = {pts[i], 2.0 * err / batch, {0, 0, 0}, -1};
    }
    grads.clear();
    sdf_backward(net, items, grads, nullptr);
    grads.to_flat(flat);
    net.get_params(params);
    adam_step(params, flat, adam, lr);
    net.set_params(params);
  }
}

void geometric_init(SdfNetwork& net, const Vec3& center, double radius, uint64_t seed) {
  Bounds3 box;
  double r2 = radius * 2.2;
  box.expand(center - Vec3{r2, r2, r2});
  box.expand(center + Vec3{r2, r2, r2});
  fit_sdf_supervised(
      net, [&](const Vec3& x) { return norm(x - center) - radius; }, box,
      600, 256, 1e-3, seed);
}

void SdfNetwork::save_json(const std::string& path) const {
  json j;
  j["widths"] = hidden_;
  j["pe_frequencies"] = pe_frequencies_;
  j["k"] = k();
  json ws = json::array(), bs = json::array();
  for (size_t l = 0; l < weights_.size(); ++l) {
    std::vector<double> flat;
    flat.reserve(weights_[l].size());
    for (int r = 0; r < weights_[l].rows(); ++r)
      for (int c = 0; c < weights_[l].cols(); ++c) flat.push_back(weights_[l](r, c));
    ws.push_back(flat);
    std::vector<double> b(biases_[l].data(), biases_[l].data() + biases_[l].size());
    bs.push_back(b);
  }
  j["weights"] = ws;
  j["biases"] = bs;
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out << j.dump() << "\n";
}

SdfNetwork SdfNetwork::load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open sdf checkpoint: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": JSON parse error: " + std::string(e.what()));
  }
  for (const char* key : {"widths", "k", "weights", "biases", "pe_frequencies"})
    if (!j.contains(key)) throw ValidationError(path + ": missing key \"" + key + "\"");
  SdfNetwork net;
  net.hidden_ = j["widths"].get<std::vector<int>>();
  net.pe_frequencies_ = j["pe_frequencies"].get<int>();
  double k = j["k"].get<double>();
  if (!(k > 0)) throw ValidationError(path + ": k must be positive");
  net.log_k_ = std::log(k);
  std::vector<int> dims;
  dims.push_back(net.input_dim());
  for (int h : net.hidden_) dims.push_back(h);
  dims.push_back(1);
  const auto& ws = j["weights"];
  const auto& bs = j["biases"];
  if (ws.size() != dims.size() - 1 || bs.size() != dims.size() - 1)
    throw ValidationError(path + ": layer count does not match widths");
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    auto wf = ws[l].get<std::vector<double>>();
    auto bf = bs[l].get<std::vector<double>>();
    if (static_cast<int>(wf.size()) != dims[l + 1] * dims[l] ||
        static_cast<int>(bf.size()) != dims[l + 1])
      throw ValidationError(path + ": weights[" + std::to_string(l) + "] has wrong size");
    Eigen::MatrixXd w(dims[l + 1], dims[l]);
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) w(r, c) = wf[static_cast<size_t>(r) * dims[l] + c];
    Eigen::VectorXd b = Eigen::Map<Eigen::VectorXd>(bf.data(), bf.size());
    net.weights_.push_back(std::move(w));
    net.biases_.push_back(std::move(b));
  }
  return net;
}

}  // namespace artsurf
