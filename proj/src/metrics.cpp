#include "idforget/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "idforget/errors.hpp"
#include "idforget/linalg.hpp"

namespace idf {

double id_similarity(const Tensor& x, const Tensor& y, const PretrainedModels& models) {
  if (x.size() != y.size()) throw ShapeError("id_similarity: image sizes differ");
  const Tensor e = models.embed(Tensor::stack(std::vector<Tensor>{x.reshaped({x.size()}), y.reshaped({y.size()})}));
  return dot(e.row(0), e.row(1));
}

GaussianStats gaussian_stats_of(const Tensor& embeddings) {
  const Tensor rows = embeddings.as_matrix();
  const std::size_t n = rows.rows(), e = rows.cols();
  if (n < 2) throw ConfigError("gaussian_stats: need at least 2 samples, got " + std::to_string(n));
  GaussianStats s;
  s.mean = Tensor({e}, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < e; ++c) s.mean[c] += rows(r, c);
  }
  s.mean = (1.0 / static_cast<double>(n)) * s.mean;
  s.covariance = Tensor({e, e}, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < e; ++i) {
      const double di = rows(r, i) - s.mean[i];
      for (std::size_t j = 0; j < e; ++j) s.covariance(i, j) += di * (rows(r, j) - s.mean[j]);
    }
  }
  s.covariance = (1.0 / static_cast<double>(n - 1)) * s.covariance;
  return s;
}

GaussianStats gaussian_stats(const Tensor& images, const PretrainedModels& models) {
  return gaussian_stats_of(models.embed(images));
}

double frechet(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size()) throw ShapeError("frechet: dimensions differ");
  require_square(a.covariance, "frechet");
  require_square(b.covariance, "frechet");
  if (a.covariance.rows() != a.mean.size() || b.covariance.rows() != b.mean.size()) {
    throw ShapeError("frechet: covariance size differs from mean");
  }
  constexpr double kTolerance = 1e-8;
  const EigenDecomposition eig_b = jacobi_eigen(b.covariance);
  for (double lambda : eig_b.values.values()) floored_eigenvalue(lambda, kTolerance);
  const Tensor root_a = sqrt_psd(a.covariance, kTolerance);
  const Tensor inner = symmetrized(matmul(matmul(root_a, b.covariance), root_a));
  double trace_root = 0.0;
  const EigenDecomposition eig_inner = jacobi_eigen(inner);
  for (double lambda : eig_inner.values.values()) trace_root += std::sqrt(floored_eigenvalue(lambda, kTolerance));

  double total = squared_distance(a.mean, b.mean);
  for (std::size_t i = 0; i < a.mean.size(); ++i) total += a.covariance(i, i) + b.covariance(i, i);
  total -= 2.0 * trace_root;
  return std::max(total, 0.0);
}

PixelMetrics pixel_metrics(const Tensor& x, const Tensor& y) {
  if (x.size() != y.size() || x.empty()) throw ShapeError("pixel_metrics: image sizes differ");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto n = static_cast<double>(x.size());
  PixelMetrics m;
  m.mse = mean_squared_error(x, y);
  m.psnr = m.mse > 0.0 ? std::min(kPsnrCap, 10.0 * std::log10(1.0 / m.mse)) : kPsnrCap;

  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cxy += (x[i] - mx) * (y[i] - my);
  }
  vx /= n;
  vy /= n;
  cxy /= n;
  m.ssim = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  return m;
}

double perceptual_distance(const Tensor& x, const Tensor& y, const PretrainedModels& models) {
  if (x.size() != y.size()) throw ShapeError("perceptual_distance: image sizes differ");
  return mean_squared_error(models.perceive(x.reshaped({x.size()})), models.perceive(y.reshaped({y.size()})));
}

double separability(const Tensor& group_a, const Tensor& group_b) {
  const Tensor a = group_a.as_matrix();
  const Tensor b = group_b.as_matrix();
  if (a.rows() < 2 || b.rows() < 2) throw ConfigError("separability: each group needs at least 2 points");
  if (a.cols() != b.cols()) throw ShapeError("separability: group widths differ");
  std::vector<Tensor> points;
  std::vector<int> label;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    points.push_back(a.row(r));
    label.push_back(0);
  }
  for (std::size_t r = 0; r < b.rows(); ++r) {
    points.push_back(b.row(r));
    label.push_back(1);
  }
  const std::size_t n = points.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dist[i * n + j] = dist[j * n + i] = std::sqrt(squared_distance(points[i], points[j]));
    }
  }
  const double size[2] = {static_cast<double>(a.rows()), static_cast<double>(b.rows())};
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double own = 0.0, other = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      (label[j] == label[i] ? own : other) += dist[i * n + j];
    }
    own /= size[label[i]] - 1.0;
    other /= size[1 - label[i]];
    const double denom = std::max(own, other);
    total += denom > 0.0 ? (other - own) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

double variance(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return var / static_cast<double>(values.size());
}

namespace {

struct SetRenders {
  SetReport report;
  Tensor after_embeddings;
};

SetRenders evaluate_set(const World& world, const Tensor& latents, const ParamSet& before, const ParamSet& after,
                        const PretrainedModels& models) {
  const std::size_t n = latents.rows(), n_poses = world.spec.n_poses;
  const Tensor f_before = models.features(before, latents);
  const Tensor f_after = models.features(after, latents);
  std::vector<Tensor> emb_before, emb_after;
  SetRenders out;
  SetReport& rep = out.report;
  rep.per_identity_mse.assign(n, 0.0);
  for (std::size_t c = 0; c < n_poses; ++c) {
    const std::vector<int> poses(n, static_cast<int>(c));
    const Tensor x_b = world.renderer.render_rows(f_before, poses);
    const Tensor x_a = world.renderer.render_rows(f_after, poses);
    const Tensor e_b = models.embed(x_b), e_a = models.embed(x_a);
    const Tensor p_b = models.perceive(x_b), p_a = models.perceive(x_a);
    for (std::size_t i = 0; i < n; ++i) {
      rep.id += dot(e_b.row(i), e_a.row(i));
      const PixelMetrics pm = pixel_metrics(x_b.row(i), x_a.row(i));
      rep.mse += pm.mse;
      rep.psnr += pm.psnr;
      rep.ssim += pm.ssim;
      rep.perceptual += mean_squared_error(p_b.row(i), p_a.row(i));
      rep.per_identity_mse[i] += pm.mse / static_cast<double>(n_poses);
      emb_before.push_back(e_b.row(i));
      emb_after.push_back(e_a.row(i));
    }
  }
  const double count = static_cast<double>(n * n_poses);
  rep.id /= count;
  rep.mse /= count;
  rep.psnr /= count;
  rep.ssim /= count;
  rep.perceptual /= count;
  out.after_embeddings = Tensor::stack(emb_after);
  rep.fid = frechet(gaussian_stats_of(Tensor::stack(emb_before)), gaussian_stats_of(out.after_embeddings));
  return out;
}

Tensor latents_of(const Tensor& all, std::span<const int> ids) {
  std::vector<Tensor> rows;
  for (int id : ids) rows.push_back(all.row(static_cast<std::size_t>(id)));
  return Tensor::stack(rows);
}

}  // namespace

EvalReport evaluate(const World& world, const ParamSet& theta_before, const ParamSet& theta_after,
                    const PretrainedModels& models, std::span<const int> forget_ids, std::span<const int> retain_ids) {
  if (forget_ids.empty() || retain_ids.empty()) throw ConfigError("evaluate: forget and retain sets must be non-empty");
  std::vector<bool> seen(world.size(), false);
  for (std::span<const int> ids : {forget_ids, retain_ids}) {
    for (int id : ids) {
      world.record(id);
      if (seen[static_cast<std::size_t>(id)]) throw ConfigError("evaluate: identity " + std::to_string(id) + " repeated");
      seen[static_cast<std::size_t>(id)] = true;
    }
  }
  const Tensor all = identity_latents(world, models);
  const SetRenders f = evaluate_set(world, latents_of(all, forget_ids), theta_before, theta_after, models);
  const SetRenders r = evaluate_set(world, latents_of(all, retain_ids), theta_before, theta_after, models);
  EvalReport report;
  report.forget = f.report;
  report.retain = r.report;
  report.separability = separability(f.after_embeddings, r.after_embeddings);
  return report;
}

std::string format_sig6(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x == 0.0 ? 0.0 : x);
  return buf;
}

std::string report_csv_row(const std::string& method, std::size_t n_forget, double d, std::uint64_t seed,
                           const EvalReport& r) {
  std::string row = method + "," + std::to_string(n_forget) + "," + format_sig6(d) + "," + std::to_string(seed);
  for (double v : {r.forget.id, r.retain.id, r.forget.fid, r.retain.fid, r.forget.mse, r.forget.psnr, r.forget.ssim,
                   r.forget.perceptual, r.separability}) {
    row += "," + format_sig6(v);
  }
  return row;
}

}  // namespace idf
