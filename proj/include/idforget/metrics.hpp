#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "idforget/linalg.hpp"
#include "idforget/params.hpp"
#include "idforget/tensor.hpp"
#include "idforget/world.hpp"

namespace idf {

// Cosine of the (unit-norm) embeddings of two images.
double id_similarity(const Tensor& x, const Tensor& y, const PretrainedModels& models);

struct GaussianStats {
  Tensor mean;        // E
  Tensor covariance;  // E x E, unbiased
};

// Statistics of embedding rows. Throws ConfigError for fewer than 2 rows.
GaussianStats gaussian_stats_of(const Tensor& embeddings);
GaussianStats gaussian_stats(const Tensor& images, const PretrainedModels& models);

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the trace term
// computed as 2 Tr sqrt(sqrt(S_a) S_b sqrt(S_a)). Clamped at 0.
double frechet(const GaussianStats& a, const GaussianStats& b);

struct PixelMetrics {
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

inline constexpr double kPsnrCap = 99.0;

// MSE, PSNR (capped) and single-window SSIM for images in [0, 1].
PixelMetrics pixel_metrics(const Tensor& x, const Tensor& y);

// MSE between perceptual-net features of the two images.
double perceptual_distance(const Tensor& x, const Tensor& y, const PretrainedModels& models);

// Mean silhouette coefficient of the two labelled groups (rows) under
// Euclidean distance. Each group needs at least 2 points.
double separability(const Tensor& group_a, const Tensor& group_b);

struct SetReport {
  double id = 0.0;
  double fid = 0.0;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;
  std::vector<double> per_identity_mse;  // mean over poses, in id order
};

struct EvalReport {
  SetReport forget;
  SetReport retain;
  double separability = 0.0;
};

// Compares renders of every id's latent, over all poses, before and after.
EvalReport evaluate(const World& world, const ParamSet& theta_before, const ParamSet& theta_after,
                    const PretrainedModels& models, std::span<const int> forget_ids, std::span<const int> retain_ids);

// Population variance.
double variance(std::span<const double> values);

inline constexpr const char* kReportCsvHeader =
    "method,n_forget,d,seed,id_forget,id_retain,fid_forget,fid_retain,mse_f,psnr_f,ssim_f,lpips_f,separability";

// Number with 6 significant digits.
std::string format_sig6(double x);
std::string report_csv_row(const std::string& method, std::size_t n_forget, double d, std::uint64_t seed,
                           const EvalReport& report);

}  // namespace idf
