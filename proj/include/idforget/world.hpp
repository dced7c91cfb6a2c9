#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "idforget/autodiff.hpp"
#include "idforget/mlp.hpp"
#include "idforget/params.hpp"
#include "idforget/tensor.hpp"

namespace idf {

// Columns a pose index shifts the rendered image by.
inline constexpr int kPoseShift = 2;

struct WorldSpec {
  std::uint64_t seed = 0;
  std::size_t n_identities = 64;
  std::size_t latent_dim = 32;
  std::size_t channels = 3;
  std::size_t feature_h = 8;
  std::size_t feature_w = 8;
  std::size_t image_side = 16;
  std::size_t n_poses = 4;
  double noise_std = 0.01;

  std::size_t feature_size() const { return channels * feature_h * feature_w; }
  std::size_t image_size() const { return image_side * image_side; }
  Shape feature_shape() const { return {channels, feature_h, feature_w}; }
  // Throws ConfigError on invalid counts.
  void validate() const;

  friend bool operator==(const WorldSpec&, const WorldSpec&) = default;
};

// The fixed rendering operator: linear decode of a feature vector to pixel
// logits, sigmoid, then a circular column shift of kPoseShift * pose.
struct Renderer {
  std::size_t side = 0;
  std::size_t n_poses = 0;
  Tensor weight;  // image_size x feature_size
  Tensor bias;    // image_size

  // Single feature tensor (any shape with feature_size entries) -> image.
  Tensor render(const Tensor& feature, int pose) const;
  // Rows of features, one pose per row -> rows of images.
  Tensor render_rows(const Tensor& features, std::span<const int> poses) const;
  ad::Var render(ad::Graph& g, ad::Var features, std::span<const int> poses) const;

  void check_pose(int pose) const;
};

struct IdentityRecord {
  int id = 0;
  Tensor true_latent;
  std::vector<Tensor> images;  // one per pose, length image_side^2, values in [0,1]

  friend bool operator==(const IdentityRecord&, const IdentityRecord&) = default;
};

struct World {
  WorldSpec spec;
  Renderer renderer;
  std::vector<IdentityRecord> records;
  std::vector<int> forget_ids;
  std::vector<int> retain_ids;

  std::size_t size() const { return records.size(); }
  const IdentityRecord& record(int id) const;
  // Copy with the given forget set; everything else is retained. Throws
  // ConfigError on unknown ids, duplicates, or |retain| < |forget|.
  World with_forget_set(std::span<const int> forget) const;
  // Copy with an explicit disjoint partition.
  World with_partition(std::span<const int> forget, std::span<const int> retain) const;
  // pose-0 images of `ids` stacked as rows.
  Tensor images(std::span<const int> ids, int pose = 0) const;
};

// Deterministic world generation from spec.seed.
World synth_world(const WorldSpec& spec);

void save_world(const std::filesystem::path& path, const World& world);
World load_world(const std::filesystem::path& path);
std::string world_text(const World& world);

// Hidden widths of the pretrained networks. Output widths of the generator and
// encoder follow from the world spec.
// Mean perceptual distance between renders of distinct identities after
// calibration, in the range LPIPS reports for distinct faces.
inline constexpr double kPerceptualSpread = 0.45;

struct ModelShapes {
  std::vector<std::size_t> generator_hidden{192, 192};
  std::vector<std::size_t> encoder_hidden{96};
  std::size_t embedder_hidden = 64;
  std::size_t embedding_dim = 16;
  std::size_t perceptual_hidden = 64;
  std::size_t perceptual_dim = 32;
};

struct PretrainedModels {
  ParamSet generator;
  ParamSet encoder;
  ParamSet embedder;
  ParamSet perceptual;
  MlpArch generator_arch;
  MlpArch encoder_arch;
  MlpArch embedder_arch;
  MlpArch perceptual_arch;
  Tensor mean_latent;

  // Rows in, rows out. Embeddings are unit length.
  Tensor embed(const Tensor& images) const;
  Tensor perceive(const Tensor& images) const;
  Tensor encode(const Tensor& images) const;
  // Features of latent rows under `generator` (defaults to this->generator).
  Tensor features(const Tensor& latents) const;
  Tensor features(const ParamSet& generator, const Tensor& latents) const;

  ad::Var embed(ad::Graph& g, const ad::ParamVars& embedder_vars, ad::Var images) const;
};

// Rebuilds the layer widths from the stored tensors of a checkpoint.
MlpArch infer_arch(const ParamSet& params, const std::string& prefix = "");

// F(w): generator features for one latent, shaped like the world's feature tensor.
Tensor feature(const ParamSet& generator, const MlpArch& arch, const Tensor& latent, const WorldSpec& spec);
// E(x): latent code for one image.
Tensor encode(const ParamSet& encoder, const MlpArch& arch, const Tensor& image);
// Arithmetic mean of latent codes. Throws ConfigError on an empty set.
Tensor mean_latent(std::span<const Tensor> latents);
Tensor mean_latent_rows(const Tensor& latent_rows);

// Latents E(x) of every identity's pose-0 image, one row per identity id.
Tensor identity_latents(const World& world, const PretrainedModels& models);

struct PretrainConfig {
  std::size_t epochs = 2000;
  double lr = 2e-3;
  double cycle_weight = 0.1;
  double mse_threshold = 0.01;
  double id_threshold = 0.8;
  // Standardize latent coordinates after training (always centred).
  bool whiten_latents = false;
  ModelShapes shapes;
};

struct PretrainReport {
  double reconstruction_mse = 0.0;
  double id_similarity = 0.0;
  double inversion_error = 0.0;  // mean ||E(R(F(w);0)) - w|| / ||w||
  std::vector<double> loss_trace;
};

struct PretrainResult {
  PretrainedModels models;
  PretrainReport report;
};

class PretrainCriterionError : public std::runtime_error {
 public:
  PretrainCriterionError(const std::string& what, PretrainReport report)
      : std::runtime_error(what), report_(std::move(report)) {}
  const PretrainReport& report() const { return report_; }

 private:
  PretrainReport report_;
};

// Fits generator and encoder to the world (reconstruction over all poses plus
// an inversion term), builds the frozen embedder and perceptual networks, and
// checks the exit criterion (reconstruction MSE and ID similarity).
PretrainResult pretrain(const World& world, const PretrainConfig& cfg);

// Changes latent coordinates to z = A (w - offset) without changing G(E(x)):
// the encoder's output layer absorbs A and -offset, the generator's first
// layer absorbs A^-1 (`inverse`) and +offset.
void reparameterize_latents(PretrainedModels& models, const Tensor& offset, const Tensor& forward,
                            const Tensor& inverse);
// Centres `codes` (rows of latents) at the origin and, when `whiten` is set,
// maps their covariance to a multiple of the identity with the same trace.
void standardize_latents(PretrainedModels& models, const Tensor& codes, bool whiten);

// Writes generator, encoder, embedder and perceptual checkpoints into `dir`.
void save_pretrained(const std::filesystem::path& dir, const PretrainedModels& models);
// Loads the four checkpoints from `dir`, infers their layer widths and
// recomputes the mean latent over `world`. Throws ArtifactError when a file is
// missing or ShapeError when the networks do not fit the world.
PretrainedModels load_pretrained(const std::filesystem::path& dir, const World& world);

// Measures reconstruction quality of `models` on `world` without training.
PretrainReport assess_pretrained(const World& world, const PretrainedModels& models);

}  // namespace idf
