#include "idforget/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "idforget/adam.hpp"
#include "idforget/checkpoint.hpp"
#include "idforget/errors.hpp"
#include "idforget/linalg.hpp"
#include "idforget/rng.hpp"

namespace idf {

void WorldSpec::validate() const {
  if (n_identities < 1 || latent_dim < 1 || channels < 1 || feature_h < 1 || feature_w < 1 || image_side < 1 ||
      n_poses < 1) {
    throw ConfigError("world spec: all counts must be >= 1");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("world spec: noise_std must be >= 0");
  if (feature_size() > 4 * image_size()) {
    throw ConfigError("world spec: feature element count exceeds 4x the image element count");
  }
}

// --- renderer ---------------------------------------------------------------

void Renderer::check_pose(int pose) const {
  if (pose < 0 || static_cast<std::size_t>(pose) >= n_poses) {
    throw ConfigError("pose " + std::to_string(pose) + " out of range [0," + std::to_string(n_poses) + ")");
  }
}

ad::Var Renderer::render(ad::Graph& g, ad::Var features, std::span<const int> poses) const {
  for (int p : poses) check_pose(p);
  const ad::Var w = g.constant(weight);
  const ad::Var b = g.constant(bias);
  const ad::Var logits = ad::affine(g, features, w, b);
  const ad::Var pixels = ad::sigmoid(g, logits);
  std::vector<int> shifts(poses.begin(), poses.end());
  for (int& s : shifts) s *= kPoseShift;
  return ad::shift_columns(g, pixels, side, side, shifts);
}

Tensor Renderer::render_rows(const Tensor& features, std::span<const int> poses) const {
  ad::Graph g;
  return g.value(render(g, g.constant(features.as_matrix()), poses));
}

Tensor Renderer::render(const Tensor& feature, int pose) const {
  const int poses[1] = {pose};
  const Tensor flat = feature.reshaped({feature.size()});
  ad::Graph g;
  return g.value(render(g, g.constant(flat), poses));
}

// --- world ------------------------------------------------------------------

const IdentityRecord& World::record(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= records.size()) {
    throw UnknownIdentityError("unknown identity " + std::to_string(id));
  }
  return records[static_cast<std::size_t>(id)];
}

World World::with_partition(std::span<const int> forget, std::span<const int> retain) const {
  std::set<int> seen;
  for (int id : forget) {
    record(id);
    if (!seen.insert(id).second) throw ConfigError("identity " + std::to_string(id) + " listed twice");
  }
  for (int id : retain) {
    record(id);
    if (!seen.insert(id).second) throw ConfigError("identity " + std::to_string(id) + " is in both sets or repeated");
  }
  if (retain.size() < forget.size()) throw ConfigError("retain set must be at least as large as the forget set");
  World out = *this;
  out.forget_ids.assign(forget.begin(), forget.end());
  out.retain_ids.assign(retain.begin(), retain.end());
  return out;
}

World World::with_forget_set(std::span<const int> forget) const {
  std::set<int> f(forget.begin(), forget.end());
  std::vector<int> retain;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!f.contains(static_cast<int>(i))) retain.push_back(static_cast<int>(i));
  }
  return with_partition(forget, retain);
}

Tensor World::images(std::span<const int> ids, int pose) const {
  renderer.check_pose(pose);
  std::vector<Tensor> rows;
  rows.reserve(ids.size());
  for (int id : ids) rows.push_back(record(id).images[static_cast<std::size_t>(pose)]);
  return Tensor::stack(rows);
}

namespace {

constexpr std::size_t kNatureHidden = 64;
constexpr double kLogitScale = 1.2;

// Smooth decode: every feature cell spreads over nearby pixels with a
// Gaussian footprint whose width grows with the channel index.
Tensor smooth_decode(const WorldSpec& spec, Rng& rng) {
  const std::size_t P = spec.image_size(), F = spec.feature_size();
  const std::size_t H = spec.feature_h, W = spec.feature_w, S = spec.image_side;
  Tensor weight({P, F}, 0.0);
  const double sy = static_cast<double>(S) / static_cast<double>(H);
  const double sx = static_cast<double>(S) / static_cast<double>(W);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    const double sigma = 0.5 * (sy + sx) * (0.5 + 0.6 * static_cast<double>(c));
    const double gain = standard_normal(rng);
    for (std::size_t py = 0; py < S; ++py) {
      for (std::size_t px = 0; px < S; ++px) {
        const std::size_t p = py * S + px;
        double total = 0.0;
        for (std::size_t gy = 0; gy < H; ++gy) {
          for (std::size_t gx = 0; gx < W; ++gx) {
            const double dy = static_cast<double>(py) - ((static_cast<double>(gy) + 0.5) * sy - 0.5);
            const double dx = static_cast<double>(px) - ((static_cast<double>(gx) + 0.5) * sx - 0.5);
            const double k = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            weight(p, c * H * W + gy * W + gx) = k;
            total += k;
          }
        }
        for (std::size_t j = 0; j < H * W; ++j) weight(p, c * H * W + j) *= gain / total;
      }
    }
  }
  return weight;
}

}  // namespace

World synth_world(const WorldSpec& spec) {
  spec.validate();
  const std::size_t N = spec.n_identities, D = spec.latent_dim, F = spec.feature_size(), P = spec.image_size();

  Rng render_rng = derive_stream(spec.seed, "world.render");
  Rng latent_rng = derive_stream(spec.seed, "world.latent");
  Rng nature_rng = derive_stream(spec.seed, "world.nature");
  Rng noise_rng = derive_stream(spec.seed, "world.noise");

  World world;
  world.spec = spec;
  world.renderer.side = spec.image_side;
  world.renderer.n_poses = spec.n_poses;
  world.renderer.weight = smooth_decode(spec, render_rng);

  // Fixed random 2-layer map from the true latent to feature space.
  const MlpArch nature_arch{{D, kNatureHidden, F}, 0.2};
  const ParamSet nature = init_mlp(nature_arch, nature_rng);

  Tensor true_latents({N, D});
  for (double& x : true_latents.values()) x = standard_normal(latent_rng);
  const Tensor nature_features = forward_mlp(nature, true_latents, nature_arch);

  // Calibrate decode so pixel logits have zero mean per pixel and a fixed
  // overall spread.
  ad::Graph g;
  const Tensor logits = g.value(ad::affine(g, g.constant(nature_features), g.constant(world.renderer.weight),
                                           g.constant(Tensor({P}, 0.0))));
  Tensor pixel_mean({P}, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t p = 0; p < P; ++p) pixel_mean[p] += logits(i, p) / static_cast<double>(N);
  }
  double var = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t p = 0; p < P; ++p) var += std::pow(logits(i, p) - pixel_mean[p], 2);
  }
  var /= static_cast<double>(N * P);
  const double scale = var > 0.0 ? kLogitScale / std::sqrt(var) : 1.0;
  world.renderer.weight = scale * world.renderer.weight;
  world.renderer.bias = Tensor({P}, 0.0);
  for (std::size_t p = 0; p < P; ++p) world.renderer.bias[p] = -scale * pixel_mean[p];

  for (std::size_t i = 0; i < N; ++i) {
    IdentityRecord rec;
    rec.id = static_cast<int>(i);
    rec.true_latent = true_latents.row(i);
    const Tensor f = nature_features.row(i);
    for (std::size_t c = 0; c < spec.n_poses; ++c) {
      Tensor img = world.renderer.render(f, static_cast<int>(c));
      for (double& x : img.values()) {
        if (spec.noise_std > 0.0) x += spec.noise_std * standard_normal(noise_rng);
        x = std::clamp(x, 0.0, 1.0);
      }
      rec.images.push_back(std::move(img));
    }
    world.records.push_back(std::move(rec));
  }

  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      if (squared_distance(world.records[i].images[0], world.records[j].images[0]) <= 0.0) {
        throw NumericalError("synth_world: identities " + std::to_string(i) + " and " + std::to_string(j) +
                             " rendered identically");
      }
    }
  }
  for (std::size_t i = 0; i < N; ++i) world.retain_ids.push_back(static_cast<int>(i));
  return world;
}

// --- world file ---------------------------------------------------------------

namespace {

std::string join_ids(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<int> split_ids(const std::string& text) {
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) ids.push_back(std::stoi(tok));
  }
  return ids;
}

std::string record_key(int id, const std::string& field) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id%04d.", id);
  return buf + field;
}

}  // namespace

std::string world_text(const World& world) {
  const WorldSpec& s = world.spec;
  std::ostringstream out;
  out << "seed=" << s.seed << '\n'
      << "n_identities=" << s.n_identities << '\n'
      << "latent_dim=" << s.latent_dim << '\n'
      << "channels=" << s.channels << '\n'
      << "feature_h=" << s.feature_h << '\n'
      << "feature_w=" << s.feature_w << '\n'
      << "image_side=" << s.image_side << '\n'
      << "n_poses=" << s.n_poses << '\n'
      << "noise_std=" << format_double(s.noise_std) << '\n'
      << "forget_ids=" << join_ids(world.forget_ids) << '\n'
      << "retain_ids=" << join_ids(world.retain_ids) << '\n'
      << "---\n";
  ParamSet tensors;
  tensors.set("render.weight", world.renderer.weight);
  tensors.set("render.bias", world.renderer.bias);
  for (const auto& rec : world.records) {
    tensors.set(record_key(rec.id, "latent"), rec.true_latent);
    for (std::size_t c = 0; c < rec.images.size(); ++c) {
      tensors.set(record_key(rec.id, "pose" + std::to_string(c)), rec.images[c]);
    }
  }
  write_params(out, tensors);
  return out.str();
}

void save_world(const std::filesystem::path& path, const World& world) { write_text_file(path, world_text(world)); }

World load_world(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open world file " + path.string());
  World world;
  WorldSpec& s = world.spec;
  std::string line;
  bool separator = false;
  try {
    while (std::getline(in, line)) {
      if (line == "---") {
        separator = true;
        break;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ArtifactError("world header line without '=': " + line);
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "seed") s.seed = std::stoull(value);
      else if (key == "n_identities") s.n_identities = std::stoul(value);
      else if (key == "latent_dim") s.latent_dim = std::stoul(value);
      else if (key == "channels") s.channels = std::stoul(value);
      else if (key == "feature_h") s.feature_h = std::stoul(value);
      else if (key == "feature_w") s.feature_w = std::stoul(value);
      else if (key == "image_side") s.image_side = std::stoul(value);
      else if (key == "n_poses") s.n_poses = std::stoul(value);
      else if (key == "noise_std") s.noise_std = std::stod(value);
      else if (key == "forget_ids") world.forget_ids = split_ids(value);
      else if (key == "retain_ids") world.retain_ids = split_ids(value);
      else throw ArtifactError("unknown world header key '" + key + "'");
    }
  } catch (const std::logic_error& e) {
    throw ArtifactError("world file " + path.string() + ": bad header value (" + e.what() + ")");
  }
  if (!separator) throw ArtifactError("world file " + path.string() + ": missing '---' separator");
  s.validate();
  const ParamSet tensors = read_params(in);
  try {
    world.renderer.side = s.image_side;
    world.renderer.n_poses = s.n_poses;
    world.renderer.weight = tensors.at("render.weight");
    world.renderer.bias = tensors.at("render.bias");
    for (std::size_t i = 0; i < s.n_identities; ++i) {
      IdentityRecord rec;
      rec.id = static_cast<int>(i);
      rec.true_latent = tensors.at(record_key(rec.id, "latent"));
      for (std::size_t c = 0; c < s.n_poses; ++c) {
        rec.images.push_back(tensors.at(record_key(rec.id, "pose" + std::to_string(c))));
      }
      world.records.push_back(std::move(rec));
    }
  } catch (const ShapeError& e) {
    throw ArtifactError("world file " + path.string() + ": " + e.what());
  }
  return world;
}

// --- models -------------------------------------------------------------------

Tensor PretrainedModels::embed(const Tensor& images) const {
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, embedder, false);
  return g.value(embed(g, vars, g.constant(images.as_matrix())));
}

ad::Var PretrainedModels::embed(ad::Graph& g, const ad::ParamVars& embedder_vars, ad::Var images) const {
  return ad::normalize_rows(g, forward_mlp(g, embedder_vars, images, embedder_arch));
}

Tensor PretrainedModels::perceive(const Tensor& images) const {
  return forward_mlp(perceptual, images.as_matrix(), perceptual_arch);
}

Tensor PretrainedModels::encode(const Tensor& images) const {
  return forward_mlp(encoder, images.as_matrix(), encoder_arch);
}

Tensor PretrainedModels::features(const Tensor& latents) const { return features(generator, latents); }

Tensor PretrainedModels::features(const ParamSet& gen, const Tensor& latents) const {
  return forward_mlp(gen, latents.as_matrix(), generator_arch);
}

MlpArch infer_arch(const ParamSet& params, const std::string& prefix) {
  MlpArch arch;
  for (std::size_t k = 0;; ++k) {
    const std::string w = layer_weight_name(prefix, k);
    if (!params.contains(w)) break;
    const Tensor& t = params.at(w);
    if (t.ndim() != 2) throw ShapeError("infer_arch: " + w + " is not a matrix");
    if (k == 0) arch.widths.push_back(t.shape()[1]);
    if (t.shape()[1] != arch.widths.back()) throw ShapeError("infer_arch: width mismatch at " + w);
    arch.widths.push_back(t.shape()[0]);
  }
  if (arch.widths.size() < 2) throw ShapeError("infer_arch: no layers found");
  return arch;
}

Tensor feature(const ParamSet& generator, const MlpArch& arch, const Tensor& latent, const WorldSpec& spec) {
  if (latent.size() != arch.input_width()) {
    throw ShapeError("feature: latent length " + std::to_string(latent.size()) + " != " +
                     std::to_string(arch.input_width()));
  }
  Tensor out = forward_mlp(generator, latent.reshaped({latent.size()}), arch);
  if (out.size() != spec.feature_size()) throw ShapeError("feature: generator output does not match feature shape");
  return out.reshaped(spec.feature_shape());
}

Tensor encode(const ParamSet& encoder, const MlpArch& arch, const Tensor& image) {
  if (image.size() != arch.input_width()) {
    throw ShapeError("encode: image length " + std::to_string(image.size()) + " != " +
                     std::to_string(arch.input_width()));
  }
  return forward_mlp(encoder, image.reshaped({image.size()}), arch);
}

Tensor mean_latent(std::span<const Tensor> latents) {
  if (latents.empty()) throw ConfigError("mean_latent: empty latent set");
  Tensor sum({latents.front().size()}, 0.0);
  for (const auto& w : latents) {
    if (w.size() != sum.size()) throw ShapeError("mean_latent: latent lengths differ");
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += w[i];
  }
  return (1.0 / static_cast<double>(latents.size())) * sum;
}

Tensor mean_latent_rows(const Tensor& latent_rows) {
  std::vector<Tensor> rows;
  for (std::size_t r = 0; r < latent_rows.rows(); ++r) rows.push_back(latent_rows.row(r));
  return mean_latent(rows);
}

Tensor identity_latents(const World& world, const PretrainedModels& models) {
  std::vector<int> ids(world.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  return models.encode(world.images(ids, 0));
}

// --- pretraining --------------------------------------------------------------

namespace {

std::vector<int> all_ids(const World& world) {
  std::vector<int> ids(world.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  return ids;
}

Tensor mean_image(const World& world) {
  const std::size_t P = world.spec.image_size();
  Tensor mean({P}, 0.0);
  double count = 0.0;
  for (const auto& rec : world.records) {
    for (const auto& img : rec.images) {
      for (std::size_t p = 0; p < P; ++p) mean[p] += img[p];
      count += 1.0;
    }
  }
  return (1.0 / count) * mean;
}

// Random network whose first layer is centred on the world's mean image, so
// outputs describe deviations from the average face.
ParamSet centred_random_net(const MlpArch& arch, const Tensor& center, Rng& rng) {
  ParamSet p = init_mlp(arch, rng);
  const Tensor& w0 = p.at(layer_weight_name("", 0));
  Tensor b0({arch.widths[1]}, 0.0);
  for (std::size_t o = 0; o < arch.widths[1]; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < arch.widths[0]; ++i) s += w0(o, i) * center[i];
    b0[o] = -s;
  }
  p.set(layer_bias_name("", 0), b0);
  return p;
}

// Rescales the perceptual net's output layer so the mean perceptual distance
// between distinct identities equals kPerceptualSpread.
void calibrate_perceptual(PretrainedModels& m, const Tensor& images) {
  const Tensor feats = m.perceive(images);
  const std::size_t n = feats.rows();
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j, ++pairs) sum += mean_squared_error(feats.row(i), feats.row(j));
  }
  if (pairs == 0 || !(sum > 0.0)) return;
  const double scale = std::sqrt(kPerceptualSpread * static_cast<double>(pairs) / sum);
  const std::size_t last = m.perceptual_arch.layers() - 1;
  for (const std::string& name : {layer_weight_name("", last), layer_bias_name("", last)}) {
    for (double& x : m.perceptual.at(name).values()) x *= scale;
  }
}

}  // namespace

void reparameterize_latents(PretrainedModels& models, const Tensor& offset, const Tensor& forward,
                            const Tensor& inverse) {
  const std::size_t D = offset.size();
  const std::size_t last = models.encoder_arch.layers() - 1;
  Tensor& enc_weight = models.encoder.at(layer_weight_name("", last));
  Tensor& enc_bias = models.encoder.at(layer_bias_name("", last));
  Tensor& gen_weight = models.generator.at(layer_weight_name("", 0));
  Tensor& gen_bias = models.generator.at(layer_bias_name("", 0));
  if (enc_bias.size() != D || gen_weight.cols() != D || forward.rows() != D || forward.cols() != D ||
      inverse.rows() != D || inverse.cols() != D) {
    throw ShapeError("reparameterize_latents: sizes do not match the latent width");
  }
  // Encoder: A (W h + b - offset).
  Tensor shifted = enc_bias - offset;
  enc_weight = matmul(forward, enc_weight);
  enc_bias = matmul(forward, shifted.reshaped({D, 1})).reshaped({D});
  // Generator first layer: W0 (A^-1 z + offset) + b0.
  gen_bias = gen_bias + matmul(gen_weight, offset.reshaped({D, 1})).reshaped({gen_bias.size()});
  gen_weight = matmul(gen_weight, inverse);
}

void standardize_latents(PretrainedModels& models, const Tensor& codes, bool whiten) {
  const Tensor rows = codes.as_matrix();
  const std::size_t n = rows.rows(), D = rows.cols();
  const Tensor offset = mean_latent_rows(rows);
  Tensor forward({D, D}, 0.0), inverse({D, D}, 0.0);
  for (std::size_t i = 0; i < D; ++i) forward(i, i) = inverse(i, i) = 1.0;
  if (whiten && n > 1) {
    Tensor cov({D, D}, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < D; ++i) {
        const double di = rows(r, i) - offset[i];
        for (std::size_t j = 0; j < D; ++j) cov(i, j) += di * (rows(r, j) - offset[j]) / static_cast<double>(n);
      }
    }
    double trace = 0.0, top = 0.0;
    for (std::size_t i = 0; i < D; ++i) trace += cov(i, i);
    for (double l : jacobi_eigen(cov).values.values()) top = std::max(top, l);
    if (top > 0.0) {
      const double scale = std::sqrt(trace / static_cast<double>(D));
      const double floor = 1e-12 * top;
      forward = spectral_map(cov, [&](double l) { return scale / std::sqrt(std::max(l, floor)); });
      inverse = spectral_map(cov, [&](double l) { return std::sqrt(std::max(l, floor)) / scale; });
    }
  }
  reparameterize_latents(models, offset, forward, inverse);
}

void save_pretrained(const std::filesystem::path& dir, const PretrainedModels& models) {
  save_checkpoint(dir / "generator.ckpt", Role::generator, models.generator);
  save_checkpoint(dir / "encoder.ckpt", Role::encoder, models.encoder);
  save_checkpoint(dir / "embedder.ckpt", Role::embedder, models.embedder);
  save_checkpoint(dir / "perceptual.ckpt", Role::perceptual, models.perceptual);
}

PretrainedModels load_pretrained(const std::filesystem::path& dir, const World& world) {
  PretrainedModels m;
  m.generator = load_checkpoint(dir / "generator.ckpt", Role::generator);
  m.encoder = load_checkpoint(dir / "encoder.ckpt", Role::encoder);
  m.embedder = load_checkpoint(dir / "embedder.ckpt", Role::embedder);
  m.perceptual = load_checkpoint(dir / "perceptual.ckpt", Role::perceptual);
  m.generator_arch = infer_arch(m.generator);
  m.encoder_arch = infer_arch(m.encoder);
  m.embedder_arch = infer_arch(m.embedder);
  m.perceptual_arch = infer_arch(m.perceptual);
  const WorldSpec& spec = world.spec;
  const auto fits = [](const MlpArch& a, std::size_t in, std::size_t out) {
    return a.widths.size() >= 2 && a.widths.front() == in && (out == 0 || a.widths.back() == out);
  };
  if (!fits(m.generator_arch, spec.latent_dim, spec.feature_size()) ||
      !fits(m.encoder_arch, spec.image_size(), spec.latent_dim) || !fits(m.embedder_arch, spec.image_size(), 0) ||
      !fits(m.perceptual_arch, spec.image_size(), 0)) {
    throw ShapeError("pretrained networks in " + dir.string() + " do not match the world's shapes");
  }
  m.mean_latent = mean_latent_rows(identity_latents(world, m));
  return m;
}

PretrainReport assess_pretrained(const World& world, const PretrainedModels& models) {
  const std::vector<int> ids = all_ids(world);
  const std::size_t N = ids.size();
  const Tensor latents = models.encode(world.images(ids, 0));
  const Tensor feats = models.features(latents);
  PretrainReport rep;
  double mse_sum = 0.0, id_sum = 0.0;
  for (std::size_t c = 0; c < world.spec.n_poses; ++c) {
    const std::vector<int> poses(N, static_cast<int>(c));
    const Tensor recon = world.renderer.render_rows(feats, poses);
    const Tensor source = world.images(ids, static_cast<int>(c));
    mse_sum += mean_squared_error(recon, source);
    const Tensor a = models.embed(recon), b = models.embed(source);
    for (std::size_t i = 0; i < N; ++i) id_sum += dot(a.row(i), b.row(i));
  }
  rep.reconstruction_mse = mse_sum / static_cast<double>(world.spec.n_poses);
  rep.id_similarity = id_sum / static_cast<double>(N * world.spec.n_poses);

  const std::vector<int> pose0(N, 0);
  const Tensor again = models.encode(world.renderer.render_rows(feats, pose0));
  double inv = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const Tensor w = latents.row(i);
    inv += norm(again.row(i) - w) / norm(w);
  }
  rep.inversion_error = inv / static_cast<double>(N);
  return rep;
}

PretrainResult pretrain(const World& world, const PretrainConfig& cfg) {
  const WorldSpec& spec = world.spec;
  spec.validate();
  if (cfg.epochs < 1 || !(cfg.lr > 0.0)) throw ConfigError("pretrain: epochs must be >= 1 and lr > 0");
  const std::size_t D = spec.latent_dim, F = spec.feature_size(), P = spec.image_size();

  PretrainedModels m;
  m.generator_arch.widths = {D};
  for (std::size_t h : cfg.shapes.generator_hidden) m.generator_arch.widths.push_back(h);
  m.generator_arch.widths.push_back(F);
  m.encoder_arch.widths = {P};
  for (std::size_t h : cfg.shapes.encoder_hidden) m.encoder_arch.widths.push_back(h);
  m.encoder_arch.widths.push_back(D);
  m.embedder_arch.widths = {P, cfg.shapes.embedder_hidden, cfg.shapes.embedding_dim};
  m.perceptual_arch.widths = {P, cfg.shapes.perceptual_hidden, cfg.shapes.perceptual_dim};

  Rng init = derive_stream(spec.seed, "pretrain.init");
  m.generator = init_mlp(m.generator_arch, init);
  m.encoder = init_mlp(m.encoder_arch, init);
  const Tensor center = mean_image(world);
  Rng emb_rng = derive_stream(spec.seed, "embedder.init");
  m.embedder = centred_random_net(m.embedder_arch, center, emb_rng);
  Rng per_rng = derive_stream(spec.seed, "perceptual.init");
  m.perceptual = centred_random_net(m.perceptual_arch, center, per_rng);
  calibrate_perceptual(m, world.images(all_ids(world), 0));

  const std::vector<int> ids = all_ids(world);
  const std::size_t N = ids.size();
  std::vector<Tensor> targets;
  for (std::size_t c = 0; c < spec.n_poses; ++c) targets.push_back(world.images(ids, static_cast<int>(c)));
  const Tensor& inputs = targets[0];

  AdamState gen_state = make_adam_state(m.generator);
  AdamState enc_state = make_adam_state(m.encoder);
  PretrainReport rep;
  rep.loss_trace.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    ad::Graph g;
    const ad::ParamVars gen = ad::bind(g, m.generator, true);
    const ad::ParamVars enc = ad::bind(g, m.encoder, true);
    const ad::Var w = forward_mlp(g, enc, g.constant(inputs), m.encoder_arch);
    const ad::Var f = forward_mlp(g, gen, w, m.generator_arch);
    const ad::Var pixels = ad::sigmoid(
        g, ad::affine(g, f, g.constant(world.renderer.weight), g.constant(world.renderer.bias)));
    ad::Var recon{};
    for (std::size_t c = 0; c < spec.n_poses; ++c) {
      const std::vector<int> shifts(N, static_cast<int>(c) * kPoseShift);
      const ad::Var img = c == 0 ? pixels : ad::shift_columns(g, pixels, spec.image_side, spec.image_side, shifts);
      const ad::Var term = ad::mse(g, img, g.constant(targets[c]));
      recon = c == 0 ? term : ad::add(g, recon, term);
    }
    recon = ad::affine_scalar(g, recon, 1.0 / static_cast<double>(spec.n_poses), 0.0);

    // Inversion: E(R(F(w); 0)) should return w, relative to the latent scale.
    const Tensor& w_value = g.value(w);
    double w_sq = 0.0;
    for (double x : w_value.values()) w_sq += x * x;
    w_sq /= static_cast<double>(w_value.size());
    const ad::Var w_again = forward_mlp(g, enc, pixels, m.encoder_arch);
    const ad::Var cycle = ad::mse(g, w_again, g.constant(w_value));
    const ad::Var loss =
        ad::add(g, recon, ad::affine_scalar(g, cycle, cfg.cycle_weight / std::max(w_sq, 1e-12), 0.0));

    g.backward(loss);
    rep.loss_trace.push_back(g.value(loss)[0]);
    // Cosine decay to 5% of the base rate.
    const double progress = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
    const double lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    adam_step(m.generator, ad::gradients(g, gen), gen_state, lr);
    adam_step(m.encoder, ad::gradients(g, enc), enc_state, lr);
  }

  standardize_latents(m, m.encode(inputs), cfg.whiten_latents);
  m.mean_latent = mean_latent_rows(m.encode(inputs));
  PretrainReport measured = assess_pretrained(world, m);
  measured.loss_trace = std::move(rep.loss_trace);
  if (!(measured.reconstruction_mse < cfg.mse_threshold) || !(measured.id_similarity > cfg.id_threshold)) {
    throw PretrainCriterionError("pretraining criterion unmet after " + std::to_string(cfg.epochs) +
                                     " epochs: reconstruction mse " + format_double(measured.reconstruction_mse) +
                                     ", id similarity " + format_double(measured.id_similarity),
                                 measured);
  }
  return PretrainResult{std::move(m), std::move(measured)};
}

}  // namespace idf
