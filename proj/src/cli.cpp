#include "afvae/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "afvae/autograd.hpp"
#include "afvae/datasets.hpp"
#include "afvae/evaluation.hpp"
#include "afvae/prior.hpp"
#include "afvae/rng.hpp"
#include "afvae/training.hpp"

namespace afvae::cli {

namespace fs = std::filesystem;

RgbImage manipulate(nn::AfVae& model, const focal::FocalBank& bank, const RgbImage& source,
                    const Tensor& source_boundary, const geometry::BoundaryMap& target,
                    const ManipulateOptions& opts) {
  const Tensor tb = target.to_tensor();
  const auto& cfg = model.config();
  const Shape zshape{1, cfg.latent_channels, cfg.latent_side(), cfg.latent_side()};
  if (opts.sample) {
    const auto prior = prior::make_prior(focal::focal_weights(target, bank), bank);
    std::mt19937_64 rng(opts.noise_seed.value_or(0));
    std::normal_distribution<double> normal;
    Tensor z(zshape);
    const double sd = std::sqrt(prior.var);
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = prior.mean[static_cast<Eigen::Index>(i)] + sd * normal(rng);
    const bool was = model.training();
    model.set_training(false);
    const Tensor out = model.decode(ag::constant(z), model.encode_structure(ag::constant(tb)))->value;
    model.set_training(was);
    return rgb_from_tensor(out);
  }
  if (opts.noise_seed) {
    std::mt19937_64 rng(*opts.noise_seed);
    std::normal_distribution<double> normal;
    Tensor noise(zshape);
    for (double& v : noise.vec()) v = normal(rng);
    return rgb_from_tensor(eval::generate(model, to_tensor(source), source_boundary, tb, &noise));
  }
  return rgb_from_tensor(eval::generate(model, to_tensor(source), source_boundary, tb));
}

namespace {

Tensor lerp(const Tensor& a, const Tensor& b, double t) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
  return out;
}

}  // namespace

Interpolation interpolate(nn::AfVae& model, const RgbImage& a, const Tensor& a_boundary, const RgbImage& b,
                          const Tensor& b_boundary, int steps) {
  require(steps >= 2, "interpolate: steps must be >= 2");
  const bool was = model.training();
  model.set_training(false);
  const bool app_boundary = model.config().appearance_uses_boundary;
  const Tensor za =
      model.encode_appearance(ag::constant(to_tensor(a)), app_boundary ? ag::constant(a_boundary) : nullptr)
          .mean->value;
  const Tensor zb =
      model.encode_appearance(ag::constant(to_tensor(b)), app_boundary ? ag::constant(b_boundary) : nullptr)
          .mean->value;
  const auto sa = model.encode_structure(ag::constant(a_boundary));
  const auto sb = model.encode_structure(ag::constant(b_boundary));

  Interpolation out;
  for (int i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / (steps - 1);
    const Tensor z = lerp(za, zb, t);
    out.latents.push_back(z);
    out.appearance.push_back(rgb_from_tensor(model.decode(ag::constant(z), sa)->value));

    nn::StructureCode s;
    s.y = ag::constant(lerp(sa.y->value, sb.y->value, t));
    for (std::size_t l = 0; l < sa.skips.size(); ++l)
      s.skips.push_back(ag::constant(lerp(sa.skips[l]->value, sb.skips[l]->value, t)));
    out.structure.push_back(rgb_from_tensor(model.decode(ag::constant(za), s)->value));
  }
  model.set_training(was);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct ModelFlags {
  nn::ModelConfig cfg = nn::ModelConfig::desk();
  std::string norm = "wn";
  std::string upsample = "pixel-shuffle";
  std::string block = "residual";

  void add(CLI::App* app) {
    app->add_option("--size", cfg.input_size, "Input image side")->capture_default_str();
    app->add_option("--channels", cfg.channels, "Output channels of every downsampling level")
        ->capture_default_str()
        ->delimiter(',');
    app->add_option("--latent-channels", cfg.latent_channels, "Channels of the appearance code")->capture_default_str();
    app->add_option("--norm", norm, "Convolution normalization")
        ->check(CLI::IsMember({"wn", "bn", "none"}))
        ->capture_default_str();
    app->add_option("--upsample", upsample, "Decoder upsampling")
        ->check(CLI::IsMember({"pixel-shuffle", "transposed"}))
        ->capture_default_str();
    app->add_option("--block", block, "Encoder level type")
        ->check(CLI::IsMember({"residual", "plain"}))
        ->capture_default_str();
    app->add_option("--fusion-levels", cfg.fusion_levels, "Skip levels fused into the decoder (-1: all)")
        ->capture_default_str();
    app->add_flag("--appearance-boundary", cfg.appearance_uses_boundary,
                  "Feed the boundary map to the appearance encoder too");
  }

  nn::ModelConfig resolve() const {
    nlohmann::json j = nn::to_json(cfg);
    j["norm"] = norm;
    j["upsample"] = upsample;
    j["block"] = block;
    return nn::model_config_from_json(j);
  }
};

geometry::BoundaryOptions boundary_options(const std::string& mode, double sigma) {
  geometry::BoundaryOptions o;
  o.mode = mode == "per-group" ? geometry::BoundaryMode::per_group : geometry::BoundaryMode::single;
  o.blur_sigma = sigma;
  return o;
}

geometry::LandmarkSet read_landmarks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read landmarks " + path);
  return geometry::landmarks_from_json(nlohmann::json::parse(in));
}

geometry::BoundaryMap boundary_from_pgm(const std::string& path) {
  const GrayImage g = read_pgm(path);
  geometry::BoundaryMap m;
  m.channels = 1;
  m.height = g.height;
  m.width = g.width;
  m.pixels = g.pixels;
  return m;
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Appearance/structure disentangling VAE with a focal prior"};
  app.set_config("--config", "", "TOML config file; command-line flags override its values");
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Base seed of every random stream")->capture_default_str();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress output on stderr");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Render a procedural face corpus");
  data::SyntheticOptions so;
  std::string synth_out;
  synth->add_option("--identities", so.n_identities, "Number of identities")->capture_default_str();
  synth->add_option("--per-id", so.samples_per_identity, "Samples per identity")->capture_default_str();
  synth->add_option("--size", so.size, "Image side in pixels")->capture_default_str();
  synth->add_option("--train-frac", so.train_frac, "Fraction of identities used for training")->capture_default_str();
  synth->add_option("--out,--root", synth_out, "Corpus directory")->required();

  // cluster
  auto* cluster = app.add_subcommand("cluster", "Build the focal bank from the training boundaries");
  std::string cluster_root, cluster_out, cluster_montage;
  focal::BankOptions bank_opts;
  std::string cluster_mode = "single";
  double cluster_sigma = 1.0;
  ModelFlags cluster_model;
  cluster->add_option("--root", cluster_root, "Corpus directory")->required();
  cluster->add_option("--k", bank_opts.kmeans.k, "Number of focal points")->capture_default_str();
  cluster->add_option("--feature-side", bank_opts.feature_side, "Side of the downsampled boundary features")
      ->capture_default_str();
  cluster->add_option("--latent-scale", bank_opts.latent_scale, "sigma_k of every component")->capture_default_str();
  cluster->add_option("--boundary-mode", cluster_mode, "Boundary channels")
      ->check(CLI::IsMember({"single", "per-group"}))
      ->capture_default_str();
  cluster->add_option("--blur-sigma", cluster_sigma, "Boundary blur")->capture_default_str();
  cluster->add_option("--out", cluster_out, "Bank JSON path")->required();
  cluster->add_option("--montage", cluster_montage, "Centroid montage PGM (default: next to the bank)");
  cluster_model.add(cluster);

  // train
  auto* trainc = app.add_subcommand("train", "Train the model");
  train::TrainConfig tc;
  ModelFlags train_model;
  std::string train_root, train_bank, train_out, train_resume, train_mode = "single", feature_norm = "l1";
  trainc->add_option("--root", train_root, "Corpus directory")->required();
  trainc->add_option("--bank", train_bank, "Focal bank JSON (ignored when resuming)");
  trainc->add_option("--out", train_out, "Run directory for checkpoints and metrics.csv")->required();
  trainc->add_option("--resume", train_resume, "Continue from this checkpoint");
  trainc->add_option("--steps", tc.steps, "Total optimization steps")->capture_default_str();
  trainc->add_option("--batch-size", tc.batch_size, "Batch size")->capture_default_str();
  trainc->add_option("--lr", tc.adam.lr, "Adam learning rate")->capture_default_str();
  trainc->add_option("--beta1", tc.adam.beta1, "Adam beta1")->capture_default_str();
  trainc->add_option("--beta2", tc.adam.beta2, "Adam beta2")->capture_default_str();
  trainc->add_option("--kl-coeff", tc.loss.kl_coeff, "KL weight")->capture_default_str();
  trainc->add_option("--feature-weights", tc.loss.feature_weights, "Per-layer feature weights (default 1/L)")
      ->delimiter(',');
  trainc->add_option("--feature-norm", feature_norm, "Distance of the feature term")
      ->check(CLI::IsMember({"l1", "l2"}))
      ->capture_default_str();
  trainc->add_option("--extractor", tc.extractor, "identity, random, random:<seed> or external:<path>")
      ->capture_default_str();
  trainc->add_option("--checkpoint-every", tc.checkpoint_every, "Checkpoint cadence in steps")->capture_default_str();
  trainc->add_option("--gmm-samples", tc.gmm_samples, "Monte Carlo draws of the mixture KL")->capture_default_str();
  trainc->add_option("--boundary-mode", train_mode, "Boundary channels")
      ->check(CLI::IsMember({"single", "per-group"}))
      ->capture_default_str();
  trainc->add_option("--blur-sigma", tc.boundary.blur_sigma, "Boundary blur")->capture_default_str();
  trainc->add_flag("--no-kl", tc.ablations.no_kl, "Drop the KL term from the objective");
  trainc->add_flag("--gmm-prior", tc.ablations.gmm_prior, "Sampled mixture prior instead of the additive one");
  trainc->add_flag("--no-pixel-shuffle", tc.ablations.no_pixel_shuffle, "Transposed-conv upsampling");
  trainc->add_flag("--no-wn", tc.ablations.no_wn, "Plain convolutions");
  train_model.add(trainc);

  // evaluate
  auto* evalc = app.add_subcommand("evaluate", "Compute the metric report of a checkpoint");
  std::string eval_ckpt, eval_root, eval_out;
  eval::EvaluateOptions eo;
  evalc->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  evalc->add_option("--root", eval_root, "Corpus directory")->required();
  evalc->add_option("--embedder", eo.embedder, "random or external:<path>")->capture_default_str();
  evalc->add_option("--pairs", eo.pairs, "Boundary-consistency pairs")->capture_default_str();
  evalc->add_option("--out", eval_out, "Report JSON path (stdout otherwise)");

  // manipulate
  auto* manip = app.add_subcommand("manipulate", "Render a source face with a target structure");
  std::string m_ckpt, m_source, m_source_lms, m_target_lms, m_target_boundary, m_out;
  std::uint64_t m_noise_seed = 0;
  bool m_sample = false;
  manip->add_option("--checkpoint", m_ckpt, "Checkpoint file")->required();
  manip->add_option("--source", m_source, "Source image (PPM)")->required();
  manip->add_option("--source-landmarks", m_source_lms, "Source landmarks JSON");
  auto* tl = manip->add_option("--target-landmarks", m_target_lms, "Target landmarks JSON");
  auto* tbopt = manip->add_option("--target-boundary", m_target_boundary, "Target boundary map (PGM)");
  tl->excludes(tbopt);
  auto* noise_opt = manip->add_option("--noise-seed", m_noise_seed, "Sample z with this seed (posterior mean otherwise)");
  manip->add_flag("--sample", m_sample, "Draw z from the focal prior of the target");
  manip->add_option("--out", m_out, "Output image (PPM)")->required();

  // interpolate
  auto* interp = app.add_subcommand("interpolate", "Latent interpolation strips between two faces");
  std::string i_ckpt, i_a, i_b, i_a_lms, i_b_lms, i_out;
  int i_steps = 8;
  interp->add_option("--checkpoint", i_ckpt, "Checkpoint file")->required();
  interp->add_option("--a", i_a, "First image (PPM)")->required();
  interp->add_option("--a-landmarks", i_a_lms, "Landmarks JSON of the first image")->required();
  interp->add_option("--b", i_b, "Second image (PPM)")->required();
  interp->add_option("--b-landmarks", i_b_lms, "Landmarks JSON of the second image")->required();
  interp->add_option("--steps", i_steps, "Frames per strip, endpoints included")->capture_default_str();
  interp->add_option("--out", i_out, "Output prefix; writes <out>_appearance.ppm and <out>_structure.ppm")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed()) {
      if (so.n_identities < 2)
        throw std::invalid_argument("split_by_identity requires at least 2 identities, got " +
                                    std::to_string(so.n_identities));
      so.seed = seed;
      const auto corpus = data::build_synthetic_corpus(so);
      data::write_corpus(corpus, synth_out);
      std::cout << "wrote " << corpus.records.size() << " records (" << corpus.identities(data::Split::train).size()
                << " train / " << corpus.identities(data::Split::test).size() << " test identities) to "
                << synth_out << "\n";
    } else if (cluster->parsed()) {
      const auto corpus = data::load_corpus(cluster_root);
      const auto bopts = boundary_options(cluster_mode, cluster_sigma);
      std::vector<geometry::BoundaryMap> maps;
      for (int i : corpus.indices(data::Split::train))
        maps.push_back(geometry::render_boundary(corpus.records[i].landmarks, bopts));
      bank_opts.kmeans.seed = derive_seed(seed, "kmeans");
      bank_opts.latent_dim = cluster_model.resolve().latent_dim();
      const auto bank = focal::build_bank(maps, bank_opts);
      focal::save_bank(bank, cluster_out);
      const std::string montage =
          cluster_montage.empty() ? (fs::path(cluster_out).replace_extension(".montage.pgm")).string() : cluster_montage;
      write_pgm(focal::centroid_montage(bank), montage);
      std::cout << "focal bank with " << bank.k() << " centroids written to " << cluster_out << " (montage "
                << montage << ")\n";
    } else if (trainc->parsed()) {
      const auto corpus = data::load_corpus(train_root);
      train::RunOptions ro;
      ro.out_dir = train_out;
      ro.resume_from = train_resume;
      ro.verbose = verbose;
      tc.seed = seed;
      tc.model = train_model.resolve();
      tc.boundary = boundary_options(train_mode, tc.boundary.blur_sigma);
      tc.loss.feature_norm = feature_norm == "l1" ? losses::FeatureNorm::l1 : losses::FeatureNorm::l2;
      focal::FocalBank bank;
      if (train_resume.empty()) {
        if (train_bank.empty()) throw std::invalid_argument("train: --bank is required unless --resume is given");
        bank = focal::load_bank(train_bank);
      }
      const auto r = train::run_training(tc, corpus, bank, ro);
      std::cout << "trained " << r.history.size() << " steps; checkpoint " << r.final_checkpoint << ", metrics "
                << r.metrics_path << "\n";
    } else if (evalc->parsed()) {
      const auto ckpt = train::load_checkpoint(eval_ckpt);
      auto model = train::restore_model(ckpt);
      const auto corpus = data::load_corpus(eval_root);
      eo.seed = seed;
      const auto report = eval::to_json(eval::evaluate(*model, ckpt.config, corpus, eo));
      if (eval_out.empty()) {
        std::cout << report.dump(2) << "\n";
      } else {
        write_json(report, eval_out);
        std::cout << "report written to " << eval_out << "\n";
      }
    } else if (manip->parsed()) {
      if (m_target_lms.empty() && m_target_boundary.empty())
        throw std::invalid_argument("manipulate: give --target-landmarks or --target-boundary");
      const auto ckpt = train::load_checkpoint(m_ckpt);
      auto model = train::restore_model(ckpt);
      const auto& bo = ckpt.config.boundary;
      const RgbImage source = read_ppm(m_source);
      const auto target =
          m_target_lms.empty() ? boundary_from_pgm(m_target_boundary) : geometry::render_boundary(read_landmarks(m_target_lms), bo);
      Tensor source_boundary;
      if (!m_source_lms.empty()) source_boundary = geometry::render_boundary(read_landmarks(m_source_lms), bo).to_tensor();
      if (model->config().appearance_uses_boundary && source_boundary.empty())
        throw std::invalid_argument("manipulate: this model needs --source-landmarks");
      ManipulateOptions mo;
      mo.sample = m_sample;
      if (noise_opt->count() > 0 || m_sample) mo.noise_seed = m_noise_seed;
      write_ppm(manipulate(*model, ckpt.bank, source, source_boundary, target, mo), m_out);
      std::cout << "wrote " << m_out << "\n";
    } else if (interp->parsed()) {
      const auto ckpt = train::load_checkpoint(i_ckpt);
      auto model = train::restore_model(ckpt);
      const auto& bo = ckpt.config.boundary;
      const auto strips = interpolate(*model, read_ppm(i_a), geometry::render_boundary(read_landmarks(i_a_lms), bo).to_tensor(),
                                      read_ppm(i_b), geometry::render_boundary(read_landmarks(i_b_lms), bo).to_tensor(),
                                      i_steps);
      write_ppm(hstack(strips.appearance), i_out + "_appearance.ppm");
      write_ppm(hstack(strips.structure), i_out + "_structure.ppm");
      std::cout << "wrote " << i_out << "_appearance.ppm and " << i_out << "_structure.ppm\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace afvae::cli
