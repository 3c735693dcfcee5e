#include "afvae/evaluation.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "afvae/autograd.hpp"
#include "afvae/rng.hpp"

namespace afvae::eval {

GaussianStats gaussian_stats(const Eigen::Ref<const Eigen::MatrixXd>& features) {
  require(features.rows() >= 2, "gaussian_stats: need at least two rows");
  GaussianStats s;
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  return s;
}

namespace {

// Symmetric square root via eigen decomposition, clipping small negatives.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m, std::vector<std::string>* warnings) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw std::runtime_error("eigen decomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -tol && warnings)
      warnings->push_back("clipped eigenvalue " + std::to_string(ev[i]) + " below tolerance");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid_from_stats(const GaussianStats& a, const GaussianStats& b, std::vector<std::string>* warnings) {
  require(a.mean.size() == b.mean.size() && a.cov.rows() == a.mean.size() && b.cov.rows() == b.mean.size(),
          "fid: dimension mismatch");
  if (!a.cov.allFinite() || !b.cov.allFinite() || !a.mean.allFinite() || !b.mean.allFinite())
    throw std::invalid_argument("fid: non-finite statistics");
  const Eigen::MatrixXd ra = sqrt_psd(a.cov, warnings);
  // Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))
  const Eigen::MatrixXd cross = sqrt_psd(ra * b.cov * ra, warnings);
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
  return std::max(d, 0.0);
}

double fid(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b,
           std::vector<std::string>* warnings) {
  require(a.cols() == b.cols(), "fid: feature dimensions differ");
  if (warnings && (a.rows() <= a.cols() || b.rows() <= b.cols()))
    warnings->push_back("fid: " + std::to_string(std::min(a.rows(), b.rows())) + " samples for " +
                        std::to_string(a.cols()) + " dimensions; covariance is rank deficient");
  return fid_from_stats(gaussian_stats(a), gaussian_stats(b), warnings);
}

double inception_score(const Eigen::Ref<const Eigen::MatrixXd>& p) {
  require(p.rows() >= 1 && p.cols() >= 1, "inception_score: empty input");
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    if (!p.row(i).allFinite() || p.row(i).minCoeff() < 0.0 || std::abs(p.row(i).sum() - 1.0) > 1e-5)
      throw std::invalid_argument("inception_score: row " + std::to_string(i) + " is not a probability vector");
  }
  const Eigen::VectorXd marginal = p.colwise().mean().transpose();
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index c = 0; c < p.cols(); ++c)
      if (p(i, c) > 0.0) total += p(i, c) * (std::log(p(i, c)) - std::log(marginal[c]));
  return std::exp(total / static_cast<double>(p.rows()));
}

namespace {

double entropy_of(const std::vector<double>& lum, int bins) {
  require(bins >= 1, "histogram_entropy: bins must be >= 1");
  if (lum.empty()) throw std::invalid_argument("histogram_entropy: empty image");
  std::vector<long> counts(bins, 0);
  for (double v : lum) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("histogram_entropy: values must lie in [0,1]");
    ++counts[std::min(bins - 1, static_cast<int>(v * bins))];
  }
  const double n = static_cast<double>(lum.size());
  double h = 0.0;
  for (long c : counts)
    if (c > 0) h -= (c / n) * std::log2(c / n);
  return h;
}

std::vector<double> luminance(const RgbImage& img) {
  std::vector<double> lum(static_cast<std::size_t>(img.height) * img.width);
  for (std::size_t i = 0; i < lum.size(); ++i)
    lum[i] = (img.pixels[3 * i] + img.pixels[3 * i + 1] + img.pixels[3 * i + 2]) / 3.0;
  return lum;
}

}  // namespace

double histogram_entropy(const RgbImage& img, int bins) {
  for (double v : img.pixels)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("histogram_entropy: values must lie in [0,1]");
  return entropy_of(luminance(img), bins);
}
double histogram_entropy(const GrayImage& img, int bins) { return entropy_of(img.pixels, bins); }

// ---------------------------------------------------------------------------

FeatureEmbedder FeatureEmbedder::random(std::uint64_t seed, const std::vector<int>& channels, int classes) {
  require(!channels.empty() && classes >= 1, "random embedder needs layers and classes");
  FeatureEmbedder e;
  e.stack_ = nn::ConvStack::random(derive_seed(seed, "embedder"), 3, channels);
  std::mt19937_64 rng(derive_seed(seed, "embedder-head"));
  const int d = channels.back();
  std::normal_distribution<double> normal(0.0, 4.0 / std::sqrt(static_cast<double>(d)));
  e.head_weights_.resize(classes, d);
  for (int c = 0; c < classes; ++c)
    for (int j = 0; j < d; ++j) e.head_weights_(c, j) = normal(rng);
  e.head_bias_ = Eigen::VectorXd::Zero(classes);
  e.description_ = "random:" + std::to_string(seed);
  return e;
}

FeatureEmbedder FeatureEmbedder::external(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read embedder " + path);
  const auto j = nlohmann::json::parse(in);
  FeatureEmbedder e;
  e.stack_ = nn::conv_stack_from_json(j);
  require(e.stack_.size() >= 1, "external embedder has no layers");
  const int d = e.stack_.out_channels();
  if (j.contains("head")) {
    const auto& h = j.at("head");
    const int classes = h.at("classes").get<int>();
    const auto w = h.at("weights").get<std::vector<double>>();
    const auto b = h.at("bias").get<std::vector<double>>();
    require(static_cast<int>(w.size()) == classes * d && static_cast<int>(b.size()) == classes,
            "external embedder head has the wrong size");
    e.head_weights_ = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        w.data(), classes, d);
    e.head_bias_ = Eigen::Map<const Eigen::VectorXd>(b.data(), classes);
  } else {
    e.head_weights_ = Eigen::MatrixXd::Zero(1, d);
    e.head_bias_ = Eigen::VectorXd::Zero(1);
  }
  e.description_ = "external:" + path;
  return e;
}

FeatureEmbedder FeatureEmbedder::parse(const std::string& spec, std::uint64_t seed) {
  if (spec == "random") return random(seed);
  if (spec.starts_with("external:")) return external(spec.substr(9));
  throw std::invalid_argument("unknown embedder '" + spec + "' (expected random or external:<path>)");
}

Eigen::MatrixXd FeatureEmbedder::embed(const std::vector<RgbImage>& images) const {
  const int n = static_cast<int>(images.size());
  Eigen::MatrixXd out(n, dim());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto acts = stack_.forward(ag::constant(to_tensor(images[i])));
    const Tensor& last = acts.back()->value;
    const std::size_t plane = last.shape().plane();
    for (int c = 0; c < last.shape().c; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += last[c * plane + p];
      out(i, c) = s / static_cast<double>(plane);
    }
  }
  return out;
}

Eigen::MatrixXd FeatureEmbedder::class_probs(const Eigen::Ref<const Eigen::MatrixXd>& embeddings) const {
  Eigen::MatrixXd logits = (embeddings * head_weights_.transpose()).rowwise() + head_bias_.transpose();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - top).exp();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

// ---------------------------------------------------------------------------

namespace {

Eigen::VectorXd normalized_luminance(const RgbImage& img) {
  const auto lum = luminance(img);
  Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(lum.data(), static_cast<Eigen::Index>(lum.size()));
  v.array() -= v.mean();
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

std::vector<double> grid(int steps, double lo, double hi) {
  if (steps == 1) return {0.5 * (lo + hi)};
  std::vector<double> g;
  for (int i = 0; i < steps; ++i) g.push_back(lo + (hi - lo) * i / (steps - 1));
  return g;
}

}  // namespace

LandmarkExtractor::LandmarkExtractor(const Options& opts) : opts_(opts) {
  require(opts.expression_steps >= 1 && opts.yaw_steps >= 1 && opts.scale_steps >= 1,
          "landmark extractor grid must be non-empty");
  for (double e : grid(opts.expression_steps, -1.0, 1.0))
    for (double y : grid(opts.yaw_steps, -1.0, 1.0))
      for (double s : grid(opts.scale_steps, 0.85, 1.15)) structures_.push_back({e, y, s});
  normalized_.resize(structures_.size());
  const int n = static_cast<int>(structures_.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    geometry::SyntheticFaceSpec spec;
    spec.structure = structures_[i];
    normalized_[i] = normalized_luminance(geometry::synth_face(spec, opts.size, opts.size).image);
  }
}

std::optional<LandmarkExtractor::Match> LandmarkExtractor::extract(const RgbImage& img) const {
  require(img.height == opts_.size && img.width == opts_.size,
          "landmark extractor expects " + std::to_string(opts_.size) + "x" + std::to_string(opts_.size) + " images");
  const Eigen::VectorXd q = normalized_luminance(img);
  double best = -2.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < normalized_.size(); ++i) {
    const double ncc = normalized_[i].dot(q);
    if (ncc > best) {
      best = ncc;
      arg = i;
    }
  }
  if (best < opts_.min_ncc) return std::nullopt;
  return Match{structures_[arg], geometry::synth_landmarks(structures_[arg], opts_.size, opts_.size), best};
}

// ---------------------------------------------------------------------------

Tensor generate(nn::AfVae& model, const Tensor& source_images, const Tensor& source_boundaries,
                const Tensor& target_boundaries, const Tensor* noise) {
  require(source_images.shape().n == target_boundaries.shape().n, "generate: batch sizes differ");
  const bool was = model.training();
  model.set_training(false);
  const ag::Var sb = source_boundaries.empty() ? nullptr : ag::constant(source_boundaries);
  const auto post = model.encode_appearance(ag::constant(source_images), sb);
  const auto structure = model.encode_structure(ag::constant(target_boundaries));
  const ag::Var z = noise ? ag::reparameterize(post.mean, post.log_var, *noise) : post.mean;
  Tensor out = model.decode(z, structure)->value;
  model.set_training(was);
  return out;
}

std::optional<double> boundary_consistency(const RgbImage& generated, const geometry::LandmarkSet& source,
                                           const geometry::LandmarkSet& target, const LandmarkExtractor& extractor) {
  const auto m = extractor.extract(generated);
  if (!m) return std::nullopt;
  return geometry::landmark_distance(m->landmarks, target) - geometry::landmark_distance(m->landmarks, source);
}

ConsistencySummary boundary_consistency(nn::AfVae& model, const data::Corpus& corpus,
                                        const geometry::BoundaryOptions& boundary, int pairs, std::uint64_t seed,
                                        const LandmarkExtractor& extractor) {
  const auto test = corpus.indices(data::Split::test);
  require(test.size() >= 2, "boundary_consistency: need at least two test records");
  std::mt19937_64 rng(derive_seed(seed, "consistency-pairs"));
  std::uniform_int_distribution<std::size_t> pick(0, test.size() - 1);
  ConsistencySummary out;
  constexpr int kChunk = 8;
  for (int start = 0; start < pairs; start += kChunk) {
    const int n = std::min(kChunk, pairs - start);
    std::vector<int> src(n), dst(n);
    for (int i = 0; i < n; ++i) {
      src[i] = test[pick(rng)];
      do dst[i] = test[pick(rng)];
      while (dst[i] == src[i]);
    }
    const auto sb = data::make_batch(corpus, src, boundary);
    const auto tb = data::make_batch(corpus, dst, boundary);
    const Tensor gen = generate(model, sb.images, sb.boundaries, tb.boundaries);
    for (int i = 0; i < n; ++i) {
      const auto score = boundary_consistency(rgb_from_tensor(gen, i), sb.landmarks[i], tb.landmarks[i], extractor);
      if (score) {
        out.scores.push_back(*score);
      } else {
        ++out.missing;
      }
    }
  }
  out.count = static_cast<int>(out.scores.size());
  if (out.count > 0) {
    double s = 0.0;
    for (double v : out.scores) s += v;
    out.mean = s / out.count;
  }
  return out;
}

void MetricReport::validate() const {
  require(std::isfinite(fid) && std::isfinite(is_score) && std::isfinite(entropy) &&
              std::isfinite(boundary_consistency) && std::isfinite(reconstruction_l1),
          "metric report contains non-finite values");
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"fid", r.fid},
          {"is_score", r.is_score},
          {"entropy_bits", r.entropy},
          {"source_entropy_bits", r.source_entropy},
          {"boundary_consistency", r.boundary_consistency},
          {"boundary_consistency_count", r.consistency_count},
          {"boundary_consistency_missing", r.consistency_missing},
          {"reconstruction_l1", r.reconstruction_l1},
          {"embedder", r.embedder},
          {"warnings", r.warnings}};
}

MetricReport evaluate(nn::AfVae& model, const train::TrainConfig& cfg, const data::Corpus& corpus,
                      const EvaluateOptions& opts) {
  const auto test = corpus.indices(data::Split::test);
  require(test.size() >= 2, "evaluate: need at least two test records");
  const int n = static_cast<int>(test.size());
  MetricReport r;

  std::vector<RgbImage> real, crossed;
  double rec = 0.0;
  constexpr int kChunk = 8;
  for (int start = 0; start < n; start += kChunk) {
    const int m = std::min(kChunk, n - start);
    std::vector<int> src(m), dst(m);
    for (int i = 0; i < m; ++i) {
      src[i] = test[start + i];
      dst[i] = test[(start + i + 1) % n];
    }
    const auto sb = data::make_batch(corpus, src, cfg.boundary);
    const auto tb = data::make_batch(corpus, dst, cfg.boundary);
    const Tensor self = generate(model, sb.images, sb.boundaries, sb.boundaries);
    const Tensor cross = generate(model, sb.images, sb.boundaries, tb.boundaries);
    for (std::size_t k = 0; k < self.numel(); ++k) rec += std::abs(self[k] - sb.images[k]);
    for (int i = 0; i < m; ++i) {
      real.push_back(corpus.images[src[i]]);
      crossed.push_back(rgb_from_tensor(cross, i));
    }
  }
  r.reconstruction_l1 = rec / (static_cast<double>(n) * real.front().pixels.size());

  const auto embedder = FeatureEmbedder::parse(opts.embedder, opts.seed);
  r.embedder = embedder.description();
  const Eigen::MatrixXd fr = embedder.embed(real), fg = embedder.embed(crossed);
  r.fid = fid(fr, fg, &r.warnings);
  r.is_score = inception_score(embedder.class_probs(fg));
  for (std::size_t i = 0; i < real.size(); ++i) {
    r.entropy += histogram_entropy(crossed[i]) / n;
    r.source_entropy += histogram_entropy(real[i]) / n;
  }

  LandmarkExtractor::Options lo;
  lo.size = cfg.effective_model().input_size;
  const LandmarkExtractor extractor(lo);
  const auto bc = boundary_consistency(model, corpus, cfg.boundary, opts.pairs, opts.seed, extractor);
  r.boundary_consistency = bc.mean;
  r.consistency_count = bc.count;
  r.consistency_missing = bc.missing;
  if (bc.missing > 0)
    r.warnings.push_back(std::to_string(bc.missing) + " of " + std::to_string(opts.pairs) +
                         " consistency pairs had no landmark match and were excluded");
  r.validate();
  return r;
}

}  // namespace afvae::eval
