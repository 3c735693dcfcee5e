#include "afvae/focalbank.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

namespace afvae::focal {

namespace {

// Squared distances of every point to its nearest centroid.
double assign(const Features& points, const Features& centroids, std::vector<int>& assignment,
              std::vector<double>& dist) {
  const Eigen::Index n = points.rows();
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    assignment[i] = arg;
    dist[i] = best;
    inertia += best;
  }
  return inertia;
}

Features kmeans_pp(const Features& points, int k, std::mt19937_64& rng) {
  const Eigen::Index n = points.rows();
  Features centroids(k, points.cols());
  std::vector<bool> taken(n, false);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  Eigen::Index idx = first(rng);
  centroids.row(0) = points.row(idx);
  taken[idx] = true;
  std::vector<double> d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (points.row(i) - centroids.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) total += taken[i] ? 0.0 : d2[i];
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      const double target = u(rng);
      double acc = 0.0;
      idx = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[i]) continue;
        acc += d2[i];
        idx = i;
        if (acc >= target && d2[i] > 0.0) break;
      }
    } else {
      // Every remaining point duplicates a chosen centre.
      idx = std::find(taken.begin(), taken.end(), false) - taken.begin();
    }
    centroids.row(c) = points.row(idx);
    taken[idx] = true;
    for (Eigen::Index i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (points.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

}  // namespace

KMeansResult kmeans(const Features& points, const KMeansOptions& opts) {
  const Eigen::Index n = points.rows();
  if (opts.k < 1) throw std::invalid_argument("kmeans: K must be >= 1");
  if (n < opts.k)
    throw std::invalid_argument("kmeans: need N >= K, got N=" + std::to_string(n) +
                                " K=" + std::to_string(opts.k));
  require(points.allFinite(), "kmeans: non-finite features");

  std::mt19937_64 rng(opts.seed);
  KMeansResult r;
  r.centroids = kmeans_pp(points, opts.k, rng);
  r.assignment.assign(n, 0);
  std::vector<double> dist(n);

  for (int it = 0; it < opts.max_iters; ++it) {
    r.inertia_history.push_back(assign(points, r.centroids, r.assignment, dist));
    r.iterations = it + 1;

    Features next = Features::Zero(opts.k, points.cols());
    std::vector<int> counts(opts.k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(r.assignment[i]) += points.row(i);
      ++counts[r.assignment[i]];
    }
    for (int c = 0; c < opts.k; ++c) {
      if (counts[c] > 0) {
        next.row(c) /= counts[c];
        continue;
      }
      // Empty cluster: move it onto the point worst served by its centre.
      const auto far = std::max_element(dist.begin(), dist.end()) - dist.begin();
      next.row(c) = points.row(far);
      dist[far] = 0.0;
    }
    const double shift = (next - r.centroids).rowwise().norm().maxCoeff();
    r.centroids = std::move(next);
    if (shift < opts.tol) break;
  }
  r.inertia_history.push_back(assign(points, r.centroids, r.assignment, dist));
  return r;
}

void FocalBank::validate() const {
  require(k() >= 1, "focal bank has no centroids");
  require(latent_means.rows() == k() && latent_scales.size() == k(),
          "focal bank component counts disagree");
  for (int i = 0; i < k(); ++i) {
    const double norm = latent_means.row(i).norm();
    require(std::abs(norm - 1.0) <= 1e-6, "latent mean " + std::to_string(i) + " is not unit norm");
    require(latent_scales[i] > 0.0, "latent scale " + std::to_string(i) + " is not positive");
    for (int j = 0; j < i; ++j)
      require((centroids.row(i) - centroids.row(j)).squaredNorm() > 0.0,
              "centroids " + std::to_string(j) + " and " + std::to_string(i) + " coincide");
  }
}

Features init_latent_means(int k, int latent_dim, std::uint64_t seed) {
  require(k >= 1, "init_latent_means: K must be >= 1");
  require(latent_dim >= 1, "init_latent_means: latent dimension must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Features means(k, latent_dim);
  for (int i = 0; i < k; ++i) {
    double norm = 0.0;
    do {
      for (int d = 0; d < latent_dim; ++d) means(i, d) = normal(rng);
      norm = means.row(i).norm();
    } while (norm == 0.0);
    means.row(i) /= norm;
  }
  return means;
}

Eigen::VectorXd boundary_features(const geometry::BoundaryMap& map, int side) {
  require(side >= 1 && map.height % side == 0 && map.width % side == 0,
          "boundary_features: map size " + std::to_string(map.height) + "x" +
              std::to_string(map.width) + " not divisible by " + std::to_string(side));
  const int fy = map.height / side, fx = map.width / side;
  const double inv = 1.0 / (fy * fx);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(map.channels) * side * side);
  for (int c = 0; c < map.channels; ++c)
    for (int y = 0; y < map.height; ++y)
      for (int x = 0; x < map.width; ++x)
        f[(static_cast<Eigen::Index>(c) * side + y / fy) * side + x / fx] += map.at(c, y, x) * inv;
  return f;
}

Features boundary_features(const std::vector<geometry::BoundaryMap>& maps, int side) {
  require(!maps.empty(), "boundary_features: no maps");
  const Eigen::VectorXd first = boundary_features(maps.front(), side);
  Features out(static_cast<Eigen::Index>(maps.size()), first.size());
  out.row(0) = first.transpose();
  for (std::size_t i = 1; i < maps.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = boundary_features(maps[i], side).transpose();
  return out;
}

Eigen::VectorXd focal_weights(const Eigen::Ref<const Eigen::VectorXd>& features, const FocalBank& bank,
                              bool* warned) {
  require(features.size() == bank.feature_dim(),
          "focal_weights: feature dimension " + std::to_string(features.size()) + " vs bank " +
              std::to_string(bank.feature_dim()));
  const int k = bank.k();
  if (warned) *warned = false;
  const double norm = features.norm();
  if (norm == 0.0) {
    if (warned) *warned = true;
    return Eigen::VectorXd::Constant(k, 1.0 / k);
  }
  Eigen::VectorXd s(k);
  for (int i = 0; i < k; ++i) {
    const double cn = bank.centroids.row(i).norm();
    const double cos = cn > 0.0 ? bank.centroids.row(i).dot(features) / (cn * norm) : 0.0;
    s[i] = 0.5 * (1.0 + std::clamp(cos, -1.0, 1.0));
  }
  const double total = s.sum();
  if (total <= 0.0) return Eigen::VectorXd::Constant(k, 1.0 / k);
  return s / total;
}

Eigen::VectorXd focal_weights(const geometry::BoundaryMap& map, const FocalBank& bank, bool* warned) {
  return focal_weights(boundary_features(map, bank.feature_side), bank, warned);
}

FocalBank build_bank(const std::vector<geometry::BoundaryMap>& train_maps, const BankOptions& opts) {
  require(opts.latent_dim >= 1, "build_bank: latent_dim must be set");
  require(opts.latent_scale > 0.0, "build_bank: latent scale must be positive");
  FocalBank bank;
  bank.feature_side = opts.feature_side;
  const Features feats = boundary_features(train_maps, opts.feature_side);
  bank.centroids = kmeans(feats, opts.kmeans).centroids;
  bank.latent_means = init_latent_means(opts.kmeans.k, opts.latent_dim, opts.kmeans.seed ^ 0x5eedf0c4ull);
  bank.latent_scales = Eigen::VectorXd::Constant(opts.kmeans.k, opts.latent_scale);
  return bank;
}

nlohmann::json to_json(const FocalBank& bank) {
  auto rows = [](const Features& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      out.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
    return out;
  };
  return {{"schema_version", 1},
          {"k", bank.k()},
          {"feature_side", bank.feature_side},
          {"centroids", rows(bank.centroids)},
          {"latent_means", rows(bank.latent_means)},
          {"latent_scales", std::vector<double>(bank.latent_scales.data(),
                                                bank.latent_scales.data() + bank.latent_scales.size())}};
}

FocalBank bank_from_json(const nlohmann::json& j) {
  require(j.at("schema_version").get<int>() == 1, "unsupported focal bank schema version");
  auto rows = [](const nlohmann::json& arr) {
    const auto n = static_cast<Eigen::Index>(arr.size());
    const auto d = n > 0 ? static_cast<Eigen::Index>(arr[0].size()) : 0;
    Features m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = arr[static_cast<std::size_t>(i)].get<std::vector<double>>();
      require(static_cast<Eigen::Index>(row.size()) == d, "ragged matrix in focal bank");
      m.row(i) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), d);
    }
    return m;
  };
  FocalBank bank;
  bank.feature_side = j.at("feature_side").get<int>();
  bank.centroids = rows(j.at("centroids"));
  bank.latent_means = rows(j.at("latent_means"));
  const auto scales = j.at("latent_scales").get<std::vector<double>>();
  bank.latent_scales = Eigen::Map<const Eigen::VectorXd>(scales.data(), static_cast<Eigen::Index>(scales.size()));
  bank.validate();
  return bank;
}

void save_bank(const FocalBank& bank, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write focal bank to " + path);
  out << to_json(bank).dump() << "\n";
}

FocalBank load_bank(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read focal bank " + path);
  return bank_from_json(nlohmann::json::parse(in));
}

afvae::GrayImage centroid_montage(const FocalBank& bank) {
  const int side = bank.feature_side;
  const int channels = bank.feature_dim() / (side * side);
  const int k = bank.k();
  afvae::GrayImage img(side, k * (side + 1) - 1);
  for (int i = 0; i < k; ++i) {
    std::vector<double> tile(static_cast<std::size_t>(side) * side, 0.0);
    for (int c = 0; c < channels; ++c)
      for (int p = 0; p < side * side; ++p) tile[p] += bank.centroids(i, c * side * side + p);
    const double m = *std::max_element(tile.begin(), tile.end());
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        img.at(y, i * (side + 1) + x) = m > 0.0 ? tile[y * side + x] / m : 0.0;
  }
  return img;
}

}  // namespace afvae::focal
