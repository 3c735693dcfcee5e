#include "afvae/datasets.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "afvae/rng.hpp"

namespace afvae::data {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

namespace {

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

constexpr int kManifestVersion = 1;

}  // namespace

std::vector<int> Corpus::indices(Split s) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == s) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Corpus::identities(Split s) const {
  std::set<int> ids;
  for (const auto& r : records)
    if (r.split == s) ids.insert(r.identity_id);
  return {ids.begin(), ids.end()};
}

int train_identity_count(int n, double frac) {
  require(frac > 0.0 && frac < 1.0, "train fraction must lie in (0, 1)");
  const int k = static_cast<int>(std::ceil(frac * n - 1e-9));
  return std::clamp(k, 1, n - 1);
}

Corpus split_by_identity(std::vector<Record> records, double train_frac, std::uint64_t seed) {
  std::set<int> unique;
  for (const auto& r : records) unique.insert(r.identity_id);
  if (unique.size() < 2)
    throw std::invalid_argument("split_by_identity: need at least 2 identities, got " +
                                std::to_string(unique.size()));
  std::vector<int> ids(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const int n_train = train_identity_count(static_cast<int>(ids.size()), train_frac);
  const std::set<int> train(ids.begin(), ids.begin() + n_train);

  Corpus c;
  c.train_frac = train_frac;
  c.split_seed = seed;
  c.records = std::move(records);
  for (auto& r : c.records) r.split = train.count(r.identity_id) ? Split::train : Split::test;
  return c;
}

double palette_level(int k) { return (k + 0.5) / 8.0; }

geometry::Appearance synthetic_appearance(std::uint64_t seed, int identity) {
  std::mt19937_64 rng(derive_seed(seed, "appearance", static_cast<std::uint64_t>(identity)));
  auto pick = [&rng](int lo, int hi) { return palette_level(std::uniform_int_distribution<int>(lo, hi)(rng)); };
  geometry::Appearance a;
  a.skin = {pick(5, 7), pick(3, 5), pick(2, 4)};
  a.hair = {pick(0, 3), pick(0, 2), pick(0, 2)};
  a.texture_seed = rng();
  return a;
}

Corpus build_synthetic_corpus(const SyntheticOptions& opts) {
  require(opts.n_identities >= 10, "build_synthetic_corpus: need at least 10 identities");
  require(opts.samples_per_identity >= 1, "build_synthetic_corpus: samples_per_identity must be >= 1");
  require(opts.size >= 16, "build_synthetic_corpus: image size must be >= 16");

  std::vector<geometry::SyntheticFaceSpec> specs;
  for (int id = 0; id < opts.n_identities; ++id) {
    const auto app = synthetic_appearance(opts.seed, id);
    std::mt19937_64 rng(derive_seed(opts.seed, "structure", static_cast<std::uint64_t>(id)));
    std::uniform_real_distribution<double> sym(-1.0, 1.0), sc(0.85, 1.15);
    for (int s = 0; s < opts.samples_per_identity; ++s) {
      geometry::SyntheticFaceSpec spec;
      spec.appearance = app;
      spec.identity_id = id;
      spec.structure.expression = sym(rng);
      spec.structure.yaw = sym(rng);
      spec.structure.scale = sc(rng);
      specs.push_back(spec);
    }
  }

  const int n = static_cast<int>(specs.size());
  std::vector<Record> records(n);
  std::vector<RgbImage> images(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    auto face = geometry::synth_face(specs[i], opts.size, opts.size);
    images[i] = quantize8(face.image);
    Record& r = records[i];
    r.id = i;
    r.identity_id = specs[i].identity_id;
    char ref[64];
    std::snprintf(ref, sizeof ref, "images/id%05d_%03d.ppm", r.identity_id, i % opts.samples_per_identity);
    r.image_ref = ref;
    r.landmarks = std::move(face.landmarks);
  }

  Corpus c = split_by_identity(std::move(records), opts.train_frac, derive_seed(opts.seed, "split"));
  c.images = std::move(images);
  return c;
}

Corpus build_synthetic_corpus(int n_identities, int samples_per_identity, std::uint64_t seed, int size) {
  SyntheticOptions o;
  o.n_identities = n_identities;
  o.samples_per_identity = samples_per_identity;
  o.seed = seed;
  o.size = size;
  return build_synthetic_corpus(o);
}

void write_corpus(const Corpus& corpus, const std::string& root) {
  require(corpus.images.size() == corpus.records.size(), "write_corpus: images not loaded");
  fs::create_directories(fs::path(root) / "images");
  nlohmann::json records = nlohmann::json::array();
  std::ofstream lm(fs::path(root) / "landmarks.jsonl");
  if (!lm) throw std::runtime_error("cannot write " + (fs::path(root) / "landmarks.jsonl").string());
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const Record& r = corpus.records[i];
    write_ppm(corpus.images[i], (fs::path(root) / r.image_ref).string());
    records.push_back({{"id", r.id}, {"identity", r.identity_id}, {"image", r.image_ref}, {"split", to_string(r.split)}});
    lm << nlohmann::json{{"id", r.id}, {"landmarks", geometry::to_json(r.landmarks)}}.dump() << "\n";
  }
  const nlohmann::json manifest{{"schema_version", kManifestVersion},
                                {"kind", "afvae-corpus"},
                                {"train_frac", corpus.train_frac},
                                {"split_seed", corpus.split_seed},
                                {"landmarks", "landmarks.jsonl"},
                                {"records", records}};
  std::ofstream out(fs::path(root) / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest under " + root);
  out << manifest.dump(1) << "\n";
}

Corpus load_corpus(const std::string& root) {
  std::ifstream in(fs::path(root) / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json under " + root);
  const auto manifest = nlohmann::json::parse(in);
  const int version = manifest.at("schema_version").get<int>();
  if (version != kManifestVersion)
    throw std::runtime_error("unsupported corpus schema version " + std::to_string(version));

  Corpus c;
  c.root = root;
  c.train_frac = manifest.at("train_frac").get<double>();
  c.split_seed = manifest.at("split_seed").get<std::uint64_t>();
  for (const auto& jr : manifest.at("records")) {
    Record r;
    r.id = jr.at("id").get<int>();
    r.identity_id = jr.at("identity").get<int>();
    r.image_ref = jr.at("image").get<std::string>();
    r.split = parse_split(jr.at("split").get<std::string>());
    c.records.push_back(std::move(r));
  }

  std::ifstream lm(fs::path(root) / manifest.at("landmarks").get<std::string>());
  if (!lm) throw std::runtime_error("missing landmarks file under " + root);
  std::string line;
  std::size_t seen = 0;
  while (std::getline(lm, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const int id = j.at("id").get<int>();
    auto it = std::find_if(c.records.begin(), c.records.end(), [id](const Record& r) { return r.id == id; });
    if (it == c.records.end()) throw std::runtime_error("landmarks for unknown record " + std::to_string(id));
    it->landmarks = geometry::landmarks_from_json(j.at("landmarks"));
    ++seen;
  }
  if (seen != c.records.size())
    throw std::runtime_error("landmarks file covers " + std::to_string(seen) + " of " +
                             std::to_string(c.records.size()) + " records");

  c.images.resize(c.records.size());
  for (std::size_t i = 0; i < c.records.size(); ++i)
    c.images[i] = read_ppm((fs::path(root) / c.records[i].image_ref).string());
  return c;
}

std::vector<std::vector<int>> epoch_batches(const std::vector<int>& indices, int batch_size, bool shuffle,
                                            std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1, got " + std::to_string(batch_size));
  require(!indices.empty(), "cannot iterate an empty split");
  std::vector<int> order = indices;
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<int>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  return batches;
}

Batch make_batch(const Corpus& corpus, const std::vector<int>& positions, const geometry::BoundaryOptions& opts) {
  require(!positions.empty(), "make_batch: empty batch");
  const int n = static_cast<int>(positions.size());
  Batch b;
  b.records = positions;
  b.landmarks.resize(n);
  b.maps.resize(n);
#pragma omp parallel for
  for (int i = 0; i < n; ++i) {
    b.landmarks[i] = corpus.records[positions[i]].landmarks;
    b.maps[i] = geometry::render_boundary(b.landmarks[i], opts);
  }
  std::vector<Tensor> imgs, maps;
  for (int i = 0; i < n; ++i) {
    imgs.push_back(to_tensor(corpus.images[positions[i]]));
    maps.push_back(b.maps[i].to_tensor());
  }
  b.images = concat_batch(imgs);
  b.boundaries = concat_batch(maps);
  return b;
}

std::vector<Batch> iterate_batches(const Corpus& corpus, Split split, int batch_size, bool shuffle,
                                   std::uint64_t seed, const geometry::BoundaryOptions& opts) {
  std::vector<Batch> out;
  for (const auto& ids : epoch_batches(corpus.indices(split), batch_size, shuffle, seed))
    out.push_back(make_batch(corpus, ids, opts));
  return out;
}

}  // namespace afvae::data
