#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afvae/geometry.hpp"
#include "afvae/image.hpp"
#include "afvae/tensor.hpp"

namespace afvae::data {

enum class Split { train, test };
std::string to_string(Split s);

struct Record {
  int id = 0;
  int identity_id = 0;
  /// Image path relative to the corpus root.
  std::string image_ref;
  geometry::LandmarkSet landmarks;
  Split split = Split::train;
};

/// Records plus their decoded images (images[i] belongs to records[i]).
struct Corpus {
  std::vector<Record> records;
  std::vector<RgbImage> images;
  std::string root;
  double train_frac = 0.9;
  std::uint64_t split_seed = 0;

  std::vector<int> indices(Split s) const;
  std::vector<int> identities(Split s) const;
};

/// Number of identities assigned to train: ceil(frac * n), kept in [1, n-1]
/// so both sides are non-empty.
int train_identity_count(int n_identities, double train_frac);

/// Shuffles the distinct identities under seed and tags the records of the
/// first train_identity_count(...) of them as train, the rest as test.
/// Throws when there are fewer than two identities.
Corpus split_by_identity(std::vector<Record> records, double train_frac, std::uint64_t seed);

struct SyntheticOptions {
  int n_identities = 100;
  int samples_per_identity = 8;
  std::uint64_t seed = 0;
  int size = 64;
  double train_frac = 0.9;
};

/// Colour of the 8-level-per-channel grid cell centre: (k + 0.5) / 8.
double palette_level(int k);

/// Every identity gets fixed skin/hair colours and texture; expression, yaw
/// and scale vary per sample. Images are quantized to 8 bits so the corpus
/// equals its on-disk form.
Corpus build_synthetic_corpus(const SyntheticOptions& opts);
Corpus build_synthetic_corpus(int n_identities, int samples_per_identity, std::uint64_t seed, int size = 64);

/// Appearance of identity `identity` under the corpus seed.
geometry::Appearance synthetic_appearance(std::uint64_t seed, int identity);

/// Writes images/<ref>.ppm, landmarks.jsonl and manifest.json under root.
void write_corpus(const Corpus& corpus, const std::string& root);
Corpus load_corpus(const std::string& root);

/// Record positions grouped into batches for one epoch. The final batch is
/// short when the count is not a multiple of batch_size.
std::vector<std::vector<int>> epoch_batches(const std::vector<int>& indices, int batch_size, bool shuffle,
                                            std::uint64_t seed);

struct Batch {
  std::vector<int> records;
  Tensor images;      // B x 3 x H x W
  Tensor boundaries;  // B x C x H x W
  std::vector<geometry::LandmarkSet> landmarks;
  std::vector<geometry::BoundaryMap> maps;
};

/// Gathers images and renders boundary maps for the given record positions.
Batch make_batch(const Corpus& corpus, const std::vector<int>& positions, const geometry::BoundaryOptions& opts);

/// All batches of one epoch over the records of one split.
std::vector<Batch> iterate_batches(const Corpus& corpus, Split split, int batch_size, bool shuffle,
                                   std::uint64_t seed, const geometry::BoundaryOptions& opts = {});

}  // namespace afvae::data
