#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "afvae/datasets.hpp"
#include "test_util.hpp"

using namespace afvae;
using namespace afvae::data;

namespace {

std::vector<Record> records_with_identities(int n_identities, int per = 2) {
  std::vector<Record> out;
  for (int id = 0; id < n_identities; ++id)
    for (int s = 0; s < per; ++s) {
      Record r;
      r.id = static_cast<int>(out.size());
      r.identity_id = id;
      out.push_back(r);
    }
  return out;
}

// Bins holding at least `min_share` of the pixels in an 8-level-per-channel
// RGB histogram.
std::set<int> dominant_bins(const RgbImage& img, double min_share) {
  std::map<int, int> counts;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      int key = 0;
      for (int c = 0; c < 3; ++c) key = key * 8 + std::min(7, static_cast<int>(img.at(y, x, c) * 8.0));
      ++counts[key];
    }
  std::set<int> out;
  const double total = static_cast<double>(img.height) * img.width;
  for (const auto& [key, n] : counts)
    if (n / total >= min_share) out.insert(key);
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(SyntheticCorpus, SmallCorpusHasNinetyTenSplit) {
  const Corpus c = build_synthetic_corpus(10, 4, 1);
  EXPECT_EQ(c.records.size(), 40u);
  EXPECT_EQ(c.images.size(), 40u);
  EXPECT_EQ(c.identities(Split::train).size(), 9u);
  EXPECT_EQ(c.identities(Split::test).size(), 1u);
}

TEST(SyntheticCorpus, RebuildIsByteIdenticalOnDisk) {
  const auto a = afvae::testing::temp_dir("corpus_a");
  const auto b = afvae::testing::temp_dir("corpus_b");
  write_corpus(build_synthetic_corpus(10, 4, 1), a.string());
  write_corpus(build_synthetic_corpus(10, 4, 1), b.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a))
    if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), a));
  EXPECT_EQ(files.size(), 42u);  // 40 images, manifest, landmarks
  for (const auto& f : files) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(SyntheticCorpus, DifferentSeedsDiffer) {
  EXPECT_NE(build_synthetic_corpus(10, 2, 1).images, build_synthetic_corpus(10, 2, 2).images);
}

TEST(SyntheticCorpus, IdentitiesShareAppearanceHistogramBins) {
  const Corpus c = build_synthetic_corpus(100, 8, 7);
  ASSERT_EQ(c.records.size(), 800u);
  std::map<int, std::set<int>> reference;
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    const int id = c.records[i].identity_id;
    const auto bins = dominant_bins(c.images[i], 0.03);
    const auto app = synthetic_appearance(7, id);
    int skin_key = 0;
    for (int ch = 0; ch < 3; ++ch) skin_key = skin_key * 8 + static_cast<int>(app.skin[ch] * 8.0);
    EXPECT_TRUE(bins.count(skin_key)) << "record " << i;
    auto [it, fresh] = reference.emplace(id, bins);
    if (!fresh) EXPECT_EQ(it->second, bins) << "record " << i << " identity " << id;
  }
  EXPECT_EQ(reference.size(), 100u);
}

TEST(SyntheticCorpus, TooFewIdentitiesThrows) {
  EXPECT_THROW(build_synthetic_corpus(9, 4, 1), std::invalid_argument);
}

TEST(Split, IdentityCountArithmetic) {
  EXPECT_EQ(train_identity_count(10, 0.9), 9);
  EXPECT_EQ(train_identity_count(67, 0.9), 61);
  EXPECT_EQ(train_identity_count(100, 0.9), 90);
  EXPECT_EQ(train_identity_count(2, 0.9), 1);
  EXPECT_EQ(train_identity_count(2, 0.01), 1);
  EXPECT_THROW(train_identity_count(10, 0.0), std::invalid_argument);
  EXPECT_THROW(train_identity_count(10, 1.0), std::invalid_argument);
}

TEST(Split, TenAndSixtySevenIdentities) {
  for (auto [n, train] : {std::pair{10, 9}, std::pair{67, 61}}) {
    const Corpus c = split_by_identity(records_with_identities(n), 0.9, 3);
    EXPECT_EQ(static_cast<int>(c.identities(Split::train).size()), train);
    EXPECT_EQ(static_cast<int>(c.identities(Split::test).size()), n - train);
  }
}

TEST(Split, SingleIdentityThrows) {
  try {
    split_by_identity(records_with_identities(1), 0.9, 3);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("split_by_identity"), std::string::npos);
  }
}

TEST(Split, PartitionInvariantsHoldAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Corpus c = split_by_identity(records_with_identities(23, 3), 0.9, seed);
    const auto tr = c.indices(Split::train), te = c.indices(Split::test);
    std::set<int> all(tr.begin(), tr.end());
    all.insert(te.begin(), te.end());
    EXPECT_EQ(all.size(), c.records.size());
    EXPECT_EQ(tr.size() + te.size(), c.records.size());
    const auto ti = c.identities(Split::train), si = c.identities(Split::test);
    for (int id : si) EXPECT_EQ(std::count(ti.begin(), ti.end(), id), 0);
    EXPECT_LE(std::abs(static_cast<double>(ti.size()) - 0.9 * 23), 1.0);
  }
}

TEST(Batches, CountsAndShortTail) {
  std::vector<int> forty(40), fortytwo(42);
  std::iota(forty.begin(), forty.end(), 0);
  std::iota(fortytwo.begin(), fortytwo.end(), 0);
  EXPECT_EQ(epoch_batches(forty, 4, false, 0).size(), 10u);
  const auto b = epoch_batches(fortytwo, 4, true, 5);
  ASSERT_EQ(b.size(), 11u);
  EXPECT_EQ(b.back().size(), 2u);
  for (std::size_t i = 0; i + 1 < b.size(); ++i) EXPECT_EQ(b[i].size(), 4u);
}

TEST(Batches, ShuffleIsDeterministicAndSeedDependent) {
  std::vector<int> idx(30);
  std::iota(idx.begin(), idx.end(), 100);
  EXPECT_EQ(epoch_batches(idx, 4, true, 9), epoch_batches(idx, 4, true, 9));
  EXPECT_NE(epoch_batches(idx, 4, true, 9), epoch_batches(idx, 4, true, 10));
  const auto plain = epoch_batches(idx, 4, false, 9);
  EXPECT_EQ(plain.front().front(), 100);
}

TEST(Batches, InvalidArgumentsThrow) {
  EXPECT_THROW(epoch_batches({1, 2, 3}, 0, false, 0), std::invalid_argument);
  EXPECT_THROW(epoch_batches({}, 4, false, 0), std::invalid_argument);
}

TEST(Batches, EpochIsPermutationOfTrainSplit) {
  const Corpus c = build_synthetic_corpus(10, 3, 4, 32);
  const auto batches = iterate_batches(c, Split::train, 4, true, 11);
  std::vector<int> seen;
  for (const auto& b : batches) {
    EXPECT_EQ(b.images.shape().n, static_cast<int>(b.records.size()));
    EXPECT_EQ(b.boundaries.shape().n, static_cast<int>(b.records.size()));
    EXPECT_EQ(b.landmarks.size(), b.records.size());
    seen.insert(seen.end(), b.records.begin(), b.records.end());
  }
  auto expect = c.indices(Split::train);
  std::sort(seen.begin(), seen.end());
  std::sort(expect.begin(), expect.end());
  EXPECT_EQ(seen, expect);
}

TEST(Batches, BatchTensorsMatchRecords) {
  const Corpus c = build_synthetic_corpus(10, 2, 4, 32);
  const Batch b = make_batch(c, {3, 7}, {});
  for (int k = 0; k < 2; ++k) {
    const RgbImage& img = c.images[b.records[k]];
    for (int y = 0; y < 32; y += 5)
      for (int x = 0; x < 32; x += 3)
        for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(b.images.at(k, ch, y, x), img.at(y, x, ch));
    EXPECT_EQ(b.landmarks[k], c.records[b.records[k]].landmarks);
  }
}

TEST(CorpusIo, WriteLoadRoundTrip) {
  const auto dir = afvae::testing::temp_dir("corpus_io");
  const Corpus c = build_synthetic_corpus(12, 2, 8, 32);
  write_corpus(c, dir.string());
  const Corpus d = load_corpus(dir.string());
  ASSERT_EQ(d.records.size(), c.records.size());
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    EXPECT_EQ(d.records[i].identity_id, c.records[i].identity_id);
    EXPECT_EQ(d.records[i].split, c.records[i].split);
    EXPECT_EQ(d.records[i].image_ref, c.records[i].image_ref);
    EXPECT_EQ(d.records[i].landmarks, c.records[i].landmarks);
    EXPECT_EQ(d.images[i], c.images[i]);
  }
  EXPECT_EQ(d.split_seed, c.split_seed);
  EXPECT_DOUBLE_EQ(d.train_frac, c.train_frac);
}

TEST(CorpusIo, MissingManifestThrows) {
  const auto dir = afvae::testing::temp_dir("corpus_missing");
  EXPECT_THROW(load_corpus(dir.string()), std::runtime_error);
}
