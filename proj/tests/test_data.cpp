#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "apt/data.hpp"

using namespace apt;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("apt_data_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> image_fixture() {
  // Two 2x2 images: [0 255; 255 0] and [255 255; 0 0].
  return {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 255, 0, 255, 255, 0, 0};
}

std::vector<std::uint8_t> label_fixture(std::uint8_t count = 2) {
  std::vector<std::uint8_t> b{0, 0, 8, 1, 0, 0, 0, count};
  for (std::uint8_t i = 0; i < count; ++i) b.push_back(static_cast<std::uint8_t>(i % 2 ? 7 : 3));
  return b;
}

}  // namespace

TEST(Idx, HandcraftedFixture) {
  TempDir dir;
  write_bytes(dir.path() / "img", image_fixture());
  write_bytes(dir.path() / "lab", label_fixture());
  const Dataset ds = load_idx(dir.path() / "img", dir.path() / "lab");
  EXPECT_EQ(ds.images.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(ds.images.values(), (std::vector<double>{0, 1, 1, 0, 1, 1, 0, 0}));
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 7}));
  EXPECT_EQ(ds.class_count, 8);
}

TEST(Idx, WrongMagicRejected) {
  TempDir dir;
  auto img = image_fixture();
  img[3] = 2;  // 0x00000802
  write_bytes(dir.path() / "img", img);
  write_bytes(dir.path() / "lab", label_fixture());
  try {
    load_idx(dir.path() / "img", dir.path() / "lab");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("not an IDX file"), std::string::npos);
  }
}

TEST(Idx, CountMismatchAndTruncation) {
  TempDir dir;
  write_bytes(dir.path() / "img", image_fixture());
  write_bytes(dir.path() / "lab3", label_fixture(3));
  EXPECT_THROW(load_idx(dir.path() / "img", dir.path() / "lab3"), DataError);

  auto cut = image_fixture();
  cut.pop_back();
  write_bytes(dir.path() / "cut", cut);
  write_bytes(dir.path() / "lab", label_fixture());
  EXPECT_THROW(load_idx(dir.path() / "cut", dir.path() / "lab"), DataError);

  write_bytes(dir.path() / "short", {0, 0, 8});
  EXPECT_THROW(load_idx(dir.path() / "short", dir.path() / "lab"), DataError);
  EXPECT_THROW(load_idx(dir.path() / "absent", dir.path() / "lab"), DataError);
}

TEST(Idx, BundledMnistSubset) {
  const fs::path root = APT_DATA_DIR;  // the mnist5k directory
  const Dataset train = load_idx_dir(root, "train");
  const Dataset test = load_idx_dir(root, "t10k");
  EXPECT_EQ(train.images.shape(), (Shape{5000, 28, 28}));
  EXPECT_EQ(test.images.shape(), (Shape{1000, 28, 28}));
  EXPECT_EQ(train.class_count, 10);
  for (const Dataset* ds : {&train, &test}) {
    const auto [lo, hi] = std::minmax_element(ds->images.values().begin(), ds->images.values().end());
    EXPECT_EQ(*lo, 0.0);
    EXPECT_EQ(*hi, 1.0);
    EXPECT_NO_THROW(ds->validate());
  }
  std::vector<int> counts(10, 0);
  for (int l : train.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) EXPECT_GT(c, 350);
}

TEST(Idx, RoundTripPlainAndGzip) {
  TempDir dir;
  Dataset ds;
  std::mt19937_64 gen(1);
  std::vector<double> pix(5 * 3 * 4);
  for (double& v : pix) v = static_cast<double>(gen() % 256) / 255.0;
  ds.images = Tensor(Shape{5, 3, 4}, pix);
  ds.labels = {0, 4, 2, 9, 1};
  ds.class_count = 10;
  for (const char* ext : {"", ".gz"}) {
    const fs::path img = dir.path() / (std::string("i") + ext), lab = dir.path() / (std::string("l") + ext);
    write_idx(ds, img, lab);
    const Dataset back = load_idx(img, lab);
    EXPECT_EQ(back.images, ds.images) << ext;
    EXPECT_EQ(back.labels, ds.labels) << ext;
  }
  // The .gz variant is really compressed: it starts with the gzip magic.
  std::ifstream f(dir.path() / "i.gz", std::ios::binary);
  EXPECT_EQ(f.get(), 0x1f);
  EXPECT_EQ(f.get(), 0x8b);
}

TEST(Blobs, DeterministicPerSeed) {
  const Dataset a = synthetic_blobs(300, 3, 5, 42), b = synthetic_blobs(300, 3, 5, 42);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(synthetic_blobs(300, 3, 5, 43).images, a.images);
}

TEST(Blobs, SingleClass) {
  const Dataset ds = synthetic_blobs(50, 1, 4, 1);
  for (int l : ds.labels) EXPECT_EQ(l, 0);
  EXPECT_EQ(ds.class_count, 1);
}

TEST(Blobs, TwoClassesAreLinearlySeparable) {
  const Dataset train = synthetic_blobs(2000, 2, 16, 3), test = synthetic_blobs(2000, 2, 16, 4);
  // Nearest class mean, which is a linear rule for two classes.
  std::vector<std::vector<double>> mean(2, std::vector<double>(16, 0.0));
  std::vector<int> n(2, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto c = static_cast<std::size_t>(train.labels[i]);
    ++n[c];
    for (std::size_t d = 0; d < 16; ++d) mean[c][d] += train.images.row(i)[d];
  }
  for (std::size_t c = 0; c < 2; ++c) {
    for (double& m : mean[c]) m /= n[c];
  }
  int correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double d0 = 0.0, d1 = 0.0;
    for (std::size_t d = 0; d < 16; ++d) {
      const double x = test.images.row(i)[d];
      d0 += (x - mean[0][d]) * (x - mean[0][d]);
      d1 += (x - mean[1][d]) * (x - mean[1][d]);
    }
    correct += (d1 < d0 ? 1 : 0) == test.labels[i];
  }
  EXPECT_GE(correct / static_cast<double>(test.size()), 0.99);
}

TEST(Sampler, BatchSizes) {
  const Dataset ds = synthetic_blobs(10, 2, 2, 1);
  BatchSampler s(ds, 4, 0, true);
  EXPECT_EQ(s.batches_per_epoch(), 3u);
  s.start_epoch(0);
  std::vector<std::size_t> sizes;
  while (auto b = s.next()) sizes.push_back(b->y.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_THROW(BatchSampler(ds, 0, 0, true), std::invalid_argument);
}

TEST(Sampler, NoShuffleKeepsOrder) {
  const Dataset ds = synthetic_blobs(10, 3, 2, 1);
  BatchSampler s(ds, 3, 9, false);
  s.start_epoch(5);
  std::vector<std::size_t> seen;
  while (auto b = s.next()) {
    for (std::size_t r = 0; r < b->indices.size(); ++r) {
      seen.push_back(b->indices[r]);
      EXPECT_EQ(b->y[r], ds.labels[b->indices[r]]);
      EXPECT_TRUE(std::equal(b->x.row(r).begin(), b->x.row(r).end(), ds.images.row(b->indices[r]).begin()));
    }
  }
  std::vector<std::size_t> expect(10);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(seen, expect);
}

TEST(Sampler, EveryIndexOncePerEpochAndOrdersDiffer) {
  const Dataset ds = synthetic_blobs(257, 2, 2, 1);
  BatchSampler s(ds, 32, 7, true);
  std::vector<std::vector<std::size_t>> orders;
  for (std::size_t epoch = 0; epoch < 4; ++epoch) {
    s.start_epoch(epoch);
    std::vector<std::size_t> seen;
    while (auto b = s.next()) seen.insert(seen.end(), b->indices.begin(), b->indices.end());
    std::multiset<std::size_t> ms(seen.begin(), seen.end());
    ASSERT_EQ(ms.size(), 257u);
    for (std::size_t i = 0; i < 257; ++i) ASSERT_EQ(ms.count(i), 1u);
    orders.push_back(seen);
  }
  EXPECT_NE(orders[0], orders[1]);
  BatchSampler again(ds, 32, 7, true);
  again.start_epoch(1);
  EXPECT_EQ(again.next()->indices, std::vector<std::size_t>(orders[1].begin(), orders[1].begin() + 32));
}
