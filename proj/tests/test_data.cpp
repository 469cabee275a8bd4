#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "mgunet/data.hpp"
#include "mgunet/metrics.hpp"
#include "oracles.hpp"

using namespace mgu;
using namespace mgu::oracle;

namespace {

std::vector<LabeledSample> phantoms(std::size_t n, std::uint64_t seed = 1) {
  PhantomSpec spec;
  spec.seed = seed;
  return gen_phantom(spec, n);
}

}  // namespace

TEST(Phantom, ColumnsAreStratifiedTopToBottom) {
  const auto samples = phantoms(6);
  for (const auto& s : samples) {
    for (std::size_t x = 0; x < s.width; ++x) {
      std::vector<std::uint8_t> runs;  // distinct labels down the column
      for (std::size_t y = 0; y < s.height; ++y) {
        const auto l = s.label.at(y, x);
        if (runs.empty() || runs.back() != l) runs.push_back(l);
      }
      if (std::find(runs.begin(), runs.end(), kDiscLabel) != runs.end()) {
        ASSERT_EQ(runs.front(), 0) << s.id << " column " << x;
        continue;
      }
      const std::vector<std::uint8_t> expected{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0};
      ASSERT_EQ(runs, expected) << s.id << " column " << x;
    }
  }
}

TEST(Phantom, SameSeedSameBytes) {
  EXPECT_EQ(phantoms(4, 7), phantoms(4, 7));
  EXPECT_NE(phantoms(4, 7)[0].image, phantoms(4, 8)[0].image);
  // sample i does not depend on how many are generated
  EXPECT_EQ(phantoms(3, 7)[2], phantoms(5, 7)[2]);
}

TEST(Phantom, DiscAreaWithinGeometricBounds) {
  const PhantomSpec spec;
  double stack_min = 0.0, stack_max = 0.0;
  for (std::size_t k = 0; k < 9; ++k) {
    stack_min += spec.thickness_min[k];
    stack_max += spec.thickness_max[k];
  }
  const double pixels = static_cast<double>(spec.height * spec.width);
  const double lo = (2.0 * spec.disc_half_width_min - 2.0) * stack_min / pixels;
  const double hi = (2.0 * spec.disc_half_width_max + 2.0) * (stack_max + spec.disc_depth_max) / pixels;
  for (const auto& s : phantoms(10, 3)) {
    const auto disc = std::count(s.label.labels.begin(), s.label.labels.end(), kDiscLabel);
    const double frac = static_cast<double>(disc) / pixels;
    EXPECT_GE(frac, lo) << s.id;
    EXPECT_LE(frac, hi) << s.id;
  }
}

TEST(Phantom, ScansShareTheirSubject) {
  const auto s = phantoms(5);
  EXPECT_EQ(s[0].subject, "s000");
  EXPECT_EQ(s[1].subject, "s000");
  EXPECT_EQ(s[2].subject, "s001");
  EXPECT_EQ(s[4].id, "s002_0");
  for (const auto& x : s)
    for (double v : x.image) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Phantom, InfeasibleSpecIsConfigError) {
  PhantomSpec spec;
  spec.height = 64;  // stack does not fit
  EXPECT_THROW(gen_phantom(spec, 1), ConfigError);
  spec = PhantomSpec{};
  spec.width = 250;
  EXPECT_THROW(gen_phantom(spec, 1), ConfigError);
}

TEST(PhantomSpecFile, ParsesKeysAndRejectsUnknown) {
  const auto dir = scratch_dir("phantom_spec");
  {
    std::ofstream(dir / "a.spec") << "# comment\nheight = 112\nwidth=128\nnoise_sigma = 0.1\n";
    std::ofstream(dir / "b.spec") << "colour = blue\n";
  }
  const auto spec = read_phantom_spec(dir / "a.spec");
  EXPECT_EQ(spec.height, 112u);
  EXPECT_EQ(spec.width, 128u);
  EXPECT_EQ(spec.noise_sigma, 0.1);
  EXPECT_THROW(read_phantom_spec(dir / "b.spec"), ConfigError);
}

TEST(Augment, IdentityParametersLeaveTheSampleUnchanged) {
  const auto s = phantoms(1)[0];
  Rng rng(1);
  EXPECT_EQ(augment_with(s, {}, rng), s);
}

TEST(Augment, FlipTwiceIsIdentityAndMovesLabels) {
  const auto s = phantoms(1)[0];
  const auto f = flip_horizontal(s);
  EXPECT_EQ(flip_horizontal(f), s);
  EXPECT_EQ(f.label.at(40, 0), s.label.at(40, s.width - 1));
  EXPECT_EQ(f.image[5 * s.width + 3], s.image[5 * s.width + s.width - 4]);
}

TEST(Augment, PhotometricChangesKeepLabels) {
  const auto s = phantoms(1)[0];
  Rng rng(2);
  for (int i = 0; i < 5; ++i) {
    const auto a = augment(s, rng);
    EXPECT_TRUE(a.label == s.label || a.label == flip_horizontal(s).label);
    for (double v : a.image) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
  AugmentParams p;
  p.contrast = 1.0;
  p.noise_sigma = 0.0;
  p.flip = true;
  EXPECT_EQ(augment_with(s, p, rng), flip_horizontal(s));
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = scratch_dir("dataset_roundtrip");
  const auto samples = phantoms(10);
  const auto split = make_split(samples, 3);
  save_dataset(dir, samples, &split);
  const auto ds = load_dataset(dir);
  ASSERT_EQ(ds.samples.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(ds.samples[i], samples[i]) << samples[i].id;  // images are 16-bit quantized already
  }
  const auto again = dataset_split(ds, 99);
  EXPECT_EQ(again.train, split.train);
  EXPECT_EQ(again.val, split.val);
  EXPECT_EQ(again.test, split.test);
}

TEST(Dataset, OutOfRangeLabelNamesTheFile) {
  const auto dir = scratch_dir("dataset_bad_label");
  auto samples = phantoms(2);
  save_dataset(dir, samples);
  auto lab = read_png(dir / "labels" / "s000_1.png");
  lab.samples[17] = 11;
  write_png(dir / "labels" / "s000_1.png", lab);
  try {
    load_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("s000_1.png"), std::string::npos) << e.what();
    EXPECT_EQ(e.exit_code(), 3);
  }
}

TEST(Dataset, EmptyAndMissingDirectories) {
  const auto dir = scratch_dir("dataset_empty");
  std::filesystem::create_directories(dir / "images");
  EXPECT_TRUE(load_dataset(dir).samples.empty());
  EXPECT_THROW(load_dataset(dir / "nope"), IoError);
}

TEST(Dataset, WithoutManifestSubjectsComeFromIds) {
  const auto dir = scratch_dir("dataset_no_manifest");
  save_dataset(dir, phantoms(3));
  std::filesystem::remove(dir / "manifest.tsv");
  const auto ds = load_dataset(dir);
  ASSERT_EQ(ds.samples.size(), 3u);
  EXPECT_EQ(ds.samples[2].subject, "s001");
}

TEST(Split, TenSubjectsSplitSixTwoTwo) {
  const auto samples = phantoms(20);
  const auto split = make_split(samples, 5);
  EXPECT_EQ(split.train.size(), 6u);
  EXPECT_EQ(split.val.size(), 2u);
  EXPECT_EQ(split.test.size(), 2u);
  std::set<std::string> all;
  for (const auto* v : {&split.train, &split.val, &split.test}) all.insert(v->begin(), v->end());
  EXPECT_EQ(all.size(), 10u);
  // subject-disjoint: both scans of a subject land in the same split
  for (const auto& s : select_split(samples, split, Split::kTest)) {
    EXPECT_TRUE(std::find(split.test.begin(), split.test.end(), s.subject) != split.test.end());
  }
  EXPECT_EQ(select_split(samples, split, Split::kTrain).size(), 12u);
  EXPECT_EQ(make_split(samples, 5).test, split.test);
  EXPECT_THROW(make_split(phantoms(8), 1), ConfigError);
}

TEST(Png, SixteenAndEightBitRoundTrip) {
  const auto dir = scratch_dir("png");
  PngImage a{5, 3, 1, 16, {}};
  for (std::size_t i = 0; i < 15; ++i) a.samples.push_back(static_cast<std::uint16_t>(i * 4000 + 7));
  write_png(dir / "a.png", a);
  const auto ra = read_png(dir / "a.png");
  EXPECT_EQ(ra.samples, a.samples);
  EXPECT_EQ(ra.bit_depth, 16);
  PngImage b{2, 2, 3, 8, {0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255}};
  write_png(dir / "b.png", b);
  const auto rb = read_png(dir / "b.png");
  EXPECT_EQ(rb.samples, b.samples);
  EXPECT_EQ(rb.channels, 3u);
  {
    std::ofstream(dir / "c.png") << "text";
  }
  EXPECT_THROW(read_png(dir / "c.png"), DataError);
}
