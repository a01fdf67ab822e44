#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <set>

#include "fixture_util.hpp"
#include "mlground/evaluation.hpp"
#include "mlground/synthetic.hpp"
#include "synthetic_oracle.hpp"

namespace mlground {
namespace {

namespace fs = std::filesystem;
using testing::TempDirTest;

class SyntheticTest : public TempDirTest {};

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.samples = 40;
  s.grid = 6;
  s.level_dims = {16, 20, 24};
  s.concept_dim = 16;
  s.word_width = 16;
  s.sentence_width = 24;
  s.concepts = 6;
  s.max_concepts = 3;
  s.cell_px = 4;
  s.scenes = 4;
  s.seed = 3;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(SyntheticSpecTest, Validation) {
  auto s = small_spec();
  EXPECT_NO_THROW(s.validate());
  s.concepts = 13;
  EXPECT_THROW(s.validate(), ValueError);  // concepts plus scenes beyond concept_dim
  s = small_spec();
  s.scenes = 0;
  EXPECT_THROW(s.validate(), ValueError);
  s = small_spec();
  s.concepts = 1;
  EXPECT_THROW(s.validate(), ValueError);
  s = small_spec();
  s.noise = -0.1;
  EXPECT_THROW(s.validate(), ValueError);
  s = small_spec();
  s.level_dims = {8};
  EXPECT_THROW(s.validate(), ValueError);
  s = small_spec();
  s.max_patch = 4;
  EXPECT_THROW(s.validate(), ValueError);
  EXPECT_EQ(parse_visibility("single"), Visibility::Single);
  EXPECT_THROW(parse_visibility("some"), ValueError);
}

TEST_F(SyntheticTest, SameSeedIsByteIdentical) {
  auto spec = small_spec();
  auto a = generate_synthetic(spec, dir_ / "a");
  generate_synthetic(spec, dir_ / "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "a")) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), dir_ / "a");
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, spec.samples + 2);
  spec.seed = 4;
  generate_synthetic(spec, dir_ / "c");
  EXPECT_NE(slurp(dir_ / "a" / "index.jsonl"), slurp(dir_ / "c" / "index.jsonl"));
}

TEST_F(SyntheticTest, LoadsWithPlantedStructure) {
  auto spec = small_spec();
  spec.visibility = Visibility::Single;
  auto res = generate_synthetic(spec, dir_);
  auto ds = Dataset::load(res.index);
  ASSERT_EQ(ds.size(), spec.samples);
  EXPECT_EQ(ds.image_count(), spec.samples);
  EXPECT_EQ(ds.dims().visual_channels, spec.level_dims);
  EXPECT_EQ(ds.dims().word_layers, spec.word_layers);
  EXPECT_EQ(ds.dims().word_width, spec.word_width);
  EXPECT_EQ(ds.dims().sentence_items, spec.sentence_items);
  EXPECT_EQ(ds.dims().sentence_width, spec.sentence_width);
  std::set<std::size_t> counts;
  for (const auto& r : ds.records()) {
    EXPECT_EQ(r.image_width, spec.grid * spec.cell_px);
    ASSERT_GE(r.tokens.size(), spec.min_concepts);
    ASSERT_LE(r.tokens.size(), spec.max_concepts);
    counts.insert(r.tokens.size());
    std::set<std::string> distinct(r.tokens.begin(), r.tokens.end());
    EXPECT_EQ(distinct.size(), r.tokens.size());
    ASSERT_EQ(r.queries.size(), r.tokens.size());
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
      const auto& q = r.queries[t];
      EXPECT_EQ(q.tokens, std::vector<std::size_t>{t});
      EXPECT_EQ(q.category, r.tokens[t]);
      ASSERT_TRUE(q.planted_level.has_value());
      EXPECT_EQ(*q.planted_level, testing::concept_of(r.tokens[t]) % 3);
      const auto& b = q.boxes[0];
      EXPECT_EQ(b.x0 % 4, 0);
      EXPECT_LE(b.x1 - b.x0, std::int64_t(spec.max_patch * spec.cell_px));
    }
  }
  EXPECT_EQ(counts.size(), spec.max_concepts);
}

// sigma = 0, identity maps, full visibility: cosine with the word is maximal
// on the concept's own cells, at every level.
TEST_F(SyntheticTest, IdentityMapsPlaceMaximumOnConceptCells) {
  auto spec = small_spec();
  spec.identity_maps = true;
  spec.level_dims = {16, 16};
  spec.sentence_width = 16;
  spec.noise = 0;
  auto res = generate_synthetic(spec, dir_);
  auto ds = Dataset::load(res.index);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto s = ds.sample<double>(i);
    const auto& rec = ds.record(i);
    for (std::size_t t = 0; t < rec.tokens.size(); ++t) {
      const double* word = s.text.words.data().data() + t * spec.word_layers * spec.word_width;
      const auto& box = rec.queries[t].boxes[0];
      for (const auto& level : s.visual.levels) {
        double best = -2;
        std::size_t bx = 0, by = 0;
        for (std::size_t n = 0; n < spec.grid * spec.grid; ++n) {
          double ab = 0, aa = 0, bb = 0;
          for (std::size_t k = 0; k < spec.concept_dim; ++k) {
            const double v = level[n * spec.concept_dim + k];
            ab += v * word[k];
            aa += v * v;
            bb += word[k] * word[k];
          }
          if (ab / std::sqrt(aa * bb) > best + 1e-9) {
            best = ab / std::sqrt(aa * bb);
            bx = n % spec.grid;
            by = n / spec.grid;
          }
        }
        EXPECT_NEAR(best, 1.0, 1e-6);
        EXPECT_TRUE(box.contains(std::int64_t(bx * spec.cell_px), std::int64_t(by * spec.cell_px)));
      }
    }
  }
}

// The same setting pushed through identity mappings of the model itself.
TEST_F(SyntheticTest, IdentityModelPointsPerfectly) {
  auto spec = small_spec();
  spec.identity_maps = true;
  spec.level_dims = {16, 16};
  spec.sentence_width = 16;
  spec.noise = 0;
  auto res = generate_synthetic(spec, dir_);
  auto ds = Dataset::load(res.index);
  auto params = init_params<double>(1, ds.dims().mapping(16));
  for (const auto& name : params.names()) {
    auto& p = params.at(name).value;
    if (p.rank() == 2 && p.dim(0) == p.dim(1)) {
      p.fill(0);
      for (std::size_t k = 0; k < p.dim(0); ++k) p.at(k, k) = 1;
    }
  }
  ModelOptions opts;
  opts.mapping.grid = spec.grid;
  opts.mapping.linear_visual = opts.mapping.linear_text = true;
  auto rep = evaluate(ds, params, opts, EvalMode::Word);
  EXPECT_EQ(rep.pointing_accuracy, 1.0);
}

TEST_F(SyntheticTest, OracleCeilingIsPerfectWithoutNoise) {
  auto spec = small_spec();
  spec.noise = 0;
  auto res = generate_synthetic(spec, dir_);
  auto ds = Dataset::load(res.index);
  auto world = testing::World::load(dir_ / "world.gtf");
  EXPECT_EQ(testing::oracle_report(ds, world).pointing_accuracy, 1.0);
}

TEST_F(SyntheticTest, DecodeRecoversConceptOnlyAtItsLevel) {
  auto spec = small_spec();
  spec.visibility = Visibility::Single;
  spec.samples = 80;
  auto res = generate_synthetic(spec, dir_);
  auto ds = Dataset::load(res.index);
  auto world = testing::World::load(dir_ / "world.gtf");
  for (std::size_t c = 0; c < spec.concepts; ++c) {
    const std::size_t planted = c % spec.levels();
    for (std::size_t l = 0; l < spec.levels(); ++l) {
      const double acc = testing::decode_accuracy(ds, world, l, c);
      if (l == planted) {
        EXPECT_GE(acc, 0.99) << "concept " << c << " level " << l;
      } else {
        EXPECT_LE(acc, 0.5) << "concept " << c << " level " << l;
      }
    }
  }
}

}  // namespace
}  // namespace mlground
