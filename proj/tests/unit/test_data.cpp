#include <filesystem>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "hiper/data.hpp"

using namespace hiper;

namespace {

std::vector<Attrs> all_attrs() {
  std::vector<Attrs> out;
  for (std::size_t s = 0; s < kShapes.size(); ++s)
    for (std::size_t c = 0; c < kColors.size(); ++c)
      for (std::size_t p = 0; p < kPositions.size(); ++p) out.push_back({s, c, p});
  return out;
}

}  // namespace

TEST(Captions, FollowGrammar) {
  EXPECT_EQ(caption_for(make_attrs("square", "red", "left")), "a red square left");
  EXPECT_EQ(caption_for(make_attrs("circle", "blue", "center"), 1), "a striped blue circle center");
  EXPECT_THROW(caption_for(make_attrs("circle", "blue", "center"), 5), ParameterError);
}

TEST(Captions, EveryCaptionTokenizes) {
  auto v = scene_vocab();
  EXPECT_EQ(v.size(), 21u);
  for (const auto& a : all_attrs())
    for (std::size_t tex = 0; tex < kHeldOutTexture; ++tex) {
      auto seq = tokenize(caption_for(a, tex), v, 16);
      EXPECT_EQ(seq.content_length(), tex == 0 ? 4u : 5u);
    }
}

TEST(Captions, UnknownWordsAreVocabularyErrors) {
  EXPECT_THROW(make_attrs("hexagon", "red", "left"), VocabularyError);
  EXPECT_THROW(make_attrs("square", "purple", "left"), VocabularyError);
  EXPECT_THROW(make_attrs("square", "red", "middle"), VocabularyError);
}

TEST(GenDataset, SameSeedSameBytes) {
  auto a = gen_dataset(50, 7, 32), b = gen_dataset(50, 7, 32);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(a.scenes[i].image, b.scenes[i].image);
    EXPECT_EQ(a.scenes[i].caption, b.scenes[i].caption);
  }
  auto c = gen_dataset(50, 8, 32);
  bool differs = false;
  for (std::size_t i = 0; i < 50; ++i) differs |= a.scenes[i].caption != c.scenes[i].caption;
  EXPECT_TRUE(differs);
}

TEST(GenDataset, CoversAllCombinationsAndOmitsHeldOutTexture) {
  auto ds = gen_dataset(2000, 0, 32);
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  std::size_t plain = 0;
  for (const auto& s : ds.scenes) {
    seen.insert({s.attrs.shape, s.attrs.color, s.attrs.position});
    EXPECT_NE(s.texture_id, kHeldOutTexture);
    EXPECT_EQ(s.caption, caption_for(s.attrs, s.texture_id));
    plain += s.texture_id == 0;
  }
  EXPECT_EQ(seen.size(), 120u);
  EXPECT_GT(plain, 900u);
  EXPECT_LT(plain, 1100u);
}

TEST(GenDataset, ParameterErrors) {
  EXPECT_THROW(gen_dataset(0, 0, 32), ParameterError);
  EXPECT_THROW(gen_dataset(5, 0, 30), ParameterError);
}

TEST(Render, PixelsOnTheByteGrid) {
  auto img = render_scene(make_attrs("triangle", "orange", "top"), 3, 32);
  for (double v : img.pixels) EXPECT_DOUBLE_EQ(v * 255.0, std::round(v * 255.0));
}

TEST(Classify, RecoversEveryRenderedCombination) {
  for (const auto& a : all_attrs())
    for (std::size_t tex = 0; tex < kTextureCount; ++tex) {
      auto c = classify(render_scene(a, tex, 32), 32);
      ASSERT_FALSE(c.abstain);
      EXPECT_EQ(c.attrs, a) << caption_for(a) << " texture " << tex;
      EXPECT_GT(c.confidence, 0.0);
    }
}

TEST(Classify, SelfConsistentOnGeneratedDataset) {
  auto ds = gen_dataset(500, 11, 32);
  for (const auto& s : ds.scenes) EXPECT_EQ(classify(s.image, 32).attrs, s.attrs) << s.caption;
}

TEST(Classify, UniformImagesAbstain) {
  EXPECT_TRUE(classify(Image(32, 32, 0.0), 32).abstain);
  EXPECT_TRUE(classify(Image(32, 32, 0.5), 32).abstain);
  EXPECT_TRUE(classify(Image(32, 32, 1.0), 32).abstain);
}

TEST(Classify, RobustToSmallNoise) {
  Rng rng(21);
  std::size_t ok = 0, n = 0;
  for (const auto& a : all_attrs())
    for (int rep = 0; rep < 2; ++rep) {
      auto img = render_scene(a, rep == 0 ? 0 : 2, 32);
      for (auto& v : img.pixels) v = std::clamp(v + 0.05 * rng.normal(), 0.0, 1.0);
      auto c = classify(img, 32);
      ok += !c.abstain && c.attrs == a;
      ++n;
    }
  EXPECT_GE(static_cast<double>(ok) / static_cast<double>(n), 0.99);
}

TEST(Classify, SizeMismatchIsDimensionError) {
  EXPECT_THROW(classify(Image(16, 16), 32), DimensionError);
}

TEST(Texture, RenderedTexturesMatchTheirPrototype) {
  for (const auto& a : all_attrs())
    for (std::size_t tex = 0; tex < kTextureCount; ++tex) {
      auto img = render_scene(a, tex, 32);
      EXPECT_LT(texture_distance(img, tex), 0.05) << caption_for(a) << " texture " << tex;
      EXPECT_EQ(nearest_texture(img), tex);
      for (std::size_t other = 0; other < kTextureCount; ++other)
        if (other != tex) {
          EXPECT_GT(texture_distance(img, other), 0.2);
        }
    }
}

TEST(Texture, CaptionedTexturesAreFarApart) {
  for (std::size_t a = 1; a < kHeldOutTexture; ++a) {
    auto img = render_scene(make_attrs("square", "white", "center"), a, 32);
    for (std::size_t b = 0; b < kHeldOutTexture; ++b)
      if (a != b) {
        EXPECT_GT(texture_distance(img, b), 0.5);
      }
  }
}

TEST(Texture, UniformImageIsMaximallyDistant) {
  for (std::size_t tex = 0; tex < kTextureCount; ++tex) EXPECT_EQ(texture_distance(Image(32, 32, 0.6), tex), 1.0);
  EXPECT_EQ(texture_distance(Image(32, 32, 0.0), 0), 1.0);
}

TEST(Texture, DistanceIsBounded) {
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    Image img(32, 32);
    for (auto& v : img.pixels) v = rng.uniform();
    for (std::size_t tex = 0; tex < kTextureCount; ++tex) {
      const double d = texture_distance(img, tex);
      EXPECT_GE(d, 0.0);
      EXPECT_LE(d, 1.0);
    }
  }
}

TEST(DatasetIo, WriteReadRoundTrip) {
  auto ds = gen_dataset(12, 3, 32);
  auto dir = std::filesystem::temp_directory_path() / "hiper_dataset_test";
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "scene_00011.ppm"));
  auto back = read_dataset(dir);
  ASSERT_EQ(back.scenes.size(), ds.scenes.size());
  EXPECT_EQ(back.vocab, ds.vocab);
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    EXPECT_EQ(back.scenes[i].image, ds.scenes[i].image);
    EXPECT_EQ(back.scenes[i].caption, ds.scenes[i].caption);
    EXPECT_EQ(back.scenes[i].attrs, ds.scenes[i].attrs);
    EXPECT_EQ(back.scenes[i].texture_id, ds.scenes[i].texture_id);
  }
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, MissingDirectoryIsIoError) {
  EXPECT_THROW(read_dataset("/nonexistent/hiper_dataset"), IoError);
}
