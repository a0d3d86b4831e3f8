#include "road/config.hpp"
#include "road/errors.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <fstream>

using namespace road;
namespace fs = std::filesystem;

TEST(ParseGrid, AsciiForms) {
  EXPECT_EQ(parse_grid("3x3"), std::make_pair(3, 3));
  EXPECT_EQ(parse_grid("2x1"), std::make_pair(2, 1));
  EXPECT_EQ(parse_grid("12x7"), std::make_pair(12, 7));
}

TEST(ParseGrid, RejectsEverythingElse) {
  for (const char* bad : {"3×3", "3X3", "3*3", "3", "x3", "3x", "0x2", "2x0", "-1x2", "3x3x3", " 3x3", "3x 3", "ax3", ""}) {
    EXPECT_THROW(parse_grid(bad), ConfigError) << bad;
  }
}

TEST(ParseSeeds, CountAndList) {
  EXPECT_EQ(parse_seeds("5"), (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(parse_seeds("3,7,9"), (std::vector<std::uint64_t>{3, 7, 9}));
  EXPECT_EQ(parse_seeds("4,"), (std::vector<std::uint64_t>{4}));
  EXPECT_THROW(parse_seeds("0"), ConfigError);
  EXPECT_THROW(parse_seeds("two"), ConfigError);
  EXPECT_THROW(parse_seeds("1,x"), ConfigError);
}

TEST(Ini, AppliesSectionsAndComments) {
  RunConfig c;
  apply_ini(c,
            "# a comment\n"
            "[scene]\nheight = 64 ; trailing\nwidth=64\ncolor_shift = 1, 2.5, -3\n"
            "[dataset]\nsource_train = 7\n"
            "[model]\nwidths = 4,6,8\n"
            "[train]\nvariant = spt\ngrid = 2x1\nlambda1 = 0.5\niterations = 33\n"
            "[ablate]\nseeds = 4\njobs = 2\n");
  EXPECT_EQ(c.scene.height, 64);
  EXPECT_EQ(c.scene.width, 64);
  EXPECT_EQ(c.scene.gap.color_shift[1], 2.5);
  EXPECT_EQ(c.scene.gap.color_shift[2], -3.0);
  EXPECT_EQ(c.source_train, 7);
  EXPECT_EQ(c.train.backbone.widths, (std::vector<int>{4, 6, 8}));
  EXPECT_EQ(c.pretrain.backbone.widths, (std::vector<int>{4, 6, 8}));
  EXPECT_EQ(c.train.variant, Variant::Spt);
  EXPECT_EQ(c.train.grid_h, 2);
  EXPECT_EQ(c.train.grid_w, 1);
  EXPECT_EQ(c.train.lambda_dist, 0.5);
  EXPECT_EQ(c.train.iterations, 33);
  EXPECT_EQ(c.seeds.size(), 4u);
  EXPECT_EQ(c.jobs, 2);
}

TEST(Ini, ErrorsNameTheLine) {
  RunConfig c;
  auto message = [&](const std::string& text) {
    try {
      apply_ini(c, text, "f.ini");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("[train]\nbogus = 1\n").find("f.ini:2"), std::string::npos);
  EXPECT_NE(message("[nowhere]\nx = 1\n").find("nowhere"), std::string::npos);
  EXPECT_NE(message("height = 3\n").find("outside any section"), std::string::npos);
  EXPECT_NE(message("[train]\niterations = 1.5\n").find("f.ini:2"), std::string::npos);
  EXPECT_NE(message("[train]\ngrid = 3×3\n").find("ASCII"), std::string::npos);
  EXPECT_NE(message("[train\n").find("section header"), std::string::npos);
  EXPECT_NE(message("[train]\njust words\n").find("key = value"), std::string::npos);
  EXPECT_NE(message("[scene]\ncolor_shift = 1,2\n").find("three"), std::string::npos);
}

TEST(Ini, ResolvedConfigRoundTrips) {
  RunConfig c;
  c.scene.gap.texture_amplitude = 0.1;
  c.train.variant = Variant::FrozenK;
  c.train.frozen_k = 1;
  c.train.lambda_spt = 1.0 / 3.0;
  c.train.grid_h = 2;
  c.train.backbone.dilations = {1, 2, 4};
  c.pretrain.backbone = c.train.backbone;
  c.pretrain.lr = 0.003;
  c.seeds = {5};

  RunConfig back;
  apply_ini(back, to_ini(c));
  EXPECT_EQ(to_ini(back), to_ini(c));
  EXPECT_EQ(back.train.hash(), c.train.hash());
  EXPECT_EQ(back.train.lambda_spt, c.train.lambda_spt);
  EXPECT_EQ(back.seeds, c.seeds);
  EXPECT_EQ(back.scene.gap.texture_amplitude, 0.1);
}

TEST(Ini, DefaultsRoundTrip) {
  RunConfig back;
  back.train.iterations = 1;
  apply_ini(back, to_ini(RunConfig{}));
  EXPECT_EQ(back.train.hash(), RunConfig{}.train.hash());
}

TEST(ResolvedConfig, WrittenWithCodeVersion) {
  const fs::path dir = fs::temp_directory_path() / ("road_config_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  RunConfig c;
  c.train.seed = 42;
  write_resolved_config(c, dir / "run");
  const RunConfig back = load_run_config(dir / "run" / "resolved.ini");
  EXPECT_EQ(back.train.seed, 42u);
  std::ifstream in(dir / "run" / "resolved.ini");
  std::string first;
  std::getline(in, first);
  EXPECT_NE(first.find(kCodeVersion), std::string::npos);
  EXPECT_THROW(load_run_config(dir / "missing.ini"), ConfigError);
  fs::remove_all(dir);
}
