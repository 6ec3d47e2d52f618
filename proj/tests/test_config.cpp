#include <gtest/gtest.h>

#include <sstream>

#include "mfsurro/config.hpp"
#include "mfsurro/plot.hpp"

using namespace mfsurro;

TEST(Config, SettingsRoundTrip) {
  ExperimentConfig c;
  apply_settings(c, {{"sweep.modes", "dmfm,sfm"},
                     {"sweep.hf_counts", "5,10"},
                     {"sweep.seeds", "3"},
                     {"train.epochs", "7"},
                     {"train.precision", "f64"},
                     {"unet.base_width", "8"},
                     {"ranger.lookahead_k", "4"}});
  EXPECT_EQ(c.modes, (std::vector<Mode>{Mode::dmfm, Mode::sfm}));
  EXPECT_EQ(c.hf_counts, (std::vector<std::size_t>{5, 10}));
  EXPECT_EQ(c.pretrain_epochs, 7);
  EXPECT_EQ(c.finetune_epochs, 7);
  EXPECT_EQ(c.precision, Precision::f64);
  ExperimentConfig d;
  apply_settings(d, config_to_settings(c));
  EXPECT_EQ(config_to_settings(d), config_to_settings(c));
}

TEST(Config, LaterSettingsWin) {
  ExperimentConfig c;
  apply_setting(c, "train.epochs", "9");
  apply_setting(c, "train.finetune_epochs", "2");
  EXPECT_EQ(c.pretrain_epochs, 9);
  EXPECT_EQ(c.finetune_epochs, 2);
}

TEST(Config, Errors) {
  ExperimentConfig c;
  EXPECT_THROW(apply_setting(c, "train.epoch", "3"), ConfigError);
  EXPECT_THROW(apply_setting(c, "train.epochs", "three"), ConfigError);
  EXPECT_THROW(apply_setting(c, "sweep.modes", "dmfm,bogus"), ConfigError);
  EXPECT_THROW(apply_setting(c, "train.precision", "f16"), ConfigError);
  std::istringstream bad("gen.lf = 3\nnot a pair\n");
  EXPECT_THROW(parse_key_values(bad, "bad.cfg"), ConfigError);
  std::istringstream ok("# comment\n gen.lf = 3 # trailing\n\n");
  EXPECT_EQ(parse_key_values(ok, "ok.cfg").at("gen.lf"), "3");
}

TEST(Plot, PpmEncoding) {
  Image img(3, 2, {1, 2, 3});
  img.set(2, 1, {9, 8, 7});
  const auto bytes = encode_ppm(img);
  const std::string header = "P6\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 18);
  EXPECT_TRUE(std::equal(header.begin(), header.end(), bytes.begin()));
  EXPECT_EQ(bytes[header.size()], 1);
  EXPECT_EQ(bytes.back(), 7);
}

TEST(Plot, FieldOrientationAndColormap) {
  ScalarField f(GridSpec(4, 0.1), 0.0);
  f.at(0, 0) = 1.0;  // bottom-left cell
  const Image img = render_field(f, 0.0, 1.0, 2);
  EXPECT_EQ(img.height, 8);
  EXPECT_GT(img.width, 8);
  EXPECT_EQ(img.get(0, 7), kViridis[255]);
  EXPECT_EQ(img.get(0, 0), kViridis[0]);
  EXPECT_EQ(colormap(5.0, 0.0, 1.0), kViridis[255]);
  EXPECT_EQ(colormap(0.5, 1.0, 1.0), kViridis[0]);
}

TEST(Plot, LinePlot) {
  PlotSeries s{"SFM", kSeriesColors[0], {{10, 3.0}, {100, 1.0}}};
  const Image img = render_line_plot({s});
  EXPECT_EQ(img.width, 640);
  EXPECT_EQ(img.height, 480);
  bool has_series_color = false;
  for (int y = 0; y < img.height && !has_series_color; ++y)
    for (int x = 0; x < img.width; ++x)
      if (img.get(x, y) == kSeriesColors[0]) {
        has_series_color = true;
        break;
      }
  EXPECT_TRUE(has_series_color);
}
