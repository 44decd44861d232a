#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dape/config.hpp"
#include "dape/errors.hpp"

using namespace dape;

TEST(Config, DefaultsValidateAndRoundTrip) {
  const DapeConfig c;
  EXPECT_NO_THROW(c.validate());
  const DapeConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, EveryFieldIsAddressable) {
  const auto j = to_json(DapeConfig{});
  for (const auto& [key, value] : j.items()) {
    nlohmann::json one;
    one[key] = value;
    EXPECT_NO_THROW(config_from_json(one)) << key;
  }
  EXPECT_EQ(j.size(), 38u);
}

TEST(Config, UnknownKeyIsAnError) {
  try {
    config_from_json({{"learning_rat", 0.1}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rat"), std::string::npos);
  }
  EXPECT_THROW(config_from_json({{"d", "wide"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"mask_mode", "bogus"}}), ConfigError);
}

TEST(Config, HashIsStableAndSensitive) {
  DapeConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.seed = 2;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Config, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    DapeConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](DapeConfig& c) { c.k0 = 1.5; });
  bad([](DapeConfig& c) { c.k_thr = -2.0; });
  bad([](DapeConfig& c) { c.segments = 5; });
  bad([](DapeConfig& c) { c.mu = {0.2, 0.3, 0.4}; });
  bad([](DapeConfig& c) { c.phi_period = 0; });
  bad([](DapeConfig& c) { c.temperature = 0.0; });
  bad([](DapeConfig& c) { c.batch_size = 1; });
  bad([](DapeConfig& c) {
    c.nfa_merge = NfaMerge::kPoolAdd;
    c.nfa_grid_y = 4;
  });
}

TEST(Config, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "dape_cfg_test.json";
  std::ofstream(path) << R"({"d": 16, "segments": 4, "mask_mode": "pre-softmax", "grid": [4, 4]})";
  const auto c = load_config(path.string());
  EXPECT_EQ(c.d, 16u);
  EXPECT_EQ(c.mask_mode, MaskMode::kPreSoftmax);
  EXPECT_EQ(c.grid_y, 4u);
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path.string()), FileError);
}
