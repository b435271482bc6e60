#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "splitnas/metrics.hpp"
#include "test_support.hpp"

using namespace splitnas;

TEST_CASE("accuracy fraction", "[metrics]") {
  std::vector<int> truth = {0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
  std::vector<int> pred = truth;
  REQUIRE(accuracy(pred, truth) == 1.0);
  pred[4] = 9;
  REQUIRE_THAT(accuracy(pred, truth), Catch::Matchers::WithinAbs(0.9, 1e-12));
  for (auto& p : pred) p = -1;
  REQUIRE(accuracy(pred, truth) == 0.0);
  REQUIRE_THROWS_AS(accuracy({}, {}), UsageError);
  REQUIRE_THROWS_AS(accuracy({1, 2}, {1}), UsageError);
}

TEST_CASE("ssim self-similarity, symmetry and the constant-image closed form", "[metrics]") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    Tensor<double> x = testsup::rand_tensor<double>({1, 1, 16, 16}, seed, 0.0, 1.0);
    REQUIRE_THAT(ssim(x, x), Catch::Matchers::WithinAbs(1.0, 1e-6));
    Tensor<double> y = testsup::rand_tensor<double>({1, 1, 16, 16}, seed + 100, 0.0, 1.0);
    REQUIRE_THAT(ssim(x, y), Catch::Matchers::WithinAbs(ssim(y, x), 1e-9));
  }
  // constant images a=1, b=0 with L=1: luminance term (2ab+C1)/(a^2+b^2+C1)
  // = 1e-4/1.0001, contrast/structure term exactly 1
  Tensor<double> a({1, 1, 12, 12}, 1.0);
  Tensor<double> b({1, 1, 12, 12}, 0.0);
  REQUIRE_THAT(ssim(a, b), Catch::Matchers::WithinAbs(1e-4 / 1.0001, 1e-6));

  Tensor<double> small({1, 1, 4, 4}, 0.5);
  REQUIRE_THROWS_AS(ssim(small, small), DimensionError);  // window larger than image
  SsimParams bad;
  bad.window = 4;
  REQUIRE_THROWS_AS(ssim(a, a, bad), ConfigError);
}

TEST_CASE("privacy p0 normalized reconstruction quality", "[metrics]") {
  REQUIRE(privacy_p0(0.0, 2.0) == 1.0);
  REQUIRE(privacy_p0(2.0, 2.0) == 0.0);
  REQUIRE_THAT(privacy_p0(1.0, 2.0), Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE(privacy_p0(5.0, 2.0) == 0.0);  // worse than blind: clamped
  REQUIRE_THROWS_AS(privacy_p0(1.0, 0.0), DataError);
}

TEST_CASE("reward reproduces the published table rows", "[metrics]") {
  // rows from the RL/grid result tables; printed rewards match Eq. 12
  struct Row {
    double a, a_base, p, s, r;
  };
  const Row rows[] = {
      {0.9108, 0.9241, 0.4106, 0.6808, 0.5218},  // VGG11 reactive
      {0.8298, 0.9423, 0.3867, 0.9999, 0.5401},  // VGG13 reactive
      {0.9213, 0.9397, 0.4049, 0.7369, 0.5430},  // VGG16 reactive
      {0.8657, 0.8679, 0.3803, 0.9455, 0.6163},  // AlexNet reactive
      {0.7502, 0.7522, 0.5300, 0.9537, 0.4678},  // LeNet reactive
      {0.8524, 0.8679, 0.3803, 0.9099, 0.6037},  // AlexNet (S2)
      {0.6051, 0.7522, 0.3806, 0.8356, 0.4848},  // LeNet (S2)
      {0.8425, 0.8679, 0.3855, 0.9587, 0.5955},  // AlexNet grid
      {0.8950, 0.9241, 0.5300, 0.7950, 0.4361},  // VGG11 grid
  };
  for (const auto& row : rows) {
    RewardParts parts = reward(row.a, row.a_base, row.p, row.s);
    INFO("A=" << row.a << " P=" << row.p << " S=" << row.s);
    REQUIRE_THAT(parts.r, Catch::Matchers::WithinAbs(row.r, 5e-4));
    REQUIRE_THAT(parts.r_a * parts.r_p * parts.r_s, Catch::Matchers::WithinAbs(parts.r, 0.0));
  }
}

TEST_CASE("reward boundary cases and errors", "[metrics]") {
  REQUIRE(reward(0.9, 0.9, 1.0, 0.5).r == 0.0);      // P=1 kills the reward
  REQUIRE(reward(0.9, 0.9, 0.0, 1.0).r == 1.0);      // A=A_base, P=0, S=1
  REQUIRE_THROWS_AS(reward(0.9, 0.0, 0.5, 0.5), ConfigError);
  REQUIRE_THROWS_AS(reward(0.9, 0.9, 1.5, 0.5), UsageError);
  REQUIRE(reward(1.0, 0.8, 0.0, 1.0).r_a > 1.0);     // R_A may exceed 1
}

TEST_CASE("reward monotonicity and R_S concavity", "[metrics]") {
  // monotone: up in A and S (S<1), down in P
  double base = reward(0.8, 0.9, 0.4, 0.7).r;
  REQUIRE(reward(0.85, 0.9, 0.4, 0.7).r > base);
  REQUIRE(reward(0.8, 0.9, 0.5, 0.7).r < base);
  REQUIRE(reward(0.8, 0.9, 0.4, 0.8).r > base);
  // concavity of S(2-S): above the chord between endpoints on a grid
  for (int i = 1; i < 20; ++i) {
    double s_point = i / 20.0;
    double r_s = s_point * (2.0 - s_point);
    double chord = s_point;  // line from (0,0) to (1,1)
    REQUIRE(r_s >= chord - 1e-12);
  }
}

TEST_CASE("metrics csv row shape", "[metrics]") {
  MetricsReport m;
  m.a = 0.91;
  m.a_base = 0.92;
  m.p = 0.41;
  m.s = 0.68;
  m.cr = 0.1;
  m.fill_reward();
  std::string row = metrics_csv_row(m, "run1", 3, "P:23 18:C2", 1.5);
  REQUIRE(row.substr(0, 5) == "run1,");
  size_t commas = 0;
  for (char c : row)
    if (c == ',') ++commas;
  // run_id,episode,strategy,A,A_base,P_variant,P,S_variant,S,CR,R_A,R_P,R_S,R,wall_seconds
  REQUIRE(commas == 14);
  size_t header_commas = 0;
  for (char c : metrics_csv_header())
    if (c == ',') ++header_commas;
  REQUIRE(header_commas == commas);
}
