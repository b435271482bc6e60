#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "splitnas/compress.hpp"
#include "splitnas/cost.hpp"
#include "splitnas/model.hpp"
#include "splitnas/strategy.hpp"
#include "test_support.hpp"

using namespace splitnas;

// Zoo manifest, hand-propagated and hand-counted.
struct ZooEntry {
  const char* name;
  int layers;
  int64_t params;
  int64_t macs;
  int classes;
};
static const ZooEntry kZoo[] = {
    {"tiny-mlp", 4, 8356, 8320, 4},
    // conv5x5(1->6,p2): 156, conv5x5(6->16): 2416, fc64->32: 2080, fc32->4: 132
    {"tiny-lenet", 10, 4784, 78976, 4},
    // convs 80+1168+2320+2320+4640+9248, bn 32, fc 132
    {"tiny-vgg", 19, 19940, 387200, 4},
};

TEST_CASE("zoo models match the hand-computed manifest", "[model]") {
  for (const auto& z : kZoo) {
    std::mt19937_64 rng(1);
    auto g = build_model<float>(z.name, rng);
    INFO(z.name);
    REQUIRE(g.layer_count() == z.layers);
    REQUIRE(count_params(g) == z.params);
    REQUIRE(count_macs(g) == z.macs);
    REQUIRE(g.out_shapes.back() == Shape{z.classes});
    // shape propagation is total: a built graph evaluates on a conforming batch
    Tensor<float> x = testsup::rand_tensor<float>({3, 1, 16, 16}, 5);
    Tensor<float> y = forward_eval(g, x);
    REQUIRE(y.shape() == Shape{3, z.classes});
    REQUIRE(y.all_finite());
  }
  std::mt19937_64 rng(1);
  REQUIRE_THROWS_AS(build_model<float>("resnet-50", rng), ConfigError);
}

TEST_CASE("build rejects empty and inconsistent models", "[model]") {
  std::mt19937_64 rng(2);
  REQUIRE_THROWS_AS(make_graph<float>({1, 16, 16}, {}, {}, rng), ConfigError);
  {
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::conv<float>(3, 2, 4, 1, 1));  // expects 2 channels, input has 1
    REQUIRE_THROWS_AS(make_graph<float>({1, 16, 16}, std::move(ls), {}, rng), ConfigError);
  }
  {
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::fc<float>(100, 10));  // fc on unflattened input
    REQUIRE_THROWS_AS(make_graph<float>({1, 16, 16}, std::move(ls), {}, rng), ConfigError);
  }
}

TEST_CASE("parameter and mac counting formulas", "[model]") {
  std::mt19937_64 rng(3);
  {
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::conv<float>(3, 1, 8, 1, 1));
    auto g = make_graph<float>({1, 8, 8}, std::move(ls), {}, rng);
    REQUIRE(count_params(g) == 80);  // 3*3*1*8 + 8
  }
  {
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::flatten<float>());
    ls.push_back(layer::fc<float>(120, 84));
    auto g = make_graph<float>({120, 1, 1}, std::move(ls), {}, rng);
    REQUIRE(count_params(g) == 10164);  // 120*84 + 84
    REQUIRE(count_macs(g) == 10080);    // 120*84
  }
  {
    // MACs_conv = K*K*Cin*Cout*Hout*Wout = 3*3*16*32*8*8
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::conv<float>(3, 16, 32, 1, 1));
    auto g = make_graph<float>({16, 8, 8}, std::move(ls), {}, rng);
    REQUIRE(count_macs(g) == 294912);
  }
}

TEST_CASE("perf indicators at the partition boundaries", "[model]") {
  std::mt19937_64 rng(4);
  auto g = build_model<float>("tiny-lenet", rng);
  g.partition = 0;
  auto s0 = perf_indicators(g);
  REQUIRE(s0.s1 == 1.0);
  REQUIRE(s0.s2 == 1.0);
  g.partition = g.layer_count();
  auto sl = perf_indicators(g);
  REQUIRE(sl.s1 == 0.0);
  REQUIRE(sl.s2 == 0.0);

  // S1 = 1 - 100/1000 = 0.9 on a model with exactly those counts (bias-free fcs)
  ModelGraph<float> m;
  m.input_shape = {10, 1, 1};
  m.layers.push_back(layer::flatten<float>());
  auto f1 = layer::fc<float>(10, 10);
  f1.weight = Tensor<float>({10, 10}, 0.1f, true);
  auto f2 = layer::fc<float>(10, 90);
  f2.weight = Tensor<float>({90, 10}, 0.1f, true);
  m.layers.push_back(f1);
  m.layers.push_back(f2);
  validate(m);
  m.partition = 2;  // flatten + first fc stay on the device
  REQUIRE(count_params(m, 0, 2) == 100);
  REQUIRE(count_params(m) == 1000);
  REQUIRE_THAT(perf_indicators(m).s1, Catch::Matchers::WithinAbs(0.9, 1e-15));

  ModelGraph<float> degenerate;
  degenerate.input_shape = {1, 4, 4};
  degenerate.layers.push_back(layer::relu<float>());
  validate(degenerate);
  REQUIRE_THROWS_AS(perf_indicators(degenerate), ConfigError);
}

TEST_CASE("S1 is non-increasing in the partition index", "[model]") {
  std::mt19937_64 rng(5);
  auto g = build_model<float>("tiny-vgg", rng);
  double prev = 1.0;
  for (int p : legal_partitions(g)) {
    g.partition = p;
    double s1 = perf_indicators(g).s1;
    REQUIRE(s1 <= prev + 1e-12);
    prev = s1;
  }
}

TEST_CASE("count_params splits exactly at every partition", "[model]") {
  std::mt19937_64 rng(6);
  for (const char* name : {"tiny-mlp", "tiny-lenet", "tiny-vgg"}) {
    auto g = build_model<float>(name, rng);
    for (int p = 0; p <= g.layer_count(); ++p)
      REQUIRE(count_params(g) == count_params(g, 0, p) + count_params(g, p, g.layer_count()));
  }
}

TEST_CASE("compression ratio formula", "[model]") {
  std::mt19937_64 rng(7);
  auto base = build_model<float>("tiny-lenet", rng);
  REQUIRE(compression_ratio(base, base) == 0.0);
  // 1000 -> 800 params: fc(9->100)+bias=1000 vs fc(9->80)+bias=800
  std::vector<LayerSpec<float>> a, b;
  a.push_back(layer::flatten<float>());
  a.push_back(layer::fc<float>(9, 100));
  b.push_back(layer::flatten<float>());
  b.push_back(layer::fc<float>(9, 80));
  auto ga = make_graph<float>({9, 1, 1}, std::move(a), {}, rng);
  auto gb = make_graph<float>({9, 1, 1}, std::move(b), {}, rng);
  REQUIRE(count_params(ga) == 1000);
  REQUIRE(count_params(gb) == 800);
  REQUIRE_THAT(compression_ratio(ga, gb), Catch::Matchers::WithinAbs(0.2, 1e-12));
}

TEST_CASE("partition split composes bit-identically", "[model]") {
  std::mt19937_64 rng(8);
  auto g = build_model<float>("tiny-lenet", rng);
  Tensor<float> x = testsup::rand_tensor<float>({4, 1, 16, 16}, 9);
  Tensor<float> full = forward_eval(g, x);

  g.partition = 0;
  {
    auto [enc, cloud] = partition_split(g);
    REQUIRE(enc.layer_count() == 0);
    Tensor<float> feat = forward_eval(enc, x);  // empty encoder: identity over raw input
    REQUIRE(feat.v() == x.v());
    Tensor<float> out = forward_eval(cloud, feat);
    REQUIRE(std::memcmp(out.v().data(), full.v().data(), full.v().size() * sizeof(float)) == 0);
  }
  g.partition = g.layer_count();
  {
    auto [enc, cloud] = partition_split(g);
    REQUIRE(cloud.layer_count() == 0);
    Tensor<float> feat = forward_eval(enc, x);
    Tensor<float> out = forward_eval(cloud, feat);  // empty cloud: identity
    REQUIRE(std::memcmp(out.v().data(), full.v().data(), full.v().size() * sizeof(float)) == 0);
  }
  // every legal partition of every zoo model, bit-identical composition
  for (const char* name : {"tiny-mlp", "tiny-lenet", "tiny-vgg"}) {
    auto m = build_model<float>(name, rng);
    Tensor<float> x2 = testsup::rand_tensor<float>({2, 1, 16, 16}, 10);
    Tensor<float> ref = forward_eval(m, x2);
    for (int p : legal_partitions(m)) {
      m.partition = p;
      auto [enc, cloud] = partition_split(m);
      Tensor<float> out = forward_eval(cloud, forward_eval(enc, x2));
      REQUIRE(std::memcmp(out.v().data(), ref.v().data(), ref.v().size() * sizeof(float)) == 0);
    }
  }
}

TEST_CASE("residual links restrict legal partitions", "[model]") {
  std::mt19937_64 rng(11);
  auto g = build_model<float>("tiny-vgg", rng);
  auto legal = legal_partitions(g);
  // link source 6, add at 10: boundaries 8..10 would cut it
  for (int p : {8, 9, 10}) REQUIRE_FALSE(partition_is_legal(g, p));
  for (int p : {0, 1, 7, 11, 19}) REQUIRE(partition_is_legal(g, p));
  REQUIRE(legal.size() == 17);
  g.partition = 9;
  REQUIRE_THROWS_AS(partition_split(g), StructureError);
}

TEST_CASE("attached in-place ops follow their compute unit", "[model]") {
  std::mt19937_64 rng(12);
  auto g = build_model<float>("tiny-vgg", rng);
  // conv0 is followed by batchnorm(1) and relu(2)
  REQUIRE(g.layers[0].attached_inplace == std::vector<int>{1, 2});
  // fc at the end has nothing after it
  REQUIRE(g.layers[18].attached_inplace.empty());
}

TEST_CASE("strategy codec round trip and canonical form", "[model]") {
  Strategy s = parse_strategy("P:23 22:C1 18:C2");
  REQUIRE(s.partition == 23);
  REQUIRE(s.compressions.at(18) == Technique::C2);
  REQUIRE(s.compressions.at(22) == Technique::C1);
  REQUIRE(to_string(s) == "P:23 18:C2 22:C1");  // canonical: sorted by index
  REQUIRE(parse_strategy(to_string(s)) == s);

  Strategy none = parse_strategy("P:5");
  REQUIRE(none.compressions.empty());
  REQUIRE(to_string(none) == "P:5");

  REQUIRE_THROWS_AS(parse_strategy("5:X9 P:3"), ParseError);
  REQUIRE_THROWS_AS(parse_strategy("3:W1"), ParseError);       // missing partition
  REQUIRE_THROWS_AS(parse_strategy("P:3 P:4"), ParseError);    // duplicate partition
  REQUIRE_THROWS_AS(parse_strategy("P:3 2:W1 2:W2"), ParseError);
  REQUIRE_THROWS_AS(parse_strategy("P:-1"), ParseError);
}

TEST_CASE("graph-validating strategy parse", "[model]") {
  std::mt19937_64 rng(13);
  auto g = build_model<float>("tiny-lenet", rng);
  REQUIRE_NOTHROW(parse_strategy("P:6 0:W1 3:C1", g));
  REQUIRE_THROWS_AS(parse_strategy("P:6 99:W1", g), ParseError);   // out of range
  REQUIRE_THROWS_AS(parse_strategy("P:6 1:W1", g), ParseError);    // relu: not compressible
  REQUIRE_THROWS_AS(parse_strategy("P:6 0:F1", g), ParseError);    // F1 on a conv layer
  REQUIRE_THROWS_AS(parse_strategy("P:3 3:C1", g), ParseError);    // at/after the partition
  REQUIRE_THROWS_AS(parse_strategy("P:99", g), ParseError);
}

TEST_CASE("strategy codec round trip over random valid strategies", "[model]") {
  std::mt19937_64 rng(14);
  auto g = build_model<float>("tiny-vgg", rng);
  auto mask = applicability_mask(g);
  auto legal = legal_partitions(g);
  std::mt19937_64 pick(15);
  for (int it = 0; it < 200; ++it) {
    Strategy s;
    s.partition = legal[pick() % legal.size()];
    for (int i = 0; i < g.layer_count() && i < s.partition; ++i) {
      if (pick() % 3 != 0) continue;
      std::vector<Technique> options;
      for (size_t t = 0; t < kAllTechniques.size(); ++t)
        if (mask[static_cast<size_t>(i)][t] && kAllTechniques[t] != Technique::F3)
          options.push_back(kAllTechniques[t]);
      if (options.empty()) continue;
      s.compressions[i] = options[pick() % options.size()];
    }
    Strategy back = parse_strategy(to_string(s), g);
    REQUIRE(back == s);
  }
}

TEST_CASE("deterministic build: same seed, same parameters", "[model]") {
  std::mt19937_64 r1(77), r2(77);
  auto a = build_model<float>("tiny-vgg", r1);
  auto b = build_model<float>("tiny-vgg", r2);
  REQUIRE(params_fingerprint(a) == params_fingerprint(b));
}
