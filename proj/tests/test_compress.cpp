#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "splitnas/compress.hpp"
#include "test_support.hpp"

using namespace splitnas;

namespace {

ModelGraph<float> single_conv(int k, int cin, int cout, int stride, int pad, uint64_t seed,
                              int h = 8, int w = 8) {
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec<float>> ls;
  ls.push_back(layer::conv<float>(k, cin, cout, stride, pad));
  return make_graph<float>({cin, h, w}, std::move(ls), {}, rng);
}

}  // namespace

TEST_CASE("F1 full rank reproduces the original function", "[compress]") {
  std::mt19937_64 rng(1);
  auto g = build_model<float>("tiny-mlp", rng);
  Tensor<float> x = testsup::rand_tensor<float>({4, 1, 16, 16}, 2, 0.f, 1.f);
  Tensor<float> ref = forward_eval(g, x);
  auto g2 = apply_f1_svd(g, 1, 32);  // fc 256->32, full rank
  REQUIRE(g2.layer_count() == g.layer_count() + 1);
  Tensor<float> out = forward_eval(g2, x);
  for (size_t i = 0; i < ref.v().size(); ++i)
    REQUIRE_THAT(out.v()[i], Catch::Matchers::WithinAbs(ref.v()[i], 1e-4));
}

TEST_CASE("F1 rank-1 factorization of a rank-1 weight is exact", "[compress]") {
  std::mt19937_64 rng(3);
  std::vector<LayerSpec<float>> ls;
  ls.push_back(layer::flatten<float>());
  ls.push_back(layer::fc<float>(6, 5));
  auto g = make_graph<float>({6, 1, 1}, std::move(ls), {}, rng);
  // W = u v^T
  Tensor<float> u = testsup::rand_tensor<float>({5}, 4);
  Tensor<float> v = testsup::rand_tensor<float>({6}, 5);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 6; ++c)
      g.layers[1].weight.v()[static_cast<size_t>(r * 6 + c)] =
          u.v()[static_cast<size_t>(r)] * v.v()[static_cast<size_t>(c)];
  Tensor<float> x = testsup::rand_tensor<float>({3, 6, 1, 1}, 6);
  Tensor<float> ref = forward_eval(g, x);
  auto g2 = apply_f1_svd(g, 1, 1);
  Tensor<float> out = forward_eval(g2, x);
  for (size_t i = 0; i < ref.v().size(); ++i)
    REQUIRE_THAT(out.v()[i], Catch::Matchers::WithinAbs(ref.v()[i], 1e-5));
}

TEST_CASE("F1 factor arithmetic and rank validation", "[compress]") {
  std::mt19937_64 rng(7);
  std::vector<LayerSpec<float>> ls;
  ls.push_back(layer::flatten<float>());
  auto f = layer::fc<float>(100, 100);
  f.weight = testsup::rand_tensor<float>({100, 100}, 8, -1.f, 1.f, true);  // bias-free
  ls.push_back(f);
  ModelGraph<float> g;
  g.input_shape = {100, 1, 1};
  g.layers = std::move(ls);
  validate(g);
  REQUIRE(count_params(g) == 10000);
  RewriteReport rep;
  auto g2 = apply_f1_svd(g, 1, 10, &rep);
  REQUIRE(count_params(g2) == 2000);  // 10*(100+100)
  REQUIRE(rep.params_before == 10000);
  REQUIRE(rep.params_after == 2000);
  REQUIRE_THROWS_AS(apply_f1_svd(g, 1, 0), ConfigError);
  REQUIRE_THROWS_AS(apply_f1_svd(g, 1, 101), ConfigError);
  REQUIRE_THROWS_AS(apply_f1_svd(g, 0, 1), StructureError);  // flatten target
}

TEST_CASE("F2 reduces to F1 at zero sparsity and counts structural zeros", "[compress]") {
  std::mt19937_64 rng(9);
  auto g = build_model<float>("tiny-mlp", rng);
  auto a = apply_f1_svd(g, 1, 8);
  auto b = apply_f2_ksvd(g, 1, 8, 0.0);
  REQUIRE(params_fingerprint(a) == params_fingerprint(b));

  auto c = apply_f2_ksvd(g, 1, 8, 0.5);
  // effective params = k(m+n)*(1-sparsity) within rounding, plus the kept bias
  int64_t w1 = 8 * 256, w2 = 32 * 8;
  int64_t expect = (w1 - w1 / 2) + (w2 - w2 / 2) + 32;
  REQUIRE(count_params(c, 1, 3) == expect);
  REQUIRE_THROWS_AS(apply_f2_ksvd(g, 1, 8, 1.0), ConfigError);
}

TEST_CASE("F3 replaces the trailing fc stack with gap + classifier", "[compress]") {
  std::mt19937_64 rng(11);
  auto g = build_model<float>("tiny-lenet", rng);
  g.partition = g.layer_count();  // fc stack must be device-resident
  RewriteReport rep;
  auto g2 = apply_f3_gap(g, 7, rng, &rep);
  // pool(gap) + flatten + fc(16 -> 4): channels * classes + classes
  REQUIRE(g2.layer_count() == 9);
  REQUIRE(count_params(g2, 6, 9) == 16 * 4 + 4);
  REQUIRE(g2.partition == g2.layer_count());
  Tensor<float> x = testsup::rand_tensor<float>({2, 1, 16, 16}, 12);
  REQUIRE(forward_eval(g2, x).shape() == Shape{2, 4});

  REQUIRE_THROWS_AS(apply_f3_gap(g, 0, rng), StructureError);  // conv target
  auto mlp = build_model<float>("tiny-mlp", rng);
  mlp.partition = mlp.layer_count();
  // tiny-mlp's first fc sits on the raw (spatial) image: applicable
  REQUIRE(f3_applicable(mlp, 1));
  auto mlp2 = apply_f3_gap(mlp, 1, rng);
  REQUIRE(count_params(mlp2) == 1 * 4 + 4);
}

TEST_CASE("C1 depthwise separable factorization", "[compress]") {
  auto g = single_conv(3, 16, 32, 1, 1, 13);
  REQUIRE(count_params(g) == 3 * 3 * 16 * 32 + 32);
  std::mt19937_64 rng(14);
  auto g2 = apply_c1_depthwise(g, 0, rng);
  REQUIRE(g2.layer_count() == 2);
  REQUIRE(count_params(g2) == (144 + 16) + (512 + 32));
  REQUIRE(g2.out_shapes.back() == g.out_shapes.back());
  // MACs: 9*16*8*8 depthwise + 16*32*8*8 pointwise (grouped conv divides Cin)
  REQUIRE(count_macs(g2) == 9 * 16 * 64 + 16 * 32 * 64);

  auto one = single_conv(1, 8, 8, 1, 0, 15);
  REQUIRE_THROWS_AS(apply_c1_depthwise(one, 0, rng), ConfigError);
}

TEST_CASE("C2 inverted residual adds a skip exactly when shapes match", "[compress]") {
  std::mt19937_64 rng(16);
  {
    auto g = single_conv(3, 8, 8, 1, 1, 17);  // shape-preserving
    auto g2 = apply_c2_inverted_residual(g, 0, 2, rng);
    REQUIRE(g2.layer_count() == 4);
    REQUIRE(g2.layers[3].kind == LayerKind::residual_add);
    REQUIRE(g2.links.at(3) == -1);  // source is the graph input
    // params: 8*16+16 expand, 9*16+16 depthwise, 16*8+8 project
    REQUIRE(count_params(g2) == (128 + 16) + (144 + 16) + (128 + 8));
    Tensor<float> x = testsup::rand_tensor<float>({2, 8, 8, 8}, 18);
    REQUIRE(forward_eval(g2, x).shape() == Shape{2, 8, 8, 8});
  }
  {
    auto g = single_conv(3, 8, 12, 1, 1, 19);  // channel change: no skip
    auto g2 = apply_c2_inverted_residual(g, 0, 2, rng);
    REQUIRE(g2.layer_count() == 3);
    REQUIRE(g2.links.empty());
  }
  {
    auto g = single_conv(3, 8, 8, 2, 1, 20);  // stride: no skip
    auto g2 = apply_c2_inverted_residual(g, 0, 2, rng);
    REQUIRE(g2.links.empty());
  }
}

TEST_CASE("C3 fire layer with masked expand branches", "[compress]") {
  std::mt19937_64 rng(21);
  auto g = single_conv(3, 16, 32, 1, 1, 22);
  auto g2 = apply_c3_fire(g, 0, 4, rng);
  REQUIRE(g2.layer_count() == 2);
  // squeeze 16*4 + 4, expand masked to 4*16 (1x1 half) + 9*4*16 (3x3 half) + 32
  REQUIRE(count_params(g2) == (64 + 4) + (64 + 576 + 32));
  REQUIRE(g2.out_shapes.back() == g.out_shapes.back());  // channels preserved
  // center-tap mask really zeroes the off-center taps of the first half
  const auto& expand = g2.layers[1];
  REQUIRE_FALSE(expand.weight_mask.empty());
  for (int f = 0; f < 16; ++f)
    for (int c = 0; c < 4; ++c)
      for (int kh = 0; kh < 3; ++kh)
        for (int kw = 0; kw < 3; ++kw)
          if (kh != 1 || kw != 1)
            REQUIRE(expand.weight.v()[static_cast<size_t>(((f * 4 + c) * 3 + kh) * 3 + kw)] == 0.f);

  auto odd = single_conv(3, 4, 7, 1, 1, 23);
  REQUIRE_THROWS_AS(apply_c3_fire(odd, 0, 2, rng), ConfigError);
}

TEST_CASE("W1 magnitude pruning with persistent masks", "[compress]") {
  std::mt19937_64 rng(24);
  {
    auto g = build_model<float>("tiny-lenet", rng);
    auto g2 = apply_w1_prune(g, 0, 0.0);
    Tensor<float> x = testsup::rand_tensor<float>({2, 1, 16, 16}, 25);
    Tensor<float> a = forward_eval(g, x);
    Tensor<float> b = forward_eval(g2, x);
    REQUIRE(std::memcmp(a.v().data(), b.v().data(), a.v().size() * sizeof(float)) == 0);
  }
  {
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::flatten<float>());
    ls.push_back(layer::fc<float>(4, 1));
    auto g = make_graph<float>({4, 1, 1}, std::move(ls), {}, rng);
    g.layers[1].weight.v() = {1.f, -2.f, 3.f, -4.f};
    auto g2 = apply_w1_prune(g, 1, 0.5);
    REQUIRE(g2.layers[1].weight.v() == std::vector<float>{0.f, 0.f, 3.f, -4.f});
    REQUIRE(g2.layers[1].weight_mask == std::vector<uint8_t>{0, 0, 1, 1});
  }
  {
    auto g = single_conv(3, 4, 8, 1, 1, 26);
    double p = 0.3;
    auto g2 = apply_w1_prune(g, 0, p);
    int64_t n = 3 * 3 * 4 * 8;
    int64_t expect = n - static_cast<int64_t>(p * static_cast<double>(n));  // ceil((1-p)n)
    REQUIRE(count_params(g2) == expect + 8);
    REQUIRE_THROWS_AS(apply_w1_prune(g, 0, 1.0), ConfigError);
  }
}

TEST_CASE("W2 filter pruning ranks by L1 norm and shrinks the consumer", "[compress]") {
  std::mt19937_64 rng(27);
  {
    auto g = single_conv(3, 2, 4, 1, 1, 28);
    auto g2 = apply_w2_filter_prune(g, 0, 0.0);
    REQUIRE(params_fingerprint(g2) == params_fingerprint(g));
  }
  {
    // four 1-tap filters with L1 norms {1,5,2,9}: p=0.5 keeps {5,9}
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::conv<float>(1, 1, 4, 1, 0));
    ls.push_back(layer::conv<float>(1, 4, 2, 1, 0));
    auto g = make_graph<float>({1, 4, 4}, std::move(ls), {}, rng);
    g.layers[0].weight.v() = {1.f, -5.f, 2.f, -9.f};
    auto g2 = apply_w2_filter_prune(g, 0, 0.5);
    REQUIRE(g2.layers[0].cout == 2);
    REQUIRE(g2.layers[0].weight.v() == std::vector<float>{-5.f, -9.f});
    REQUIRE(g2.layers[1].cin == 2);
    Tensor<float> x = testsup::rand_tensor<float>({2, 1, 4, 4}, 29);
    REQUIRE(forward_eval(g2, x).shape() == Shape{2, 2, 4, 4});
  }
  {
    // removal is equivalent to zeroing the dropped filters and their consumers
    std::mt19937_64 r2(30);
    std::vector<LayerSpec<float>> ls;
    ls.push_back(layer::conv<float>(3, 1, 4, 1, 1));
    ls.push_back(layer::relu<float>());
    ls.push_back(layer::flatten<float>());
    ls.push_back(layer::fc<float>(4 * 8 * 8, 3));
    auto g = make_graph<float>({1, 8, 8}, std::move(ls), {}, r2);
    auto g2 = apply_w2_filter_prune(g, 0, 0.5);
    REQUIRE(g2.layers[0].cout == 2);
    REQUIRE(g2.layers[3].in_units == 2 * 8 * 8);
    // zero the dropped filters in the original and compare forwards
    std::vector<std::pair<float, int>> norms;
    for (int f = 0; f < 4; ++f) {
      float acc = 0;
      for (int j = 0; j < 9; ++j) acc += std::abs(g.layers[0].weight.v()[static_cast<size_t>(f * 9 + j)]);
      norms.push_back({acc, f});
    }
    std::sort(norms.begin(), norms.end());
    for (int d = 0; d < 2; ++d) {
      int f = norms[static_cast<size_t>(d)].second;
      for (int j = 0; j < 9; ++j) g.layers[0].weight.v()[static_cast<size_t>(f * 9 + j)] = 0.f;
      g.layers[0].bias.v()[static_cast<size_t>(f)] = 0.f;
    }
    Tensor<float> x = testsup::rand_tensor<float>({3, 1, 8, 8}, 31, 0.f, 1.f);
    Tensor<float> a = forward_eval(g, x);
    Tensor<float> b = forward_eval(g2, x);
    REQUIRE(std::memcmp(a.v().data(), b.v().data(), a.v().size() * sizeof(float)) == 0);
  }
  {
    auto g = single_conv(3, 2, 2, 1, 1, 32);
    REQUIRE_THROWS_AS(apply_w2_filter_prune(g, 0, 0.99), ConfigError);  // no survivors
  }
}

TEST_CASE("applicability mask follows the technique table", "[compress]") {
  std::mt19937_64 rng(33);
  auto g = build_model<float>("tiny-lenet", rng);
  auto mask = applicability_mask(g);
  // conv layer: C1 C2 C3 W1 W2
  REQUIRE(mask[0] == std::array<bool, 8>{false, false, false, true, true, true, true, true});
  // first fc of the trailing stack: F1 F2 F3 W1
  REQUIRE(mask[7] == std::array<bool, 8>{true, true, true, false, false, false, true, false});
  // second fc: F3 no longer applies
  REQUIRE(mask[9] == std::array<bool, 8>{true, true, false, false, false, false, true, false});
  // relu: nothing applies
  REQUIRE(mask[1] == std::array<bool, 8>{false, false, false, false, false, false, false, false});
}

TEST_CASE("apply_strategy composes rewrites and maps the partition", "[compress]") {
  std::mt19937_64 rng(34);
  auto base = build_model<float>("tiny-lenet", rng);

  {  // placement-only strategy leaves the function intact
    Strategy s = parse_strategy("P:3");
    std::mt19937_64 r(35);
    auto g = apply_strategy(base, s, {}, r);
    REQUIRE(g.partition == 3);
    Tensor<float> x = testsup::rand_tensor<float>({2, 1, 16, 16}, 36);
    Tensor<float> a = forward_eval(base, x);
    Tensor<float> b = forward_eval(g, x);
    REQUIRE(std::memcmp(a.v().data(), b.v().data(), a.v().size() * sizeof(float)) == 0);
  }
  {  // "P:6 0:W1 3:C1": hand-computed compression ratio
    Strategy s = parse_strategy("P:6 0:W1 3:C1");
    std::mt19937_64 r(37);
    std::vector<RewriteReport> reports;
    auto g = apply_strategy(base, s, {}, r, &reports);
    REQUIRE(reports.size() == 2);
    // W1 on conv0: 150 weights -> 75 kept, bias 6 stays: 81
    // C1 on conv3 (5x5, 6->16): dw 25*6+6=156, pw 6*16+16=112: 268 (was 2416)
    int64_t expect = 4784 - 156 - 2416 + 81 + 268;
    REQUIRE(count_params(g) == expect);
    REQUIRE_THAT(compression_ratio(base, g),
                 Catch::Matchers::WithinAbs(1.0 - static_cast<double>(expect) / 4784.0, 1e-12));
    REQUIRE(g.partition == 7);  // C1 inserted one layer below the boundary
    Tensor<float> x = testsup::rand_tensor<float>({2, 1, 16, 16}, 38);
    REQUIRE(forward_eval(g, x).shape() == Shape{2, 4});
  }
  {  // applicability errors abort the application
    REQUIRE_THROWS_AS(parse_strategy("P:6 1:W1", base), ParseError);
    Strategy bad;
    bad.partition = 6;
    bad.compressions[1] = Technique::W1;  // relu layer
    std::mt19937_64 r(39);
    REQUIRE_THROWS_AS(apply_strategy(base, bad, {}, r), ParseError);
  }
}

TEST_CASE("apply_strategy is deterministic for a fixed seed", "[compress]") {
  std::mt19937_64 rng(40);
  auto base = build_model<float>("tiny-vgg", rng);
  Strategy s = parse_strategy("P:13 4:C1 7:C2 12:W1");
  std::mt19937_64 r1(41), r2(41);
  auto a = apply_strategy(base, s, {}, r1);
  auto b = apply_strategy(base, s, {}, r2);
  REQUIRE(a.layer_count() == b.layer_count());
  REQUIRE(params_fingerprint(a) == params_fingerprint(b));
  for (int i = 0; i < a.layer_count(); ++i) {
    REQUIRE(a.layers[static_cast<size_t>(i)].kind == b.layers[static_cast<size_t>(i)].kind);
    REQUIRE(a.out_shapes[static_cast<size_t>(i)] == b.out_shapes[static_cast<size_t>(i)]);
  }
  // rewrites preserve the model interface
  REQUIRE(a.out_shapes.back() == base.out_shapes.back());
  REQUIRE(a.input_shape == base.input_shape);
}

TEST_CASE("rewrites never grow the interface and W-family strictly shrinks", "[compress]") {
  std::mt19937_64 rng(42);
  auto base = build_model<float>("tiny-vgg", rng);
  int64_t p0 = count_params(base);
  auto w1 = apply_w1_prune(base, 4, 0.5);
  REQUIRE(count_params(w1) < p0);
  auto w2 = apply_w2_filter_prune(base, 12, 0.5);
  REQUIRE(count_params(w2) < p0);
}
