#include <cmath>
#include <vector>

#include "doctest.h"
#include "fcc/errors.hpp"
#include "fcc/layers.hpp"
#include "gradcheck.hpp"

using namespace fcc;
using fcc::testing::grad_check;
using fcc::testing::probe;
using fcc::testing::random_tensor;

namespace {

using T64 = Tensor<double>;
using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Vec to_vec(const T64& t) { return {t.values().begin(), t.values().end()}; }

Mat to_mat(const T64& t) {
  Mat m(t.dim(0), Vec(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at({i, j});
  return m;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// h' = (1 - z) h + z tanh(W_h x + U_h (r h) + b_h), evaluated scalar by scalar.
Vec gru_oracle(const GruParams<double>& p, const Vec& x, const Vec& h) {
  const std::size_t in = p.input_dim, hid = p.hidden_dim;
  auto wz = to_mat(p.w_z), wr = to_mat(p.w_r), wh = to_mat(p.w_h);
  auto uz = to_mat(p.u_z), ur = to_mat(p.u_r), uh = to_mat(p.u_h);
  auto bz = to_vec(p.b_z), br = to_vec(p.b_r), bh = to_vec(p.b_h);
  Vec z(hid), r(hid), out(hid);
  for (std::size_t j = 0; j < hid; ++j) {
    double az = bz[j], ar = br[j];
    for (std::size_t i = 0; i < in; ++i) {
      az += x[i] * wz[i][j];
      ar += x[i] * wr[i][j];
    }
    for (std::size_t i = 0; i < hid; ++i) {
      az += h[i] * uz[i][j];
      ar += h[i] * ur[i][j];
    }
    z[j] = sig(az);
    r[j] = sig(ar);
  }
  for (std::size_t j = 0; j < hid; ++j) {
    double ah = bh[j];
    for (std::size_t i = 0; i < in; ++i) ah += x[i] * wh[i][j];
    for (std::size_t i = 0; i < hid; ++i) ah += r[i] * h[i] * uh[i][j];
    out[j] = (1.0 - z[j]) * h[j] + z[j] * std::tanh(ah);
  }
  return out;
}

GruParams<double> make_gru(ParamStore<double>& store, const std::string& name, std::size_t in, std::size_t hid,
                           Rng& rng) {
  GruParams<double>::declare(store, name, in, hid, rng);
  return GruParams<double>::bind(store, name);
}

}  // namespace

TEST_CASE("gru_cell_step examples") {
  ParamStore<double> store;
  Rng rng(1);
  auto p = make_gru(store, "gru", 3, 4, rng);
  for (auto& [name, t] : store.entries())
    for (auto& v : t.mutable_values()) v = 0.0;
  auto h = T64::from_vector({4}, {1, -2, 3, 0.5});
  auto x = T64::from_vector({3}, {0.3, 0.1, -7});
  auto next = gru_cell_step(p, x, h);
  CHECK(to_vec(next) == Vec{0.5, -1, 1.5, 0.25});
  auto from_zero = gru_cell_step(p, x, T64::zeros({4}));
  for (double v : from_zero.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(gru_cell_step(p, T64::zeros({2}), h), DimensionError);
}

TEST_CASE("gru_cell_step matches the scalar formula oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    ParamStore<double> store;
    auto p = make_gru(store, "gru", 5, 3, rng);
    auto x = random_tensor<double>({5}, rng, -1, 1, false);
    auto h = random_tensor<double>({3}, rng, -1, 1, false);
    const auto expected = gru_oracle(p, to_vec(x), to_vec(h));
    const auto got = to_vec(gru_cell_step(p, x, h));
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(got[j] - expected[j]) < 1e-12);
  }
}

TEST_CASE("bigru_forward examples") {
  Rng rng(3);
  ParamStore<double> store;
  auto fwd = make_gru(store, "f", 4, 3, rng);
  auto bwd = make_gru(store, "b", 4, 3, rng);

  SUBCASE("single token is one step each way from zero state") {
    auto seq = random_tensor<double>({1, 4}, rng, -1, 1, false);
    auto out = bigru_forward(fwd, bwd, seq, {true});
    const Vec x = to_vec(seq);
    auto f = gru_oracle(fwd, x, Vec(3, 0.0));
    auto b = gru_oracle(bwd, x, Vec(3, 0.0));
    REQUIRE(out.shape() == Shape{1, 6});
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(std::abs(out.at({0, j}) - f[j]) < 1e-12);
      CHECK(std::abs(out.at({0, 3 + j}) - b[j]) < 1e-12);
    }
  }
  SUBCASE("fully masked sequence is all zero") {
    auto seq = random_tensor<double>({3, 4}, rng, -1, 1, false);
    auto out = bigru_forward(fwd, bwd, seq, {false, false, false});
    CHECK(out.shape() == Shape{3, 6});
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("matches unrolled cells, padding rows zero") {
    auto seq = random_tensor<double>({5, 4}, rng, -1, 1, false);
    auto out = bigru_forward(fwd, bwd, seq, {true, true, true, false, false});
    Mat rows(3);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) rows[i].push_back(seq.at({i, j}));
    Vec h(3, 0.0);
    Mat fw(3), bw(3);
    for (std::size_t i = 0; i < 3; ++i) fw[i] = h = gru_oracle(fwd, rows[i], h);
    h.assign(3, 0.0);
    for (std::size_t i = 3; i-- > 0;) bw[i] = h = gru_oracle(bwd, rows[i], h);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(std::abs(out.at({i, j}) - fw[i][j]) < 1e-12);
        CHECK(std::abs(out.at({i, 3 + j}) - bw[i][j]) < 1e-12);
      }
    }
    for (std::size_t i = 3; i < 5; ++i)
      for (std::size_t j = 0; j < 6; ++j) CHECK(out.at({i, j}) == 0.0);
  }
  SUBCASE("interior gap is a contract error") {
    auto seq = random_tensor<double>({3, 4}, rng, -1, 1, false);
    CHECK_THROWS_AS(bigru_forward(fwd, bwd, seq, {true, false, true}), ContractError);
  }
  SUBCASE("purity") {
    auto seq = random_tensor<double>({4, 4}, rng, -1, 1, false);
    auto a = bigru_forward(fwd, bwd, seq, {true, true, true, false});
    auto b = bigru_forward(fwd, bwd, seq.detach(), {true, true, true, false});
    CHECK(to_vec(a) == to_vec(b));
  }
}

TEST_CASE("cnn_turn_features shape table") {
  ConvStackConfig cfg;
  CHECK(cfg.output_dim(90, 90) == 7744);
  CHECK(cfg.output_dim(90, 30) == 2464);

  ParamStore<double> store;
  Rng rng(4);
  ConvStackParams<double>::declare(store, "cnn", cfg, rng);
  auto p = ConvStackParams<double>::bind(store, "cnn", cfg);
  auto big = cnn_turn_features(p, random_tensor<double>({2, 90, 90}, rng, -1, 1, false));
  CHECK(big.shape() == Shape{7744});
  auto narrow = cnn_turn_features(p, random_tensor<double>({2, 90, 30}, rng, -1, 1, false));
  CHECK(narrow.shape() == Shape{2464});

  CHECK_THROWS_AS(cfg.output_dim(3, 90), DimensionError);
  CHECK_THROWS_AS(cnn_turn_features(p, T64::zeros({2, 3, 8})), DimensionError);
  CHECK_THROWS_AS(cnn_turn_features(p, T64::zeros({1, 8, 8})), DimensionError);
}

TEST_CASE("cnn_turn_features: zero input and zero biases give zero output") {
  ConvStackConfig cfg;
  ParamStore<double> store;
  Rng rng(5);
  ConvStackParams<double>::declare(store, "cnn", cfg, rng);
  for (auto& [name, t] : store.entries())
    if (name.find("bias") != std::string::npos)
      for (auto& v : t.mutable_values()) v = 0.0;
  auto p = ConvStackParams<double>::bind(store, "cnn", cfg);
  auto out = cnn_turn_features(p, T64::zeros({2, 12, 8}));
  CHECK(out.numel() == cfg.output_dim(12, 8));
  for (double v : out.values()) CHECK(v == 0.0);
}

namespace {

// Plain-vector encoder: scaled input + sinusoid, then pre-norm blocks, chained formula by formula.
Mat attention_oracle(const AttentionParams<double>& p, Mat x, const std::vector<bool>& mask,
                     std::vector<std::vector<Mat>>* weights_out) {
  const std::size_t t_len = x.size(), d = p.model_dim, heads = p.num_heads, dk = d / heads;
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / d);
      x[t][i] = mask[t] ? x[t][i] * std::sqrt(static_cast<double>(d)) + (i % 2 == 0 ? std::sin(angle) : std::cos(angle)) : 0.0;
    }
  auto norm = [&](const Mat& in, const T64& g, const T64& b) {
    Mat out = in;
    for (std::size_t t = 0; t < t_len; ++t) {
      double mu = 0, var = 0;
      for (double v : in[t]) mu += v;
      mu /= d;
      for (double v : in[t]) var += (v - mu) * (v - mu);
      var /= d;
      for (std::size_t i = 0; i < d; ++i)
        out[t][i] = (in[t][i] - mu) / std::sqrt(var + 1e-5) * g.values()[i] + b.values()[i];
    }
    return out;
  };
  auto proj = [](const Mat& in, const T64& w) {
    Mat out(in.size(), Vec(w.dim(1), 0.0));
    for (std::size_t t = 0; t < in.size(); ++t)
      for (std::size_t j = 0; j < w.dim(1); ++j)
        for (std::size_t i = 0; i < w.dim(0); ++i) out[t][j] += in[t][i] * w.at({i, j});
    return out;
  };
  for (const auto& blk : p.blocks) {
    Mat n1 = norm(x, blk.norm1_scale, blk.norm1_shift);
    Mat joined(t_len, Vec(d, 0.0));
    std::vector<Mat> block_weights;
    for (std::size_t h = 0; h < heads; ++h) {
      Mat q = proj(n1, blk.heads[h].query), k = proj(n1, blk.heads[h].key), v = proj(n1, blk.heads[h].value);
      Mat w(t_len, Vec(t_len, 0.0));
      for (std::size_t a = 0; a < t_len; ++a) {
        if (!mask[a]) continue;
        double total = 0;
        for (std::size_t b = 0; b < t_len; ++b) {
          if (!mask[b]) continue;
          double s = 0;
          for (std::size_t i = 0; i < dk; ++i) s += q[a][i] * k[b][i];
          w[a][b] = std::exp(s / std::sqrt(static_cast<double>(dk)));
          total += w[a][b];
        }
        for (std::size_t b = 0; b < t_len; ++b) w[a][b] /= total;
        for (std::size_t i = 0; i < dk; ++i)
          for (std::size_t b = 0; b < t_len; ++b) joined[a][h * dk + i] += w[a][b] * v[b][i];
      }
      block_weights.push_back(w);
    }
    if (weights_out) weights_out->push_back(block_weights);
    Mat attn = proj(joined, blk.out_weight);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t i = 0; i < d; ++i) x[t][i] += attn[t][i] + blk.out_bias.values()[i];
    Mat n2 = norm(x, blk.norm2_scale, blk.norm2_shift);
    Mat hidden = proj(n2, blk.ff1_weight);
    for (auto& row : hidden)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = std::max(0.0, row[j] + blk.ff1_bias.values()[j]);
    Mat ff = proj(hidden, blk.ff2_weight);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t i = 0; i < d; ++i) x[t][i] = mask[t] ? x[t][i] + ff[t][i] + blk.ff2_bias.values()[i] : 0.0;
  }
  return x;
}

AttentionParams<double> make_attention(ParamStore<double>& store, std::size_t d, Rng& rng) {
  AttentionParams<double>::declare(store, "enc", d, 2, 2, 4 * d, rng);
  return AttentionParams<double>::bind(store, "enc", 2, 2);
}

}  // namespace

TEST_CASE("self_attention_encode examples") {
  Rng rng(6);
  ParamStore<double> store;
  auto p = make_attention(store, 4, rng);

  SUBCASE("single position attends to itself") {
    AttentionTrace<double> trace;
    self_attention_encode(p, random_tensor<double>({1, 4}, rng, -1, 1, false), {true}, &trace);
    REQUIRE(trace.weights.size() == 2);
    for (const auto& block : trace.weights)
      for (const auto& w : block) CHECK(w.item() == 1.0);
  }
  SUBCASE("weights normalize over unmasked keys") {
    AttentionTrace<double> trace;
    self_attention_encode(p, random_tensor<double>({5, 4}, rng, -1, 1, false), {true, true, true, false, false},
                          &trace);
    for (const auto& block : trace.weights) {
      for (const auto& w : block) {
        for (std::size_t q = 0; q < 3; ++q) {
          double total = 0;
          for (std::size_t k = 0; k < 5; ++k) total += w.at({q, k});
          CHECK(std::abs(total - 1.0) < 1e-9);
          CHECK(w.at({q, 3}) == 0.0);
          CHECK(w.at({q, 4}) == 0.0);
        }
      }
    }
  }
  SUBCASE("identity-like projections match the formula chain") {
    for (auto& blk : p.blocks) {
      for (std::size_t h = 0; h < 2; ++h) {
        for (auto* w : {&blk.heads[h].query, &blk.heads[h].key, &blk.heads[h].value}) {
          auto vals = w->mutable_values();
          std::fill(vals.begin(), vals.end(), 0.0);
          for (std::size_t i = 0; i < 2; ++i) vals[(h * 2 + i) * 2 + i] = 1.0;
        }
      }
    }
    auto seq = random_tensor<double>({3, 4}, rng, -1, 1, false);
    std::vector<std::vector<Mat>> oracle_weights;
    const std::vector<bool> mask{true, true, true};
    const Mat expected = attention_oracle(p, to_mat(seq), mask, &oracle_weights);
    AttentionTrace<double> trace;
    auto out = self_attention_encode(p, seq, mask, &trace);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out.at({t, i}) - expected[t][i]) < 1e-12);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t q = 0; q < 3; ++q)
          for (std::size_t k = 0; k < 3; ++k)
            CHECK(std::abs(trace.weights[b][h].at({q, k}) - oracle_weights[b][h][q][k]) < 1e-12);
  }
  SUBCASE("random parameters with padding match the oracle") {
    auto seq = random_tensor<double>({4, 4}, rng, -1, 1, false);
    const std::vector<bool> mask{true, true, false, false};
    const Mat expected = attention_oracle(p, to_mat(seq), mask, nullptr);
    auto out = self_attention_encode(p, seq, mask);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out.at({t, i}) - expected[t][i]) < 1e-12);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(self_attention_encode(p, T64::zeros({2, 4}), {false, false}), ContractError);
    CHECK_THROWS_AS(self_attention_encode(p, T64::zeros({2, 6}), {true, true}), DimensionError);
  }
}

TEST_CASE("attention: permuting padded tail rows leaves real outputs bit-identical") {
  Rng rng(7);
  ParamStore<double> store;
  auto p = make_attention(store, 6, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t total = 3 + rng.below(5);
    const std::size_t real = 1 + rng.below(total - 1);
    std::vector<bool> mask(total, false);
    std::fill_n(mask.begin(), real, true);
    auto seq = random_tensor<double>({total, 6}, rng, -3, 3, false);
    Vec permuted = to_vec(seq);
    for (std::size_t i = total; i > real + 1; --i) {
      const std::size_t j = real + rng.below(i - real);
      std::swap_ranges(permuted.begin() + (i - 1) * 6, permuted.begin() + i * 6, permuted.begin() + j * 6);
    }
    for (std::size_t i = real * 6; i < permuted.size(); ++i) permuted[i] += rng.uniform(-10, 10);
    auto a = self_attention_encode(p, seq, mask);
    auto b = self_attention_encode(p, T64::from_vector({total, 6}, permuted), mask);
    for (std::size_t i = 0; i < real * 6; ++i) CHECK(a.values()[i] == b.values()[i]);
  }
}

TEST_CASE("mlp_score examples") {
  ParamStore<double> store;
  Rng rng(8);
  MlpParams<double>::declare(store, "mlp", {3, 4, 1}, rng);
  auto p = MlpParams<double>::bind(store, "mlp", Activation::kTanh);

  SUBCASE("zero weights give the final bias") {
    for (auto& layer : p.layers)
      for (auto& v : layer.weight.mutable_values()) v = 0.0;
    CHECK(mlp_score(p, T64::from_vector({3}, {1, 2, 3})).item() == p.layers[1].bias.item());
  }
  SUBCASE("single linear layer is a dot product") {
    MlpParams<double> linear;
    linear.layers.push_back({T64::from_vector({2, 1}, {1, 1}), T64::from_vector({1}, {0}), Activation::kIdentity});
    CHECK(mlp_score(linear, T64::from_vector({2}, {2, 3})).item() == 5.0);
  }
  SUBCASE("two-layer network matches direct evaluation") {
    auto x = random_tensor<double>({3}, rng, -1, 1, false);
    auto w0 = to_mat(p.layers[0].weight), w1 = to_mat(p.layers[1].weight);
    auto b0 = to_vec(p.layers[0].bias);
    double expected = p.layers[1].bias.item();
    for (std::size_t j = 0; j < 4; ++j) {
      double a = b0[j];
      for (std::size_t i = 0; i < 3; ++i) a += x.values()[i] * w0[i][j];
      expected += std::tanh(a) * w1[j][0];
    }
    CHECK(std::abs(mlp_score(p, x).item() - expected) < 1e-12);
  }
  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(mlp_score(p, T64::zeros({5})), DimensionError); }
}

TEST_CASE("every layer passes finite-difference gradient checks") {
  Rng rng(9);
  ParamStore<double> store;
  GruParams<double>::declare(store, "f", 3, 2, rng);
  GruParams<double>::declare(store, "b", 3, 2, rng);
  ConvStackConfig conv;
  conv.filters = {3, 2};
  ConvStackParams<double>::declare(store, "cnn", conv, rng);
  AttentionParams<double>::declare(store, "enc", 4, 2, 2, 8, rng);
  MlpParams<double>::declare(store, "mlp", {5, 3, 1}, rng);
  auto fwd = GruParams<double>::bind(store, "f");
  auto bwd = GruParams<double>::bind(store, "b");
  auto cnn = ConvStackParams<double>::bind(store, "cnn", conv);
  auto enc = AttentionParams<double>::bind(store, "enc", 2, 2);
  auto mlp = MlpParams<double>::bind(store, "mlp", Activation::kTanh);

  auto leaves_with = [&](const std::string& prefix, std::vector<T64> extra) {
    for (auto& [name, t] : store.entries())
      if (name.rfind(prefix, 0) == 0) extra.push_back(t);
    return extra;
  };

  auto seq = random_tensor<double>({4, 3}, rng);
  auto image = random_tensor<double>({2, 6, 5}, rng);
  auto turns = random_tensor<double>({4, 4}, rng);
  auto features = random_tensor<double>({5}, rng);

  auto gru = grad_check<double>([&] { return probe(bigru_forward(fwd, bwd, seq, {true, true, true, false})); },
                                leaves_with("f.", leaves_with("b.", {seq})));
  CHECK(gru.max_relative_error < 1e-5);
  auto cell = grad_check<double>([&] { return probe(gru_cell_step(fwd, reshape(slice_rows(seq, 0, 1), {3}),
                                                                  T64::from_vector({2}, {0.3, -0.2}))); },
                                 leaves_with("f.", {seq}));
  CHECK(cell.max_relative_error < 1e-5);
  auto conv_res = grad_check<double>([&] { return probe(cnn_turn_features(cnn, image)); },
                                     leaves_with("cnn.", {image}));
  CHECK(conv_res.max_relative_error < 1e-5);
  auto attn = grad_check<double>(
      [&] { return probe(self_attention_encode(enc, turns, {true, true, true, false})); },
      leaves_with("enc.", {turns}));
  CHECK(attn.max_relative_error < 1e-5);
  auto mlp_res = grad_check<double>([&] { return mlp_score(mlp, features); }, leaves_with("mlp.", {features}));
  CHECK(mlp_res.max_relative_error < 1e-5);
}
