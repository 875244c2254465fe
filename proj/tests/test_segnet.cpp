#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cseg/checkpoint.hpp"
#include "cseg/segnet.hpp"
#include "test_util.hpp"

using namespace cseg;

namespace {
const std::vector<int> kWidths = {8, 16, 32, 64};
const std::vector<KernelKind> kConv3D = {KernelKind::Conv3D, KernelKind::Conv3D, KernelKind::Conv3D};
}  // namespace

TEST_CASE("encoder: equal seeds give bit-identical parameters") {
  Encoder a = build_encoder<float>(kWidths, 42);
  Encoder b = build_encoder<float>(kWidths, 42);
  CHECK(params_checksum<float>(a.params()) == params_checksum<float>(b.params()));
  Encoder c = build_encoder<float>(kWidths, 43);
  CHECK(params_checksum<float>(c.params()) != params_checksum<float>(a.params()));
}

TEST_CASE("encoder: deepest feature is input/8 for 4 levels") {
  Encoder e = build_encoder<float>(kWidths, 1);
  Rng rng(0);
  Tensor x = testing::random_tensor_f({1, 1, 16, 16, 16}, rng);
  auto feats = e.forward(x, Mode::Eval);
  REQUIRE(feats.size() == 4);
  CHECK(feats.back().shape() == std::vector<int>({1, 64, 2, 2, 2}));
  CHECK(feats.front().shape() == std::vector<int>({1, 8, 16, 16, 16}));
}

TEST_CASE("frozen flag default false; freeze is idempotent") {
  Encoder e = build_encoder<float>(kWidths, 1);
  CHECK_FALSE(e.frozen());
  e.freeze();
  CHECK(e.frozen());
  const auto sum = params_checksum<float>(e.params());
  e.freeze();
  CHECK(e.frozen());
  CHECK(params_checksum<float>(e.params()) == sum);
  for (auto* p : e.params()) CHECK(p->frozen);
}

TEST_CASE("frozen encoder rejects gradient writes; decoder stays trainable") {
  Encoder e = build_encoder<float>({4, 8}, 1);
  Decoder d = build_decoder(e, 2, {KernelKind::Conv2D}, 2);
  e.freeze();
  Rng rng(5);
  Tensor x = testing::random_tensor_f({1, 1, 4, 4, 4}, rng);
  auto feats = e.forward(x, Mode::Train);
  Tensor probs = d.forward(feats, Mode::Train);
  Tensor g(probs.shape());
  g.fill(0.1f);
  std::vector<Tensor> skip_grads;
  Tensor gd = d.backward(g, skip_grads);  // decoder backward works
  CHECK(gd.shape() == feats.back().shape());
  // pushing gradients into the frozen encoder must throw
  CHECK_THROWS_AS(e.backward(gd, skip_grads), FrozenError);
  // decoder params accept updates
  for (auto* p : d.params()) CHECK_FALSE(p->frozen);
  sgd_step(*d.params()[0], 0.01f, 0.9f, true);
}

TEST_CASE("decoder: all-Conv3D block conv weights are exactly 3x the all-Conv2D build") {
  Encoder e = build_encoder<float>(kWidths, 7);
  Decoder d3 = build_decoder(e, 4, kConv3D, 9);
  Decoder d2 = build_decoder(e, 4, {KernelKind::Conv2D, KernelKind::Conv2D, KernelKind::Conv2D}, 9);
  std::int64_t w3 = 0, w2 = 0;
  for (auto& b : d3.blocks()) w3 += block_conv_weight_count(b);
  for (auto& b : d2.blocks()) w2 += block_conv_weight_count(b);
  CHECK(w3 == 3 * w2);
}

TEST_CASE("decoder: kind list length must match block count") {
  Encoder e = build_encoder<float>(kWidths, 7);
  CHECK_THROWS_AS(build_decoder(e, 4, {KernelKind::Conv2D}, 9), ConfigError);
}

TEST_CASE("decoder: n_classes=1 gives 2 output channels") {
  Encoder e = build_encoder<float>({4, 8}, 3);
  Decoder d = build_decoder(e, 1, {KernelKind::Projection}, 4);
  Rng rng(1);
  Tensor x = testing::random_tensor_f({1, 1, 4, 4, 4}, rng);
  Tensor probs = forward_segment(e, d, x);
  CHECK(probs.shape() == std::vector<int>({1, 2, 4, 4, 4}));
}

TEST_CASE("decoder: equal seeds give identical init") {
  Encoder e = build_encoder<float>(kWidths, 7);
  Decoder a = build_decoder(e, 3, kConv3D, 11);
  Decoder b = build_decoder(e, 3, kConv3D, 11);
  CHECK(params_checksum<float>(a.params()) == params_checksum<float>(b.params()));
}

TEST_CASE("forward_segment: per-voxel probability simplex") {
  Encoder e = build_encoder<float>(kWidths, 5);
  Decoder d = build_decoder(e, 5, {KernelKind::PseudoP3D, KernelKind::Conv2D, KernelKind::Conv3D}, 6);
  Rng rng(2);
  Tensor x = testing::random_tensor_f({1, 1, 8, 8, 8}, rng, 0.0f, 1.0f);
  Tensor probs = forward_segment(e, d, x);
  const std::int64_t spatial = 8 * 8 * 8;
  for (std::int64_t j = 0; j < spatial; ++j) {
    double sum = 0.0;
    for (int c = 0; c < 6; ++c) sum += probs[c * spatial + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("forward_segment: all-zero weights give uniform probabilities") {
  Encoder e = build_encoder<float>({4, 8}, 5);
  Decoder d = build_decoder(e, 3, {KernelKind::Conv2D}, 6);
  for (auto* p : e.params()) p->value.zero();
  for (auto* p : d.params()) p->value.zero();
  Rng rng(3);
  Tensor x = testing::random_tensor_f({1, 1, 4, 4, 4}, rng);
  Tensor probs = forward_segment(e, d, x);
  for (std::int64_t i = 0; i < probs.numel(); ++i) CHECK(probs[i] == doctest::Approx(0.25));
}

TEST_CASE("forward_segment: rank-3 volume accepted, argmax extents preserved") {
  Encoder e = build_encoder<float>({4, 8, 12}, 5);
  Decoder d = build_decoder(e, 2, {KernelKind::Conv3D, KernelKind::Conv2D}, 6);
  Rng rng(4);
  Tensor x = testing::random_tensor_f({8, 8, 8}, rng);
  Tensor probs = forward_segment(e, d, x);
  CHECK(probs.shape() == std::vector<int>({1, 3, 8, 8, 8}));
  Tensor odd = testing::random_tensor_f({6, 6, 6}, rng);
  CHECK_THROWS_AS(forward_segment(e, d, odd), ShapeError);
}

TEST_CASE("aux heads: parameter budget under 10% of a regular decoder") {
  Encoder e = build_encoder<float>(kWidths, 5);
  Decoder d = build_decoder(e, 6, kConv3D, 6);
  AuxHeads aux = attach_aux_heads(e, 4, Rng(7));
  const auto aux_bp = param_count<float>(aux.body_part.params());
  const auto dec_n = param_count<float>(d.params());
  CHECK(static_cast<double>(aux_bp) / static_cast<double>(dec_n) < 0.10);
  const auto aux_an = param_count<float>(aux.anomaly.params());
  CHECK(static_cast<double>(aux_an) / static_cast<double>(dec_n) < 0.10);
}

TEST_CASE("aux heads: output channels") {
  Encoder e = build_encoder<float>(kWidths, 5);
  AuxHeads aux = attach_aux_heads(e, 4, Rng(7));
  Rng rng(8);
  Tensor x = testing::random_tensor_f({1, 1, 8, 8, 8}, rng);
  auto feats = e.forward(x, Mode::Eval);
  Tensor bp = aux.body_part.forward(feats, Mode::Eval);
  CHECK(bp.shape() == std::vector<int>({1, 4, 8, 8, 8}));
  Tensor an = aux.anomaly.forward(feats, Mode::Eval);
  CHECK(an.shape() == std::vector<int>({1, 2, 8, 8, 8}));
}

TEST_CASE("encoder checkpoint round trip reproduces inference") {
  namespace fs = std::filesystem;
  Encoder e = build_encoder<float>(kWidths, 19);
  Decoder d = build_decoder(e, 3, kConv3D, 20);
  e.freeze();
  Rng rng(9);
  Tensor x = testing::random_tensor_f({1, 1, 8, 8, 8}, rng);
  Tensor before = forward_segment(e, d, x);

  const auto enc_path = fs::temp_directory_path() / "cseg_enc.ckpt";
  const auto dec_path = fs::temp_directory_path() / "cseg_dec.ckpt";
  save_encoder(enc_path.string(), e);
  save_decoder(dec_path.string(), d, e.widths());
  Encoder e2 = load_encoder(enc_path.string());
  Decoder d2 = load_decoder(dec_path.string());
  CHECK(e2.frozen());
  Tensor after = forward_segment(e2, d2, x);
  CHECK(checksum(after) == checksum(before));
  fs::remove(enc_path);
  fs::remove(dec_path);
}

TEST_CASE("aux checkpoint round trip") {
  namespace fs = std::filesystem;
  Encoder e = build_encoder<float>(kWidths, 19);
  AuxHeads aux = attach_aux_heads(e, 4, Rng(21));
  Rng rng(9);
  Tensor x = testing::random_tensor_f({1, 1, 8, 8, 8}, rng);
  auto feats = e.forward(x, Mode::Eval);
  Tensor before = aux.body_part.forward(feats, Mode::Eval);
  const auto path = fs::temp_directory_path() / "cseg_aux.ckpt";
  save_aux(path.string(), aux, e.widths());
  AuxHeads aux2 = load_aux(path.string());
  Tensor after = aux2.body_part.forward(feats, Mode::Eval);
  CHECK(checksum(after) == checksum(before));
  fs::remove(path);
}

TEST_CASE("corrupt checkpoint rejected") {
  namespace fs = std::filesystem;
  Encoder e = build_encoder<float>({4, 8}, 19);
  const auto path = fs::temp_directory_path() / "cseg_corrupt.ckpt";
  save_encoder(path.string(), e);
  // flip one payload byte: checksum must catch it
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(64);
  char c;
  f.seekg(64);
  f.read(&c, 1);
  c ^= 0x40;
  f.seekp(64);
  f.write(&c, 1);
  f.close();
  CHECK_THROWS_AS(load_encoder(path.string()), IoError);

  // wrong magic
  std::ofstream bad(path, std::ios::binary);
  bad << "JUNKJUNKJUNKJUNKJUNKJUNKJUNK";
  bad.close();
  CHECK_THROWS_AS(load_encoder(path.string()), IoError);
  fs::remove(path);
}

TEST_CASE("gradients flow through a full encoder/decoder pair") {
  // double-precision end-to-end finite difference on a tiny net
  EncoderT<double> e({2, 4}, 1, Rng(31));
  DecoderT<double> d({2, 4}, 1, {KernelKind::PseudoP3D}, Rng(32));
  Rng rng(33);
  TensorT<double> x = testing::random_tensor({1, 1, 4, 4, 4}, rng);
  TensorT<double> w;
  {
    auto feats = e.forward(x, Mode::Train);
    TensorT<double> probs = d.forward(feats, Mode::Train);
    w = testing::random_tensor(probs.shape(), rng, 0.5, 1.5);
  }
  struct State {
    EncoderT<double> e;
    DecoderT<double> d;
    TensorT<double> x, w;
  };
  State base{e, d, x, w};
  auto loss = [](State& s) {
    auto feats = s.e.forward(s.x, Mode::Train);
    TensorT<double> probs = s.d.forward(feats, Mode::Train);
    double acc = 0.0;
    for (std::int64_t i = 0; i < probs.numel(); ++i) acc += probs[i] * s.w[i];
    return acc;
  };
  auto values = [](State& s) {
    std::vector<TensorT<double>*> v;
    for (auto* p : s.e.params()) v.push_back(&p->value);
    for (auto* p : s.d.params()) v.push_back(&p->value);
    return v;
  };
  std::vector<TensorT<double>> analytic;
  {
    State s = base;
    auto feats = s.e.forward(s.x, Mode::Train);
    s.d.forward(feats, Mode::Train);
    std::vector<TensorT<double>> skip_grads;
    TensorT<double> gd = s.d.backward(s.w, skip_grads);
    s.e.backward(gd, skip_grads);
    for (auto* p : s.e.params()) analytic.push_back(p->grad);
    for (auto* p : s.d.params()) analytic.push_back(p->grad);
  }
  CHECK(cseg::testing::max_grad_rel_err<State>(base, loss, values, analytic) < 1e-3);
}
