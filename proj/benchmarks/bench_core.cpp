#include <benchmark/benchmark.h>

#include "docparser/decoder.hpp"
#include "docparser/encoder.hpp"
#include "docparser/model.hpp"
#include "docparser/ops.hpp"
#include "docparser/synth.hpp"

using namespace docparser;

namespace {

EncoderConfig tiny_encoder_config() {
  EncoderConfig cfg;
  cfg.channels = {16, 32, 48, 64, 96, 128};
  cfg.blocks_per_stage = {2, 2, 2, 2, 2, 2};
  cfg.window_sizes = {{2, 8}, {2, 4}, {5, 5}};
  cfg.num_heads = {4, 6, 8};
  cfg.pos_rows = 10;
  cfg.pos_cols = 40;
  return cfg;
}

}  // namespace

static void BM_Conv2dDepthwise7x7(benchmark::State& state) {
  Rng rng(1);
  const auto c = state.range(0);
  Tensor x = Tensor::randn({1, c, 80, 80}, rng, 1.0);
  Tensor w = Tensor::randn({c, 1, 7, 7}, rng, 0.05);
  Tensor b = Tensor::zeros({c});
  NoGradGuard ng;
  for (auto _ : state) {
    Tensor y = conv2d(x, w, b, {.pad_h = 3, .pad_w = 3, .groups = c});
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * c * 80 * 80 * 49);
}
BENCHMARK(BM_Conv2dDepthwise7x7)->Arg(32)->Arg(64)->Arg(128);

static void BM_Conv2dPointwise(benchmark::State& state) {
  Rng rng(2);
  const auto c = state.range(0);
  Tensor x = Tensor::randn({1, c, 40, 80}, rng, 1.0);
  Tensor w = Tensor::randn({4 * c, c, 1, 1}, rng, 0.05);
  NoGradGuard ng;
  for (auto _ : state) {
    Tensor y = conv2d(x, w, {}, {});
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * 4 * c * c * 40 * 80);
}
BENCHMARK(BM_Conv2dPointwise)->Arg(64)->Arg(128)->Arg(256);

static void BM_WindowedAttention(benchmark::State& state) {
  Rng rng(3);
  const std::int64_t c = state.range(0);
  MultiHeadAttention attn(c, c / 16, rng);
  Tensor x = Tensor::randn({1, c, 10, 40}, rng, 1.0);
  NoGradGuard ng;
  for (auto _ : state) {
    Tensor w = window_partition(x, 2, 8);
    Tensor a = attn.forward(w, w, {});
    Tensor y = window_reverse(a, 1, 10, 40, 2, 8);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_WindowedAttention)->Arg(64)->Arg(128);

static void BM_EncodeTiny320(benchmark::State& state) {
  Rng rng(4);
  VisionEncoder enc(tiny_encoder_config(), rng);
  Rng drng(5);
  Tensor img = Tensor::rand_uniform({1, 3, 320, 320}, drng, 0.0, 1.0);
  NoGradGuard ng;
  for (auto _ : state) {
    FeatureMap fm = enc.encode(img);
    benchmark::DoNotOptimize(fm.tensor.data());
  }
}
BENCHMARK(BM_EncodeTiny320)->Unit(benchmark::kMillisecond);

static void BM_GreedyDecodeCached(benchmark::State& state) {
  Rng rng(6);
  DecoderConfig cfg;
  cfg.num_layers = 1;
  cfg.model_dim = 128;
  cfg.num_heads = 8;
  cfg.max_decode_len = 192;
  cfg.vocab_size = 600;
  SeqDecoder dec(cfg, rng);
  Tensor memory = Tensor::randn({1, 100, 128}, rng, 1.0);
  for (auto _ : state) {
    auto res = dec.decode_greedy_cached(memory, 2, 0);
    benchmark::DoNotOptimize(res.ids.data());
  }
  state.SetLabel("tokens/decode capped at 192");
}
BENCHMARK(BM_GreedyDecodeCached)->Unit(benchmark::kMillisecond);

static void BM_SynthGenerate(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) {
    auto s = generate(seed++, SynthOpts{});
    benchmark::DoNotOptimize(s.image.data.data());
  }
  state.SetLabel("320x320 receipt");
}
BENCHMARK(BM_SynthGenerate)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
