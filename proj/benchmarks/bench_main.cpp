#include "mlit/attention.hpp"
#include "mlit/autodiff.hpp"
#include "mlit/model.hpp"
#include "mlit/moe.hpp"
#include "mlit/ops.hpp"

#include <benchmark/benchmark.h>
#include <malloc.h>

using namespace mlit;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, DType dtype = DType::f32) {
    RngStream rng(seed);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v)
        x = rng.normal();
    return Tensor::from_values(std::move(shape), v, dtype);
}

void BM_Matmul(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
    for (auto _ : state)
        benchmark::DoNotOptimize(matmul(a, b));
    state.counters["flops"] =
        benchmark::Counter(static_cast<double>(state.iterations() * 2 * n * n * n), benchmark::Counter::kIsRate);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(192)->Arg(512);

// XXS first layer shape: 37 tokens of width 96, t = 3, hidden 81.
void BM_MoeDispatch(benchmark::State& state) {
    const auto mode = state.range(0) == 0 ? DispatchMode::sparse : DispatchMode::dense;
    RngStream init(3);
    const auto gate = make_gate(96, 3, 2, DType::f32, init);
    const auto bank = make_swiglu_bank(96, 81, 3, 0.0, SharingMode::v_w2, DType::f32, init);
    const Tensor x = random_tensor({64, 37, 96}, 4);
    ForwardContext ctx;
    ctx.dispatch = mode;
    for (auto _ : state)
        benchmark::DoNotOptimize(moe_forward(x, gate, bank, ctx).y);
    state.SetLabel(mode == DispatchMode::sparse ? "sparse" : "dense");
}
BENCHMARK(BM_MoeDispatch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Gqa(benchmark::State& state) {
    RngStream init(5);
    const auto p = make_gqa(96, 12, static_cast<int>(state.range(0)), DType::f32, init);
    const Tensor x = random_tensor({64, 37, 96}, 6);
    for (auto _ : state)
        benchmark::DoNotOptimize(gqa_forward(x, p));
}
BENCHMARK(BM_Gqa)->Arg(1)->Arg(4)->Arg(12)->Unit(benchmark::kMillisecond);

void BM_ClassifierForward(benchmark::State& state) {
    RngStream init(7);
    const auto model = build_mlit(mlit_preset("XXS"), DType::f32, init);
    const Tensor images = random_tensor({state.range(0), 3, 36, 36}, 8);
    for (auto _ : state)
        benchmark::DoNotOptimize(classify_forward(model, images, {}).logits);
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClassifierForward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ClassifierTrainStep(benchmark::State& state) {
    RngStream init(9);
    const auto model = build_mlit(mlit_preset("XXS"), DType::f32, init);
    ParamList params;
    collect_params(params, model);
    const Tensor images = random_tensor({32, 3, 36, 36}, 10);
    const std::vector<int> labels(32, 1);
    for (auto _ : state) {
        Tape tape;
        Tensor loss;
        {
            auto rec = tape.record();
            loss = classification_loss(classify_forward(model, images, {}), labels, 0.5);
        }
        benchmark::DoNotOptimize(tape.backward(loss));
    }
    state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_ClassifierTrainStep)->Unit(benchmark::kMillisecond);

} // namespace

int main(int argc, char** argv) {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv))
        return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
