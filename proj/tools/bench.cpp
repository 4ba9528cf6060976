// Timing comparison of the serial reference kernels against the OpenMP
// drivers, plus an end-to-end attention forward/backward measurement.

#include <chrono>
#include <cstdio>
#include <vector>

#include <omp.h>

#include <cstdlib>

#include "lab/attention.hpp"
#include "lab/kernels.hpp"
#include "lab/rng.hpp"
#include "lab/tensor.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <typename F>
double best_of(int reps, F&& f) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = Clock::now();
    f();
    best = std::min(best, ms_since(t0));
  }
  return best;
}

void bench_gemm(int m, int k, int n) {
  lab::Rng rng(1);
  std::vector<float> a(static_cast<long>(m) * k), b(static_cast<long>(k) * n),
      c(static_cast<long>(m) * n);
  for (auto& x : a) x = static_cast<float>(rng.normal());
  for (auto& x : b) x = static_cast<float>(rng.normal());
  const double flops = 2.0 * m * k * n;
  const double serial =
      best_of(5, [&] { lab::kernels::gemm_nn_serial(a.data(), b.data(), c.data(), m, k, n); });
  const double parallel =
      best_of(5, [&] { lab::kernels::gemm_nn(a.data(), b.data(), c.data(), m, k, n); });
  std::printf("gemm_nn %4dx%4dx%4d  serial %8.2f ms (%6.2f GF/s)  omp %8.2f ms (%6.2f GF/s)  x%.2f\n",
              m, k, n, serial, flops / serial / 1e6, parallel, flops / parallel / 1e6,
              serial / parallel);
}

void bench_attention(int n, int d_model, int heads, int d_head, lab::attn::Mechanism mech) {
  lab::Rng rng(2);
  auto randt = [&](int r, int c) {
    std::vector<float> v(static_cast<long>(r) * c);
    for (auto& x : v) x = static_cast<float>(rng.normal() * 0.05);
    return lab::Tensor::from(r, c, v, true);
  };
  lab::attn::LayerParams p;
  p.mech = mech;
  p.heads = heads;
  p.d_head = d_head;
  p.wq = randt(d_model, heads * d_head);
  p.wk = randt(d_model, heads * d_head);
  p.wv = randt(d_model, heads * d_head);
  p.wo = randt(heads * d_head, d_model);
  p.wd = randt(d_model, heads);
  p.bd = randt(1, heads);
  lab::Tensor x = randt(n, d_model);
  const double fwd_bwd = best_of(3, [&] {
    lab::Tape tape;
    lab::Tensor out = lab::attn::attention_layer_forward(tape, x, p);
    tape.backward(tape.sum(out));
  });
  std::printf("attention %-8s N=%d d_model=%d H=%d dh=%d  fwd+bwd %8.2f ms\n",
              lab::attn::to_string(mech).c_str(), n, d_model, heads, d_head, fwd_bwd);
}

}  // namespace

int main() {
  setenv("LAB_GEMM_PARALLEL_MIN_WORK", "1", 1);  // compare drivers at every size
  std::printf("threads: %d\n", omp_get_max_threads());
  bench_gemm(256, 128, 128);
  bench_gemm(256, 128, 512);
  bench_gemm(512, 512, 512);
  bench_gemm(1024, 1024, 1024);
  bench_attention(256, 128, 4, 32, lab::attn::Mechanism::standard);
  bench_attention(256, 128, 4, 32, lab::attn::Mechanism::sd);
  bench_attention(256, 128, 4, 32, lab::attn::Mechanism::linear);
  return 0;
}
