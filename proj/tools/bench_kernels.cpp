// Serial reference vs parallel kernels on training-sized shapes.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "calseg/kernels.hpp"

using namespace calseg::kernels;

namespace {

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double time_ms(const std::function<void()>& f, int reps) {
  f();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void report(const char* name, double serial_ms, double parallel_ms, double diff) {
  std::printf("%-28s serial %9.3f ms  parallel %9.3f ms  speedup %6.2fx  max|diff| %.2e\n", name, serial_ms,
              parallel_ms, serial_ms / parallel_ms, diff);
}

}  // namespace

int main() {
  std::mt19937_64 rng(7);
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());

  for (const ConvGeometry g : {ConvGeometry{16, 16, 64, 64, 3}, ConvGeometry{32, 32, 16, 16, 3},
                               ConvGeometry{48, 16, 64, 64, 3}, ConvGeometry{32, 16, 64, 64, 1}}) {
    const auto in = random_vector(g.input_size(), rng);
    const auto w = random_vector(g.weight_size(), rng);
    const auto b = random_vector(static_cast<std::size_t>(g.out_channels), rng);
    const auto go = random_vector(g.output_size(), rng);
    std::vector<double> out_s(g.output_size()), out_p(g.output_size());
    char name[64];

    std::snprintf(name, sizeof name, "conv fwd %dx%d %dx%d k%d", g.in_channels, g.out_channels, g.height, g.width,
                  g.kernel);
    const double fs = time_ms([&] { serial::conv2d_forward(g, in, w, b, out_s); }, 5);
    const double fp = time_ms([&] { parallel::conv2d_forward(g, in, w, b, out_p); }, 5);
    report(name, fs, fp, max_abs_diff(out_s, out_p));

    std::vector<double> gi_s(g.input_size()), gi_p(g.input_size());
    const double bs = time_ms([&] { serial::conv2d_backward_input(g, go, w, gi_s); }, 5);
    const double bp = time_ms([&] { parallel::conv2d_backward_input(g, go, w, gi_p); }, 5);
    std::snprintf(name, sizeof name, "  backward input");
    report(name, bs, bp, max_abs_diff(gi_s, gi_p));

    std::vector<double> gw_s(g.weight_size()), gw_p(g.weight_size()), gb_s(g.out_channels), gb_p(g.out_channels);
    const double ws = time_ms([&] { serial::conv2d_backward_weight(g, in, go, gw_s, gb_s); }, 5);
    const double wp = time_ms([&] { parallel::conv2d_backward_weight(g, in, go, gw_p, gb_p); }, 5);
    std::snprintf(name, sizeof name, "  backward weight");
    report(name, ws, wp, max_abs_diff(gw_s, gw_p) / 6.0);  // accumulated over 6 calls
  }

  {
    const int c = 32, h = 64, w = 64;
    const auto in = random_vector(static_cast<std::size_t>(c) * h * w, rng);
    std::vector<double> ps(in.size() / 4), pp(in.size() / 4), us(in.size() * 4), up(in.size() * 4);
    report("avg_pool2 32x64x64", time_ms([&] { serial::avg_pool2_forward(c, h, w, in, ps); }, 20),
           time_ms([&] { parallel::avg_pool2_forward(c, h, w, in, pp); }, 20), max_abs_diff(ps, pp));
    report("upsample2 32x64x64", time_ms([&] { serial::upsample2_forward(c, h, w, in, us); }, 20),
           time_ms([&] { parallel::upsample2_forward(c, h, w, in, up); }, 20), max_abs_diff(us, up));
  }

  {
    const int count = 50, pixels = 64 * 64;
    std::bernoulli_distribution coin(0.3);
    std::vector<std::uint8_t> masks(static_cast<std::size_t>(count) * pixels);
    for (auto& m : masks) m = coin(rng) ? 1 : 0;
    std::vector<double> ds(count * count), dp(count * count);
    report("pairwise IoU 50x50 64x64",
           time_ms([&] { serial::pairwise_iou_distance(masks, count, masks, count, pixels, ds); }, 5),
           time_ms([&] { parallel::pairwise_iou_distance(masks, count, masks, count, pixels, dp); }, 5),
           max_abs_diff(ds, dp));
  }
  return 0;
}
