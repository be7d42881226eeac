#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "ngvi/rng.hpp"
#include "ngvi/tensor.hpp"

using namespace ngvi;

namespace {

// independent triple-loop matmul oracle
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  }
  return out;
}

Tensor random_tensor(std::vector<std::int64_t> shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

// direct nested-loop 2-d convolution of one [C,H,W] image with weights
// [C_out x C_in*k*k] (no bias)
Tensor conv_oracle(const Tensor& img, const Tensor& w, std::int64_t c_out, std::int64_t kernel,
                   std::int64_t stride, std::int64_t pad) {
  const std::int64_t c_in = img.dim(0), h = img.dim(1), wd = img.dim(2);
  const std::int64_t ho = conv_out_dim(h, kernel, stride, pad);
  const std::int64_t wo = conv_out_dim(wd, kernel, stride, pad);
  Tensor out({c_out, ho, wo});
  for (std::int64_t co = 0; co < c_out; ++co) {
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::int64_t ci = 0; ci < c_in; ++ci) {
          for (std::int64_t ky = 0; ky < kernel; ++ky) {
            for (std::int64_t kx = 0; kx < kernel; ++kx) {
              const std::int64_t iy = oy * stride + ky - pad;
              const std::int64_t ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += w[co * (c_in * kernel * kernel) + (ci * kernel + ky) * kernel + kx] *
                     img[(ci * h + iy) * wd + ix];
            }
          }
        }
        out[(co * ho + oy) * wo + ox] = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("elementwise ops and reductions match a naive oracle") {
  RngStream rng(7, 1);
  const Tensor a = random_tensor({10, 10}, rng);
  const Tensor b = random_tensor({10, 10}, rng);
  const Tensor sum = a + b;
  const Tensor prod = a * b;
  double sum_oracle = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    REQUIRE(sum[i] == Catch::Approx(a[i] + b[i]).margin(1e-12));
    REQUIRE(prod[i] == Catch::Approx(a[i] * b[i]).margin(1e-12));
    sum_oracle += a[i];
  }
  REQUIRE(a.sum() == Catch::Approx(sum_oracle).margin(1e-12));
  REQUIRE(a.mean() == Catch::Approx(sum_oracle / 100.0).margin(1e-12));
}

TEST_CASE("matmul matches the triple-loop oracle") {
  RngStream rng(7, 2);
  const Tensor a = random_tensor({10, 10}, rng);
  const Tensor b = random_tensor({10, 10}, rng);
  const Tensor got = matmul(a, b);
  const Tensor want = matmul_oracle(a, b);
  for (std::int64_t i = 0; i < got.size(); ++i) {
    REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
  }
  REQUIRE_THROWS_AS(matmul(a, Tensor({3, 3})), std::invalid_argument);
}

TEST_CASE("shape invariants") {
  REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
  const Tensor t({2, 3});
  REQUIRE(t.size() == 6);
  REQUIRE_THROWS_AS(t.reshaped({4}), std::invalid_argument);
  REQUIRE(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("gaussian_sample with zero stddev is the mean bitwise") {
  RngStream rng(1, 1);
  const Tensor mean = Tensor::vec({1.0, 2.0});
  const Tensor out = gaussian_sample(mean, Tensor({2}), rng);
  REQUIRE(std::memcmp(out.data(), mean.data(), 2 * sizeof(double)) == 0);
}

TEST_CASE("gaussian_sample error contracts") {
  RngStream rng(1, 1);
  REQUIRE_THROWS_AS(gaussian_sample(Tensor({2}), Tensor({3}), rng), std::invalid_argument);
  REQUIRE_THROWS_AS(gaussian_sample(Tensor({1}), Tensor::vec({-0.5}), rng),
                    std::invalid_argument);
}

TEST_CASE("gaussian_sample statistics over 1e5 draws") {
  RngStream rng(42, 9);
  const Tensor mean({1});
  const Tensor stddev = Tensor::vec({1.0});
  const int n = 100000;
  double acc = 0.0, acc2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = gaussian_sample(mean, stddev, rng)[0];
    acc += x;
    acc2 += x * x;
  }
  const double m = acc / n;
  const double var = acc2 / n - m * m;
  REQUIRE(std::abs(m) < 0.02);
  REQUIRE(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("gaussian_sample is deterministic for a fixed (seed, stream)") {
  const Tensor mean({16});
  const Tensor stddev = Tensor::full({16}, 2.0);
  RngStream r1(123, 456), r2(123, 456);
  const Tensor a = gaussian_sample(mean, stddev, r1);
  const Tensor b = gaussian_sample(mean, stddev, r2);
  for (std::int64_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("unfold shapes and k=1 flattening") {
  Tensor in({1, 3, 3});
  for (std::int64_t i = 0; i < 9; ++i) in[i] = static_cast<double>(i);
  const Tensor u = unfold(in, 2, 1, 0);
  REQUIRE(u.shape() == std::vector<std::int64_t>{4, 4});

  const Tensor small({1, 2, 2}, {1, 2, 3, 4});
  const Tensor flat = unfold(small, 1, 1, 0);
  REQUIRE(flat.shape() == std::vector<std::int64_t>{1, 4});
  REQUIRE(flat[0] == 1.0);
  REQUIRE(flat[1] == 2.0);
  REQUIRE(flat[2] == 3.0);
  REQUIRE(flat[3] == 4.0);
}

TEST_CASE("unfold matches direct patch extraction on a ramp") {
  Tensor in({1, 3, 3});
  for (std::int64_t i = 0; i < 9; ++i) in[i] = static_cast<double>(i + 1);
  const Tensor u = unfold(in, 2, 1, 0);
  // patch oracle: column j = receptive field of output position j
  for (std::int64_t oy = 0; oy < 2; ++oy) {
    for (std::int64_t ox = 0; ox < 2; ++ox) {
      for (std::int64_t ky = 0; ky < 2; ++ky) {
        for (std::int64_t kx = 0; kx < 2; ++kx) {
          const double want = in[(oy + ky) * 3 + (ox + kx)];
          REQUIRE(u[(ky * 2 + kx) * 4 + oy * 2 + ox] == want);
        }
      }
    }
  }
  REQUIRE_THROWS_AS(unfold(in, 5, 1, 0), std::invalid_argument);
}

TEST_CASE("conv as W*unfold(A) equals direct convolution") {
  RngStream rng(11, 3);
  for (const std::int64_t kernel : {1, 2, 3}) {
    for (const std::int64_t stride : {1, 2}) {
      for (const std::int64_t pad : {0, 1}) {
        const std::int64_t c_in = 2, c_out = 3, h = 5, w = 6;
        if (h + 2 * pad < kernel) continue;
        const Tensor img = random_tensor({c_in, h, w}, rng);
        const Tensor weights = random_tensor({c_out, c_in * kernel * kernel}, rng);
        const Tensor got = matmul(weights, unfold(img, kernel, stride, pad));
        const Tensor want = conv_oracle(img, weights, c_out, kernel, stride, pad);
        REQUIRE(got.size() == want.size());
        for (std::int64_t i = 0; i < got.size(); ++i) {
          REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
        }
      }
    }
  }
}

TEST_CASE("binary serialization round-trips") {
  RngStream rng(5, 5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t r = 1 + rng.uniform_int(3);
    std::vector<std::int64_t> shape;
    for (std::int64_t i = 0; i < r; ++i) shape.push_back(1 + rng.uniform_int(5));
    const Tensor t = random_tensor(shape, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    const Tensor back = read_tensor(ss);
    REQUIRE(back.shape() == t.shape());
    for (std::int64_t i = 0; i < t.size(); ++i) REQUIRE(back[i] == t[i]);
  }
}

TEST_CASE("truncated binary tensor input errors") {
  Tensor t({2, 2}, {1, 2, 3, 4});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string full = ss.str();
  for (const std::size_t cut : {std::size_t{2}, std::size_t{10}, full.size() - 3}) {
    std::stringstream truncated(full.substr(0, cut));
    REQUIRE_THROWS_AS(read_tensor(truncated), IoError);
  }
}

TEST_CASE("json form round-trips") {
  const Tensor t({2, 2}, {1.5, -2.25, 0.0, 4.0});
  const Tensor back = tensor_from_json(tensor_to_json(t));
  REQUIRE(back.shape() == t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i) REQUIRE(back[i] == t[i]);
}
