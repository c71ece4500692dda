#ifndef CMDQ_TESTS_TEST_SUPPORT_HPP
#define CMDQ_TESTS_TEST_SUPPORT_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "cmdq/cmdq.hpp"

namespace cmdq::testing {

inline IntGrid random_codes(std::size_t rows, std::size_t cols, int bits, std::mt19937_64& gen) {
  std::uniform_int_distribution<std::uint32_t> dist(0, (1U << bits) - 1U);
  IntGrid g(rows, cols);
  for (auto& v : g.values()) v = dist(gen);
  return g;
}

/// Random valid QuantizedMatrix with groups of `groupsize` rows.
inline QuantizedMatrix random_quantized(std::size_t rows, std::size_t cols, int bits, int groupsize,
                                        std::mt19937_64& gen) {
  QuantConfig cfg{bits, groupsize, false, 0.01F};
  const std::size_t groups = cfg.group_count(rows);
  std::uniform_real_distribution<float> scale(0.01F, 0.2F);
  QuantizedMatrix q{random_codes(rows, cols, bits, gen),
                    {DenseMatrix(groups, cols), random_codes(groups, cols, bits, gen), {}},
                    bits};
  for (auto& s : q.params.scales.values()) s = round_to_f16(scale(gen));
  q.params.g_idx = detail::make_g_idx(rows, cfg);
  return q;
}

/// x^T x by explicit index sums in f64.
inline DenseMatrix gram_times_two(const DenseMatrix& x) {
  DenseMatrix h(x.cols(), x.cols());
  for (std::size_t i = 0; i < x.cols(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) s += static_cast<double>(x(r, i)) * x(r, j);
      h(i, j) = static_cast<float>(2.0 * s);
    }
  return h;
}

/// sum_o d_o^T H d_o / O, with d = w - approx, via H*D then elementwise product.
inline double brute_force_proxy_loss(const DenseMatrix& w, const DenseMatrix& approx, const DenseMatrix& h) {
  const std::size_t n = w.rows();
  const std::size_t m = w.cols();
  double total = 0.0;
  for (std::size_t o = 0; o < m; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      double hd = 0.0;
      for (std::size_t j = 0; j < n; ++j) hd += static_cast<double>(h(i, j)) * (static_cast<double>(w(j, o)) - approx(j, o));
      total += (static_cast<double>(w(i, o)) - approx(i, o)) * hd;
    }
  }
  return total / static_cast<double>(m);
}

class TempDir {
 public:
  TempDir() {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cmdq-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace cmdq::testing

#endif  // CMDQ_TESTS_TEST_SUPPORT_HPP
