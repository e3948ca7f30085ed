#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "modeforge/vmd.hpp"

namespace modeforge {

struct BenchConfig {
  int k_min = 2;
  int k_max = 7;
  int warmup = 10;       // runs per decomposer and k, not timed
  int repetitions = 1;   // timed passes over the frame set
  double k0 = 12.5;
  AdmmConfig admm;
};

void validate(const BenchConfig& c);

struct BenchRow {
  int k = 0;
  double lossless_mean_ms = 0.0;
  double lossless_median_ms = 0.0;
  double admm_mean_ms = 0.0;
  double admm_median_ms = 0.0;
  double speedup_mean = 0.0;    // 1 - t_lossless / t_admm on means
  double speedup_median = 0.0;  // same on medians
  double lossless_error = 0.0;  // mean reconstruction error
  double admm_error = 0.0;
  double admm_iterations = 0.0;  // mean
};

struct BenchReport {
  std::vector<BenchRow> rows;
  Eigen::Index frames = 0;
  Eigen::Index frame_len = 0;
  int warmup = 0;
  int repetitions = 0;
  std::string host;

  const BenchRow& row(int k) const;
};

/// Times both decomposers on one thread. Measurements are interleaved frame by
/// frame across every k and both methods so that slow drifts of the host hit
/// all columns alike. The lossless weights are built once per k, outside the
/// timed region.
BenchReport bench_vmd(const std::vector<IQFrame>& frames, const BenchConfig& config = {});

/// CPU model and compiler, best effort.
std::string host_descriptor();

void write_bench_csv(const std::filesystem::path& path, const BenchReport& report);

}  // namespace modeforge
