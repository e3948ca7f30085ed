#include "modeforge/bench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "modeforge/openset.hpp"

namespace modeforge {

void validate(const BenchConfig& c) {
  if (c.k_min < 2 || c.k_max > 7 || c.k_min > c.k_max) {
    throw std::invalid_argument("benchmark k range must lie within 2..7 with k_min <= k_max");
  }
  if (c.warmup < 0 || c.repetitions < 1) throw std::invalid_argument("warm-up must be >= 0 and repetitions >= 1");
  validate(c.admm);
}

const BenchRow& BenchReport::row(int k) const {
  for (const auto& r : rows) {
    if (r.k == k) return r;
  }
  throw std::out_of_range("no benchmark row for k = " + std::to_string(k));
}

namespace {

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

template <typename F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

BenchReport bench_vmd(const std::vector<IQFrame>& frames, const BenchConfig& config) {
  validate(config);
  if (frames.size() < 100) {
    throw std::invalid_argument("benchmark needs at least 100 frames, got " + std::to_string(frames.size()));
  }
  const Eigen::Index len = frames.front().size();
  for (const auto& f : frames) {
    validate(f);
    if (f.size() != len) throw std::invalid_argument("benchmark frames must share one length");
  }

  std::vector<int> ks;
  for (int k = config.k_min; k <= config.k_max; ++k) ks.push_back(k);
  std::vector<LosslessVmd> solvers;
  for (int k : ks) solvers.emplace_back(select_centers(k, config.k0, len), len);

  const std::size_t nk = ks.size();
  std::vector<std::vector<double>> t_loss(nk), t_admm(nk);
  std::vector<double> err_loss(nk, 0.0), err_admm(nk, 0.0), iters(nk, 0.0);
  ModeSet scratch;
  volatile double sink = 0.0;

  for (std::size_t j = 0; j < nk; ++j) {
    for (int w = 0; w < config.warmup; ++w) {
      const IQFrame& f = frames[static_cast<std::size_t>(w) % frames.size()];
      solvers[j].compute(f, scratch);
      sink = sink + admm_vmd(f, ks[j], config.admm).iterations;
    }
  }
  for (int rep = 0; rep < config.repetitions; ++rep) {
    for (const IQFrame& f : frames) {
      for (std::size_t j = 0; j < nk; ++j) {
        t_loss[j].push_back(time_ms([&] { solvers[j].compute(f, scratch); }));
        if (rep == 0) err_loss[j] += reconstruction_error(scratch, f);
        AdmmResult res;
        t_admm[j].push_back(time_ms([&] { res = admm_vmd(f, ks[j], config.admm); }));
        if (rep == 0) {
          err_admm[j] += reconstruction_error(res.modes, f);
          iters[j] += res.iterations;
        }
      }
    }
  }

  BenchReport report;
  report.frames = static_cast<Eigen::Index>(frames.size());
  report.frame_len = len;
  report.warmup = config.warmup;
  report.repetitions = config.repetitions;
  report.host = host_descriptor();
  const auto n = static_cast<double>(frames.size());
  for (std::size_t j = 0; j < nk; ++j) {
    BenchRow r;
    r.k = ks[j];
    r.lossless_mean_ms = mean(t_loss[j]);
    r.lossless_median_ms = median(t_loss[j]);
    r.admm_mean_ms = mean(t_admm[j]);
    r.admm_median_ms = median(t_admm[j]);
    r.speedup_mean = 1.0 - r.lossless_mean_ms / r.admm_mean_ms;
    r.speedup_median = 1.0 - r.lossless_median_ms / r.admm_median_ms;
    r.lossless_error = err_loss[j] / n;
    r.admm_error = err_admm[j] / n;
    r.admm_iterations = iters[j] / n;
    report.rows.push_back(r);
  }
  return report;
}

std::string host_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
#if defined(__clang__)
  const std::string compiler = "clang " __clang_version__;
#elif defined(__GNUC__)
  const std::string compiler = "gcc " __VERSION__;
#else
  const std::string compiler = "unknown compiler";
#endif
  return cpu + "; " + compiler + "; 1 thread";
}

void write_bench_csv(const std::filesystem::path& path, const BenchReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "k,frames,warmup,repetitions,lossless_mean_ms,lossless_median_ms,admm_mean_ms,admm_median_ms,"
         "speedup_mean,speedup_median,lossless_error,admm_error,admm_iterations\n";
  for (const auto& r : report.rows) {
    out << r.k << ',' << report.frames << ',' << report.warmup << ',' << report.repetitions << ','
        << format_double(r.lossless_mean_ms) << ',' << format_double(r.lossless_median_ms) << ','
        << format_double(r.admm_mean_ms) << ',' << format_double(r.admm_median_ms) << ','
        << format_double(r.speedup_mean) << ',' << format_double(r.speedup_median) << ','
        << format_double(r.lossless_error) << ',' << format_double(r.admm_error) << ','
        << format_double(r.admm_iterations) << '\n';
  }
}

}  // namespace modeforge
