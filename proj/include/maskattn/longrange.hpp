#pragma once

// Long-range dependency estimators over 1-D series extracted from attention
// feature maps: rescaled-range Hurst exponent, detrended fluctuation
// analysis, power-spectral-density slope, and autocorrelation, plus the
// radix-2 real FFT they build on.

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace maskattn::lr {

struct FitResult {
  double value = 0;  // slope-derived exponent
  double r2 = 0;     // goodness of the log-log fit
  std::vector<double> log_x, log_y;  // fitted points, for plot data
};

// Least-squares slope/intercept fit with r^2.
struct LineFit {
  double slope = 0, intercept = 0, r2 = 0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

// Radix-2 FFT; n must be a power of two (use pad_pow2 first).
void fft(std::vector<std::complex<double>>& a, bool inverse);
std::vector<std::complex<double>> rfft(const std::vector<double>& x);
std::vector<double> irfft(const std::vector<std::complex<double>>& half, int64_t n);
std::vector<double> pad_pow2(const std::vector<double>& x);

// Log-spaced window sizes 16, 32, ..., len/4 (>= 4 required).
std::vector<int64_t> default_windows(int64_t len);

// Classic rescaled-range Hurst estimate.
FitResult hurst_rs(const std::vector<double>& s, const std::vector<int64_t>& windows);

// Detrended fluctuation analysis, order-1 detrending.
FitResult dfa(const std::vector<double>& s, const std::vector<int64_t>& windows);

struct Spectrum {
  std::vector<double> freq;   // cycles/sample
  std::vector<double> power;
};

// Hann-windowed periodogram; beta = negative log-log slope over
// f in [4/n, 0.25].
struct PsdResult {
  Spectrum spectrum;
  FitResult beta;
};
PsdResult psd_beta(const std::vector<double>& s);

// Biased normalized autocorrelation for lags 0..max_lag.
std::vector<double> autocorrelation(const std::vector<double>& s, int64_t max_lag);

enum class SeriesMode { raster_per_channel, channel_mean_raster };

// Flattens a [C,H,W] feature map into series (one per channel, or the
// channel mean). Series shorter than 64 are rejected.
std::vector<std::vector<double>> series_from_featuremap(const float* fmap, int64_t c,
                                                        int64_t h, int64_t w, SeriesMode mode);

struct ModuleStats {
  std::string module;
  int64_t n_series = 0;
  double hurst_mean = 0, hurst_std = 0;
  double dfa_mean = 0, dfa_std = 0;
  double beta_mean = 0, beta_std = 0;
  double hurst_r2 = 0, dfa_r2 = 0;  // mean fit quality
};

// Analyzes every .tns feature dump under dir (filenames <module>_*.tns),
// writes report.csv (one row per module) plus plot data (acf/dfa/psd CSVs)
// under out_dir, and returns the per-module rows.
std::vector<ModuleStats> analyze_dump_dir(const std::string& dir, const std::string& out_dir,
                                          SeriesMode mode, int64_t max_lag);

}  // namespace maskattn::lr
