#include "maskattn/longrange.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "maskattn/tns_io.hpp"

namespace fs = std::filesystem;

namespace maskattn::lr {

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::runtime_error("fit_line: need >= 2 points");
  const double n = double(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
    syy += y[i] * y[i];
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0) throw std::runtime_error("fit_line: degenerate abscissae");
  LineFit f;
  f.slope = (n * sxy - sx * sy) / denom;
  f.intercept = (sy - f.slope * sx) / n;
  double ss_res = 0;
  const double ss_tot = syy - sy * sy / n;
  for (size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return f;
}

void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw std::runtime_error("fft: length must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * 3.14159265358979323846 / double(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k], v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& z : a) z /= double(n);
}

std::vector<std::complex<double>> rfft(const std::vector<double>& x) {
  std::vector<std::complex<double>> a(x.begin(), x.end());
  fft(a, false);
  a.resize(x.size() / 2 + 1);
  return a;
}

std::vector<double> irfft(const std::vector<std::complex<double>>& half, int64_t n) {
  if (int64_t(half.size()) != n / 2 + 1) throw std::runtime_error("irfft: spectrum length mismatch");
  std::vector<std::complex<double>> a(static_cast<size_t>(n));
  for (int64_t k = 0; k <= n / 2; ++k) a[size_t(k)] = half[size_t(k)];
  for (int64_t k = n / 2 + 1; k < n; ++k) a[size_t(k)] = std::conj(half[size_t(n - k)]);
  fft(a, true);
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] = a[size_t(i)].real();
  return out;
}

std::vector<double> pad_pow2(const std::vector<double>& x) {
  size_t n = 1;
  while (n < x.size()) n <<= 1;
  std::vector<double> out = x;
  out.resize(n, 0.0);
  return out;
}

std::vector<int64_t> default_windows(int64_t len) {
  std::vector<int64_t> w;
  for (int64_t n = 16; n <= len / 4; n *= 2) w.push_back(n);
  return w;
}

namespace {

double variance(const std::vector<double>& s, double& mean_out) {
  double mu = 0;
  for (double v : s) mu += v;
  mu /= double(s.size());
  double var = 0;
  for (double v : s) var += (v - mu) * (v - mu);
  mean_out = mu;
  return var / double(s.size());
}

void check_series(const std::vector<double>& s, const std::vector<int64_t>& windows,
                  const char* who) {
  if (int64_t(s.size()) < 64) throw std::runtime_error(std::string(who) + ": series shorter than 64");
  if (windows.size() < 4) throw std::runtime_error(std::string(who) + ": need >= 4 window sizes");
  double mu;
  if (variance(s, mu) == 0) throw std::runtime_error(std::string(who) + ": zero-variance series");
}

}  // namespace

FitResult hurst_rs(const std::vector<double>& s, const std::vector<int64_t>& windows) {
  check_series(s, windows, "hurst_rs");
  FitResult out;
  for (int64_t nw : windows) {
    const int64_t segs = int64_t(s.size()) / nw;
    double rs_sum = 0;
    int64_t rs_count = 0;
    for (int64_t g = 0; g < segs; ++g) {
      const double* seg = s.data() + g * nw;
      double mu = 0;
      for (int64_t i = 0; i < nw; ++i) mu += seg[i];
      mu /= double(nw);
      double var = 0, cum = 0, lo = 0, hi = 0;
      for (int64_t i = 0; i < nw; ++i) {
        const double d = seg[i] - mu;
        var += d * d;
        cum += d;
        lo = std::min(lo, cum);
        hi = std::max(hi, cum);
      }
      const double sd = std::sqrt(var / double(nw));
      if (sd > 0) {
        rs_sum += (hi - lo) / sd;
        ++rs_count;
      }
    }
    if (rs_count == 0) continue;
    out.log_x.push_back(std::log(double(nw)));
    out.log_y.push_back(std::log(rs_sum / double(rs_count)));
  }
  const LineFit f = fit_line(out.log_x, out.log_y);
  out.value = f.slope;
  out.r2 = f.r2;
  return out;
}

FitResult dfa(const std::vector<double>& s, const std::vector<int64_t>& windows) {
  check_series(s, windows, "dfa");
  // step 1: integrate the mean-removed series
  double mu = 0;
  for (double v : s) mu += v;
  mu /= double(s.size());
  std::vector<double> y(s.size());
  double cum = 0;
  for (size_t i = 0; i < s.size(); ++i) y[i] = cum += s[i] - mu;

  FitResult out;
  for (int64_t nw : windows) {
    const int64_t segs = int64_t(y.size()) / nw;
    double sq = 0;
    for (int64_t g = 0; g < segs; ++g) {
      // steps 2-3: per-segment linear detrend
      const double* seg = y.data() + g * nw;
      double sx = 0, sy = 0, sxx = 0, sxy = 0;
      for (int64_t i = 0; i < nw; ++i) {
        sx += double(i);
        sy += seg[i];
        sxx += double(i) * double(i);
        sxy += double(i) * seg[i];
      }
      const double denom = double(nw) * sxx - sx * sx;
      const double slope = (double(nw) * sxy - sx * sy) / denom;
      const double icept = (sy - slope * sx) / double(nw);
      for (int64_t i = 0; i < nw; ++i) {
        const double e = seg[i] - (slope * double(i) + icept);
        sq += e * e;
      }
    }
    // step 4: RMS fluctuation
    const double fl = std::sqrt(sq / double(segs * nw));
    if (fl <= 0) throw std::runtime_error("dfa: degenerate (perfectly linear) series");
    out.log_x.push_back(std::log(double(nw)));
    out.log_y.push_back(std::log(fl));
  }
  // step 5: scaling exponent from the log-log slope
  const LineFit f = fit_line(out.log_x, out.log_y);
  out.value = f.slope;
  out.r2 = f.r2;
  return out;
}

PsdResult psd_beta(const std::vector<double>& s) {
  if (int64_t(s.size()) < 128) throw std::runtime_error("psd_beta: series shorter than 128");
  double mu;
  if (variance(s, mu) == 0) throw std::runtime_error("psd_beta: zero-variance series");
  const size_t n = s.size();
  std::vector<double> w(n);
  for (size_t i = 0; i < n; ++i) {
    const double hann = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * double(i) / double(n - 1));
    w[i] = (s[i] - mu) * hann;
  }
  const std::vector<double> padded = pad_pow2(w);
  const auto spec = rfft(padded);
  PsdResult out;
  const double np = double(padded.size());
  for (size_t k = 0; k < spec.size(); ++k) {
    out.spectrum.freq.push_back(double(k) / np);
    out.spectrum.power.push_back(std::norm(spec[k]) / np);
  }
  const double flo = 4.0 / double(n), fhi = 0.25;
  for (size_t k = 1; k < spec.size(); ++k) {
    const double f = out.spectrum.freq[k];
    if (f >= flo && f <= fhi && out.spectrum.power[k] > 0) {
      out.beta.log_x.push_back(std::log(f));
      out.beta.log_y.push_back(std::log(out.spectrum.power[k]));
    }
  }
  const LineFit f = fit_line(out.beta.log_x, out.beta.log_y);
  out.beta.value = -f.slope;
  out.beta.r2 = f.r2;
  return out;
}

std::vector<double> autocorrelation(const std::vector<double>& s, int64_t max_lag) {
  const int64_t n = int64_t(s.size());
  if (max_lag >= n / 2) throw std::runtime_error("autocorrelation: max_lag must be < n/2");
  double mu;
  const double var = variance(s, mu);
  if (var == 0) throw std::runtime_error("autocorrelation: zero-variance series");
  std::vector<double> acf(size_t(max_lag + 1));
  const double denom = var * double(n);
  for (int64_t k = 0; k <= max_lag; ++k) {
    double sum = 0;
    for (int64_t t = 0; t + k < n; ++t) sum += (s[size_t(t)] - mu) * (s[size_t(t + k)] - mu);
    acf[size_t(k)] = sum / denom;
  }
  return acf;
}

std::vector<std::vector<double>> series_from_featuremap(const float* fmap, int64_t c,
                                                        int64_t h, int64_t w, SeriesMode mode) {
  const int64_t hw = h * w;
  if (hw < 64) throw std::runtime_error("series_from_featuremap: series shorter than 64");
  std::vector<std::vector<double>> out;
  if (mode == SeriesMode::raster_per_channel) {
    for (int64_t ch = 0; ch < c; ++ch)
      out.emplace_back(fmap + ch * hw, fmap + (ch + 1) * hw);
  } else {
    std::vector<double> m(size_t(hw), 0.0);
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t p = 0; p < hw; ++p) m[size_t(p)] += double(fmap[ch * hw + p]);
    for (double& v : m) v /= double(c);
    out.push_back(std::move(m));
  }
  return out;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mu = 0;
  for (double x : v) mu += x;
  mu /= double(v.size());
  double var = 0;
  for (double x : v) var += (x - mu) * (x - mu);
  return {mu, std::sqrt(var / double(v.size()))};
}

}  // namespace

std::vector<ModuleStats> analyze_dump_dir(const std::string& dir, const std::string& out_dir,
                                          SeriesMode mode, int64_t max_lag) {
  if (!fs::is_directory(dir)) throw std::runtime_error(dir + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".tns") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error(dir + ": no .tns feature dumps found");
  fs::create_directories(out_dir);

  struct Acc {
    std::vector<double> hurst, dfa_a, beta, hr2, dr2;
  };
  std::map<std::string, Acc> by_module;
  bool plotted = false;
  for (const fs::path& f : files) {
    const std::string stem = f.stem().string();
    const std::string module = stem.substr(0, stem.find('_'));
    tns::TnsData t = tns::read(f.string());
    if (t.dtype != tns::Dtype::f32 || t.dims.size() != 3)
      throw std::runtime_error(f.string() + ": expected f32 [C,H,W] feature dump");
    std::vector<std::vector<double>> series;
    try {
      series = series_from_featuremap(t.as_f32(), t.dims[0], t.dims[1], t.dims[2], mode);
    } catch (const std::exception&) {
      continue;  // dump too small for exponent estimation
    }
    Acc& acc = by_module[module];
    for (const auto& s : series) {
      const auto windows = default_windows(int64_t(s.size()));
      FitResult h, d, b;
      try {
        h = hurst_rs(s, windows);
        d = dfa(s, windows);
        b = psd_beta(s).beta;
      } catch (const std::exception&) {
        continue;  // constant/degenerate channel: skipped, not fabricated
      }
      acc.hurst.push_back(h.value);
      acc.dfa_a.push_back(d.value);
      acc.beta.push_back(b.value);
      acc.hr2.push_back(h.r2);
      acc.dr2.push_back(d.r2);
      if (!plotted) {
        // plot data from the first analyzable series
        std::ofstream fa(out_dir + "/acf.csv");
        fa << "lag,acf\n";
        const auto acf = autocorrelation(s, std::min<int64_t>(max_lag, int64_t(s.size()) / 2 - 1));
        for (size_t k = 0; k < acf.size(); ++k) fa << k << "," << acf[k] << "\n";
        std::ofstream fd(out_dir + "/dfa_loglog.csv");
        fd << "log_n,log_F\n";
        for (size_t i = 0; i < d.log_x.size(); ++i) fd << d.log_x[i] << "," << d.log_y[i] << "\n";
        std::ofstream fp(out_dir + "/psd_loglog.csv");
        fp << "log_f,log_S\n";
        for (size_t i = 0; i < b.log_x.size(); ++i) fp << b.log_x[i] << "," << b.log_y[i] << "\n";
        plotted = true;
      }
    }
  }

  std::vector<ModuleStats> rows;
  std::ofstream rep(out_dir + "/report.csv");
  rep << "module,hurst_mean,hurst_std,dfa_mean,dfa_std,psd_beta_mean,psd_beta_std,"
         "hurst_r2,dfa_r2,n_series\n";
  for (auto& [module, acc] : by_module) {
    if (acc.hurst.empty()) continue;
    ModuleStats r;
    r.module = module;
    r.n_series = int64_t(acc.hurst.size());
    std::tie(r.hurst_mean, r.hurst_std) = mean_std(acc.hurst);
    std::tie(r.dfa_mean, r.dfa_std) = mean_std(acc.dfa_a);
    std::tie(r.beta_mean, r.beta_std) = mean_std(acc.beta);
    r.hurst_r2 = mean_std(acc.hr2).first;
    r.dfa_r2 = mean_std(acc.dr2).first;
    rep << r.module << "," << r.hurst_mean << "," << r.hurst_std << "," << r.dfa_mean << ","
        << r.dfa_std << "," << r.beta_mean << "," << r.beta_std << "," << r.hurst_r2 << ","
        << r.dfa_r2 << "," << r.n_series << "\n";
    rows.push_back(std::move(r));
  }
  if (!rep) throw std::runtime_error(out_dir + "/report.csv: write failed");
  if (rows.empty()) throw std::runtime_error(dir + ": no analyzable series found");
  return rows;
}

}  // namespace maskattn::lr
