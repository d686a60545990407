#pragma once

// Data sources: synthetic generators, discrete tabular sources and
// file-backed samples, plus the distortion metrics. A source draw is a pure
// function of (seed, index), so any index range can be re-materialized
// bit-exactly and independent workers can read disjoint ranges.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rd/common.hpp"
#include "rd/tensor.hpp"

namespace rd::src {

enum class Metric { SquaredError, Hamming };

inline const char* metric_name(Metric m) {
  return m == Metric::SquaredError ? "squared-error" : "hamming";
}

// Total squared error over the whole vector, or Hamming count of unequal
// coordinates. Rates reported against these distortions are per sample
// vector, not per dimension.
inline double distortion(Metric metric, const double* x, const double* xhat,
                         std::size_t n) {
  double d = 0.0;
  if (metric == Metric::SquaredError) {
    for (std::size_t i = 0; i < n; ++i) {
      double diff = x[i] - xhat[i];
      d += diff * diff;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      if (x[i] != xhat[i]) d += 1.0;
  }
  return d;
}

inline double distortion(Metric metric, const std::vector<double>& x,
                         const std::vector<double>& xhat) {
  if (x.size() != xhat.size())
    throw ShapeError("distortion: dimension mismatch (" +
                     std::to_string(x.size()) + " vs " +
                     std::to_string(xhat.size()) + ")");
  return distortion(metric, x.data(), xhat.data(), x.size());
}

struct SampleBatch {
  Tensor data;  // count x n
  std::uint64_t seed = 0;
  std::uint64_t first_index = 0;
};

enum class SourceKind {
  DiagonalGaussian,
  StandardGaussian,
  Banana2D,
  LinearLift,
  DiscreteTabular,
  FileSamples,
};

class Source {
 public:
  static Source diagonal_gaussian(std::vector<double> means,
                                  std::vector<double> variances,
                                  std::uint64_t seed) {
    if (means.empty() || means.size() != variances.size())
      throw UsageError("diagonal_gaussian: means/variances size mismatch");
    for (double v : variances)
      if (!(v > 0.0))
        throw UsageError("diagonal_gaussian: variances must be positive");
    Source s(SourceKind::DiagonalGaussian, means.size(), seed);
    s.means_ = std::move(means);
    s.variances_ = std::move(variances);
    return s;
  }

  static Source standard_gaussian(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw UsageError("standard_gaussian: n must be >= 1");
    Source s(SourceKind::StandardGaussian, n, seed);
    s.means_.assign(n, 0.0);
    s.variances_.assign(n, 1.0);
    return s;
  }

  // Classical banana warp: (z1, z2) ~ N(0, diag(spread^2, 1)),
  // output (z1, z2 + b z1^2 - b spread^2). b = 0 degenerates to the
  // underlying diagonal Gaussian.
  static Source banana2d(double curvature, double spread, std::uint64_t seed) {
    if (!(spread > 0.0)) throw UsageError("banana2d: spread must be positive");
    Source s(SourceKind::Banana2D, 2, seed);
    s.banana_b_ = curvature;
    s.banana_sigma_ = spread;
    return s;
  }

  // x = A z with z from the inner source; A is n x d with full column rank.
  static Source linear_lift(Source inner, Tensor lift, std::uint64_t seed) {
    if (lift.rank() != 2) throw UsageError("linear_lift: matrix must be 2-D");
    std::size_t n = lift.rows(), d = lift.cols();
    if (d != inner.dim())
      throw UsageError("linear_lift: matrix columns must match inner dim");
    if (d > n) throw UsageError("linear_lift: need d <= n");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        A(lift.data.data(), static_cast<Eigen::Index>(n),
          static_cast<Eigen::Index>(d));
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (static_cast<std::size_t>(lu.rank()) != d)
      throw UsageError("linear_lift: matrix does not have full column rank");
    Source s(SourceKind::LinearLift, n, seed);
    s.inner_ = std::make_shared<Source>(std::move(inner));
    s.lift_ = std::move(lift);
    return s;
  }

  static Source discrete_tabular(std::vector<std::vector<double>> support,
                                 std::vector<double> pmf, std::uint64_t seed) {
    if (support.empty() || support.size() != pmf.size())
      throw UsageError("discrete_tabular: support/pmf size mismatch");
    std::size_t n = support.front().size();
    if (n == 0) throw UsageError("discrete_tabular: empty support points");
    double total = 0.0;
    for (double p : pmf) {
      if (p < 0.0) throw UsageError("discrete_tabular: negative pmf entry");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw UsageError("discrete_tabular: pmf must sum to 1 within 1e-12");
    for (const auto& pt : support)
      if (pt.size() != n)
        throw UsageError("discrete_tabular: ragged support points");
    Source s(SourceKind::DiscreteTabular, n, seed);
    s.support_ = std::move(support);
    s.pmf_ = std::move(pmf);
    s.cdf_.resize(s.pmf_.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < s.pmf_.size(); ++i) {
      acc += s.pmf_[i];
      s.cdf_[i] = acc;
    }
    s.cdf_.back() = 1.0;
    return s;
  }

  static Source bernoulli(double p, std::uint64_t seed) {
    if (!(p >= 0.0 && p <= 1.0)) throw UsageError("bernoulli: p must be in [0,1]");
    return discrete_tabular({{0.0}, {1.0}}, {1.0 - p, p}, seed);
  }

  static Source from_samples(Tensor rows, std::uint64_t seed,
                             std::string origin = "memory") {
    if (rows.rank() != 2 || rows.rows() == 0)
      throw UsageError("from_samples: want a non-empty [count,n] matrix");
    if (!rows.finite())
      throw UsageError("from_samples: non-finite sample values in " + origin);
    Source s(SourceKind::FileSamples, rows.cols(), seed);
    s.file_rows_ = std::move(rows);
    s.file_origin_ = std::move(origin);
    return s;
  }

  static Source from_csv(const std::string& path, std::size_t dim, bool header,
                         std::uint64_t seed);
  static Source from_rds(const std::string& path, std::uint64_t seed);

  SourceKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  void reseed(std::uint64_t seed) { seed_ = seed; }
  Source with_seed(std::uint64_t seed) const {
    Source s = *this;
    s.seed_ = seed;
    s.cursor_ = 0;
    return s;
  }

  std::uint64_t cursor() const { return cursor_; }
  void reset_cursor() { cursor_ = 0; }

  // Draws `count` fresh rows and advances the cursor.
  SampleBatch sample(std::size_t count) {
    if (count == 0) throw UsageError("sample: count must be >= 1");
    SampleBatch b = sample_at(cursor_, count);
    cursor_ += count;
    return b;
  }

  // Random access: re-drawing the same index range reproduces bits exactly.
  SampleBatch sample_at(std::uint64_t first, std::size_t count) const {
    SampleBatch b;
    b.seed = seed_;
    b.first_index = first;
    b.data = Tensor::zeros({count, dim_});
    if (kind_ == SourceKind::FileSamples) {
      std::uint64_t avail = file_rows_.rows();
      if (first + count > avail)
        throw IoError("sample: " + file_origin_ + " exhausted, requested rows [" +
                      std::to_string(first) + "," +
                      std::to_string(first + count) + ") but only " +
                      std::to_string(avail) + " rows available");
    }
    for (std::size_t i = 0; i < count; ++i)
      draw_into(first + i, b.data.row_ptr(i));
    return b;
  }

  bool is_discrete() const { return kind_ == SourceKind::DiscreteTabular; }
  const std::vector<std::vector<double>>& support() const {
    if (!is_discrete()) throw UsageError("support: source is not tabular");
    return support_;
  }
  const std::vector<double>& pmf() const {
    if (!is_discrete()) throw UsageError("pmf: source is not tabular");
    return pmf_;
  }

  bool is_diagonal_gaussian() const {
    return kind_ == SourceKind::DiagonalGaussian ||
           kind_ == SourceKind::StandardGaussian;
  }
  const std::vector<double>& variances() const {
    if (!is_diagonal_gaussian())
      throw UsageError("variances: source is not a diagonal Gaussian");
    return variances_;
  }
  const std::vector<double>& means() const {
    if (!is_diagonal_gaussian())
      throw UsageError("means: source is not a diagonal Gaussian");
    return means_;
  }

  const Source& inner() const {
    if (kind_ != SourceKind::LinearLift)
      throw UsageError("inner: source is not a linear lift");
    return *inner_;
  }

  std::string describe() const {
    std::ostringstream os;
    switch (kind_) {
      case SourceKind::DiagonalGaussian: {
        os << "diagonal-gaussian(n=" << dim_ << ")";
        break;
      }
      case SourceKind::StandardGaussian:
        os << "std-gaussian(n=" << dim_ << ")";
        break;
      case SourceKind::Banana2D:
        os << "banana2d(b=" << banana_b_ << ",sigma=" << banana_sigma_ << ")";
        break;
      case SourceKind::LinearLift:
        os << "linear-lift(n=" << dim_ << "," << inner_->describe() << ")";
        break;
      case SourceKind::DiscreteTabular:
        os << "tabular(states=" << pmf_.size() << ",n=" << dim_ << ")";
        break;
      case SourceKind::FileSamples:
        os << "samples(" << file_origin_ << ",rows=" << file_rows_.rows()
           << ",n=" << dim_ << ")";
        break;
    }
    return os.str();
  }

 private:
  Source(SourceKind kind, std::size_t dim, std::uint64_t seed)
      : kind_(kind), dim_(dim), seed_(seed) {}

  void draw_into(std::uint64_t index, double* out) const {
    switch (kind_) {
      case SourceKind::DiagonalGaussian:
      case SourceKind::StandardGaussian: {
        Rng rng(Rng::derive(seed_, index));
        for (std::size_t j = 0; j < dim_; ++j)
          out[j] = means_[j] + std::sqrt(variances_[j]) * rng.normal();
        return;
      }
      case SourceKind::Banana2D: {
        Rng rng(Rng::derive(seed_, index));
        double z1 = banana_sigma_ * rng.normal();
        double z2 = rng.normal();
        out[0] = z1;
        out[1] = z2 + banana_b_ * z1 * z1 -
                 banana_b_ * banana_sigma_ * banana_sigma_;
        return;
      }
      case SourceKind::LinearLift: {
        std::vector<double> z(inner_->dim());
        inner_->draw_into(index, z.data());
        for (std::size_t i = 0; i < dim_; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < z.size(); ++j)
            acc += lift_.at(i, j) * z[j];
          out[i] = acc;
        }
        return;
      }
      case SourceKind::DiscreteTabular: {
        Rng rng(Rng::derive(seed_, index));
        double u = rng.uniform();
        std::size_t lo = 0, hi = cdf_.size() - 1;
        while (lo < hi) {
          std::size_t mid = (lo + hi) / 2;
          if (u < cdf_[mid])
            hi = mid;
          else
            lo = mid + 1;
        }
        const auto& pt = support_[lo];
        for (std::size_t j = 0; j < dim_; ++j) out[j] = pt[j];
        return;
      }
      case SourceKind::FileSamples: {
        const double* row = file_rows_.row_ptr(index);
        for (std::size_t j = 0; j < dim_; ++j) out[j] = row[j];
        return;
      }
    }
  }

  SourceKind kind_;
  std::size_t dim_;
  std::uint64_t seed_;
  std::uint64_t cursor_ = 0;

  std::vector<double> means_, variances_;
  double banana_b_ = 0.0, banana_sigma_ = 1.0;
  std::shared_ptr<const Source> inner_;
  Tensor lift_;
  std::vector<std::vector<double>> support_;
  std::vector<double> pmf_, cdf_;
  Tensor file_rows_;
  std::string file_origin_;
};

// Per-dimension mean ~ U[-0.5, 0.5], variance ~ U[eps, 2]. The lower clamp
// keeps every rate component nondegenerate.
inline Source random_gaussian_source(std::size_t n, std::uint64_t seed,
                                     double variance_floor = 1e-3) {
  if (n == 0) throw UsageError("random_gaussian_source: n must be >= 1");
  Rng rng(Rng::derive(seed, 0x70617261));  // parameter stream
  std::vector<double> means(n), vars(n);
  for (std::size_t i = 0; i < n; ++i) {
    means[i] = rng.uniform(-0.5, 0.5);
    vars[i] = rng.uniform(variance_floor, 2.0);
  }
  return Source::diagonal_gaussian(std::move(means), std::move(vars), seed);
}

// Glorot-normal n x d lift matrix; redrawn until full column rank (a measure
// zero failure, but cheap to guard).
inline Tensor random_lift_matrix(std::size_t n, std::size_t d,
                                 std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0x6c696674));
  double sd = std::sqrt(2.0 / static_cast<double>(n + d));
  Tensor a = Tensor::zeros({n, d});
  for (double& x : a.data) x = sd * rng.normal();
  return a;
}

// ---------------------------------------------------------------------------
// Sample file formats.
// CSV: one sample per row, no header by default.
// RDS1 binary: 16-byte header (magic "RDS1", u32 n, u64 count), then
// count*n little-endian float64 values.
// ---------------------------------------------------------------------------

inline void write_csv(const std::string& path, const Tensor& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("write_csv: cannot open '" + path + "'");
  os.precision(17);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    for (std::size_t j = 0; j < rows.cols(); ++j)
      os << (j ? "," : "") << rows.at(i, j);
    os << "\n";
  }
}

inline Tensor read_csv(const std::string& path, std::size_t dim, bool header) {
  std::ifstream is(path);
  if (!is) throw IoError("read_csv: cannot open '" + path + "'");
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (header && lineno == 1) continue;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t got = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError("read_csv: bad number '" + cell + "' at " + path + ":" +
                      std::to_string(lineno));
      }
      ++got;
    }
    if (got != dim)
      throw IoError("read_csv: row " + std::to_string(lineno) + " has " +
                    std::to_string(got) + " columns, expected " +
                    std::to_string(dim));
  }
  if (values.empty()) throw IoError("read_csv: no samples in '" + path + "'");
  std::size_t count = values.size() / dim;
  return Tensor({count, dim}, std::move(values));
}

inline constexpr char kRdsMagic[4] = {'R', 'D', 'S', '1'};

inline void write_rds(const std::string& path, const Tensor& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_rds: cannot open '" + path + "'");
  os.write(kRdsMagic, 4);
  std::uint32_t n = static_cast<std::uint32_t>(rows.cols());
  std::uint64_t count = rows.rows();
  os.write(reinterpret_cast<const char*>(&n), 4);
  os.write(reinterpret_cast<const char*>(&count), 8);
  os.write(reinterpret_cast<const char*>(rows.data.data()),
           static_cast<std::streamsize>(rows.numel() * sizeof(double)));
}

inline Tensor read_rds(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_rds: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kRdsMagic, 4) != 0)
    throw IoError("read_rds: bad magic in '" + path + "'");
  std::uint32_t n = 0;
  std::uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&n), 4);
  is.read(reinterpret_cast<char*>(&count), 8);
  if (!is || n == 0 || count == 0)
    throw IoError("read_rds: bad header in '" + path + "'");
  Tensor rows = Tensor::zeros({static_cast<std::size_t>(count), n});
  is.read(reinterpret_cast<char*>(rows.data.data()),
          static_cast<std::streamsize>(rows.numel() * sizeof(double)));
  if (!is) throw IoError("read_rds: truncated data in '" + path + "'");
  return rows;
}

inline Source Source::from_csv(const std::string& path, std::size_t dim,
                               bool header, std::uint64_t seed) {
  return from_samples(read_csv(path, dim, header), seed, path);
}

inline Source Source::from_rds(const std::string& path, std::uint64_t seed) {
  return from_samples(read_rds(path), seed, path);
}

}  // namespace rd::src
