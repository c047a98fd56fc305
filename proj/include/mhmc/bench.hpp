#pragma once

#include "mhmc/samplers.hpp"
#include "mhmc/skewflow.hpp"
#include "mhmc/targets.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mhmc::bench {

/// Flat `key = value` file. `#` starts a comment, blank lines are ignored and
/// every key may appear once. Lists are comma separated; matrix rows are
/// separated by `;`. Errors carry `origin:line` context.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& origin = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  /// Adds or replaces a key (command-line overrides). `text` is `key=value`.
  void set(const std::string& text);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key) const;
  long get_int(const std::string& key, long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  Eigen::VectorXd get_vector(const std::string& key) const;
  Eigen::MatrixXd get_matrix(const std::string& key) const;

  /// Directory relative paths in the file are resolved against.
  const std::filesystem::path& base_dir() const { return base_dir_; }

  /// Throws ConfigError naming the first key that no getter has read.
  void reject_unused() const;

  /// Context string `origin:line: field 'key'` for error messages.
  std::string where(const std::string& key) const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  const Entry& entry(const std::string& key) const;

  std::string origin_;
  std::filesystem::path base_dir_;
  std::map<std::string, Entry> entries_;
  mutable std::map<std::string, bool> used_;
};

/// Magnetic term layout. Indices are 1-based, matching the theta_k CSV columns.
///   zero
///   planar(i, j, g)          G[j][i] = g, G[i][j] = -g
///   coupling(r..; c..; g)    G[r][c] = g, G[c][r] = -g for r in rows, c in cols
///   explicit(row; row; ...)  full matrix, rows separated by ';'
struct GSpec {
  enum class Kind { zero, planar, coupling, explicit_matrix };

  Kind kind = Kind::zero;
  int i = 0;
  int j = 0;
  std::vector<int> rows;
  std::vector<int> cols;
  double g = 0.0;
  Eigen::MatrixXd matrix;

  static GSpec parse(const std::string& text);
  /// Throws ConfigError on out-of-range indices or overlapping index sets and
  /// NotAntisymmetric for a bad explicit matrix.
  AntisymmetricMatrix build(int dim) const;
  std::string describe() const;
};

/// An analytic expectation E[f(θ)] used for bias/MCSE reporting.
struct Moment {
  std::string name;  ///< "mean" or "second_moment"
  int coordinate;    ///< 1-based
  double truth;
  std::function<double(const Eigen::VectorXd&)> fn;
};

struct TargetSpec {
  std::string kind;  ///< gaussian, mixture, funnel, banana, fhn
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  int funnel_n = 10;
  double funnel_v_sd = 3.0;
  double banana_b = 0.1;
  double banana_sigma1 = 10.0;
  FhnObservationSet fhn_obs;
  double fhn_dt = 0.01;

  int dim() const;
  TargetDensity build() const;
  /// Known moments; empty for the FitzHugh-Nagumo posterior.
  std::vector<Moment> moments() const;
  /// Whether exact_samples() is available.
  bool has_exact_sampler() const;
  /// n independent draws from the target (n x d).
  Eigen::MatrixXd exact_samples(int n, std::uint64_t seed, std::uint64_t stream) const;
};

struct ExperimentSpec {
  std::string name = "experiment";
  TargetSpec target;
  SamplerKind sampler = SamplerKind::mhmc;
  double epsilon = 0.1;
  int n_leapfrog = 10;
  int n_samples = 1000;
  int burn_in = 0;
  int n_chains = 1;
  std::uint64_t seed = 0;
  GSpec g;
  std::optional<Eigen::MatrixXd> mass_matrix;
  Eigen::VectorXd init;
  int max_lag = 50;
  /// Compare each chain with as many exact draws from the target.
  bool mmd = false;
  std::uint64_t mmd_seed = 0;
  /// Points of the MMD-versus-sample-count curve.
  int mmd_checkpoints = 10;
  int n_traces = 1;
  std::filesystem::path out_dir;

  SamplerConfig sampler_config() const;
};

/// Builds a spec from a parsed config. Relative paths resolve against the
/// config's directory. Throws ConfigError with line and field context.
ExperimentSpec parse_experiment(const ConfigFile& cfg);

struct MomentEstimate {
  std::string name;
  int coordinate;
  double truth;
  double estimate;
  double bias;
  double mcse;
};

struct ExperimentResult {
  std::vector<ChainResult> chains;
  std::vector<Eigen::MatrixXd> positions;  ///< post burn-in, per chain
  double acceptance_rate = 0.0;            ///< exact recount over all records
  std::vector<double> chain_acceptance;
  std::vector<double> autocorr;            ///< averaged over coordinates and chains
  Eigen::VectorXd ess;                     ///< per coordinate, mean over chains
  std::vector<double> chain_min_ess;       ///< min over coordinates, per chain
  double mean_min_ess = 0.0;
  std::vector<MomentEstimate> moments;     ///< empty with fewer than two chains
  std::optional<double> mmd_squared;       ///< mean over chains
  std::optional<double> mmd;               ///< mean over chains of sqrt(MMD²)
  std::vector<std::pair<int, double>> mmd_curve;  ///< (sample count, mean MMD²)
  double wall_seconds = 0.0;               ///< summed over chains
};

/// Runs spec.n_chains chains in parallel (chain k uses stream k of
/// spec.seed) and computes the diagnostics. Results do not depend on the
/// number of worker threads.
ExperimentResult run_experiment(const ExperimentSpec& spec, unsigned max_threads = 0);

/// Writes samples_chain<k>.csv, diagnostics.csv and summary.json to
/// spec.out_dir. CSVs hold no timings so reruns are byte-identical.
void write_experiment(const ExperimentSpec& spec, const ExperimentResult& result);

/// Diagnostics CSV text (`metric,coordinate,lag,value`).
std::string diagnostics_csv(const ExperimentResult& result);

/// Samples CSV text (`iter,accepted,energy_error,g_sign,theta_1..theta_d`).
std::string samples_csv(const ChainResult& chain, int dim);

/// n trajectories of spec.n_leapfrog steps from spec.init, momentum k drawn
/// from stream k of spec.seed, under +G. Each has n_leapfrog + 1 points.
std::vector<std::vector<PhasePoint>> proposal_trace(const ExperimentSpec& spec, int n);

/// Trace CSV text (`step,theta_1..theta_d,p_1..p_d`).
std::string trace_csv(const std::vector<PhasePoint>& trace);

/// Reads a samples CSV back into a ChainResult (timings are zero).
ChainResult read_samples_csv(const std::filesystem::path& path);

/// Diagnostics for chains loaded from disk, with moments from `truth` when
/// given. Throws ConfigError on inconsistent inputs.
ExperimentResult diagnose(const std::vector<ChainResult>& chains, int burn_in, int max_lag,
                          const std::optional<TargetSpec>& truth);

/// Shortest round-trip representation of a double.
std::string format_double(double v);

}  // namespace mhmc::bench
