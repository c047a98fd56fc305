#include "mhmc/bench.hpp"

#include "mhmc/diagnostics.hpp"
#include "mhmc/errors.hpp"
#include "mhmc/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

namespace mhmc::bench {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::optional<double> to_double(const std::string& s) {
  const std::string t = trim(s);
  if (t == "inf" || t == "+inf") return std::numeric_limits<double>::infinity();
  if (t == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) return std::nullopt;
  return v;
}

std::optional<long> to_long(const std::string& s) {
  const std::string t = trim(s);
  long v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) return std::nullopt;
  return v;
}

std::vector<double> parse_numbers(const std::string& s, const std::string& context) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) {
    const auto v = to_double(part);
    if (!v) throw ConfigError(context + ": expected a number, got '" + part + "'");
    out.push_back(*v);
  }
  return out;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// ConfigFile -----------------------------------------------------------------

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.entries_.count(key)) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    cfg.entries_[key] = {value, lineno};
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ConfigFile cfg = parse(ss.str(), path.string());
  cfg.base_dir_ = path.parent_path();
  return cfg;
}

void ConfigFile::set(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + text + "' is not key=value");
  const std::string key = trim(text.substr(0, eq));
  if (key.empty()) throw ConfigError("override '" + text + "' has an empty key");
  entries_[key] = {trim(text.substr(eq + 1)), 0};
}

bool ConfigFile::has(const std::string& key) const { return entries_.count(key) > 0; }

std::string ConfigFile::where(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return origin_ + ": field '" + key + "'";
  return origin_ + ":" + std::to_string(it->second.line) + ": field '" + key + "'";
}

const ConfigFile::Entry& ConfigFile::entry(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError(origin_ + ": missing required field '" + key + "'");
  used_[key] = true;
  return it->second;
}

std::string ConfigFile::get_string(const std::string& key) const { return entry(key).value; }

std::string ConfigFile::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

double ConfigFile::get_double(const std::string& key) const {
  const auto v = to_double(entry(key).value);
  if (!v) throw ConfigError(where(key) + ": expected a number");
  return *v;
}

double ConfigFile::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

long ConfigFile::get_int(const std::string& key) const {
  const auto v = to_long(entry(key).value);
  if (!v) throw ConfigError(where(key) + ": expected an integer");
  return *v;
}

long ConfigFile::get_int(const std::string& key, long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

std::uint64_t ConfigFile::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) return fallback;
  const std::string t = trim(entry(key).value);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError(where(key) + ": expected a nonnegative integer");
  }
  return v;
}

Eigen::VectorXd ConfigFile::get_vector(const std::string& key) const {
  const auto nums = parse_numbers(entry(key).value, where(key));
  return Eigen::Map<const Eigen::VectorXd>(nums.data(), static_cast<Eigen::Index>(nums.size()));
}

Eigen::MatrixXd ConfigFile::get_matrix(const std::string& key) const {
  const auto rows = split(entry(key).value, ';');
  std::vector<std::vector<double>> data;
  for (const auto& r : rows) data.push_back(parse_numbers(r, where(key)));
  const auto n = static_cast<Eigen::Index>(data.size());
  const auto m = n ? static_cast<Eigen::Index>(data[0].size()) : 0;
  Eigen::MatrixXd out(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(data[static_cast<std::size_t>(i)].size()) != m) {
      throw ConfigError(where(key) + ": matrix rows differ in length");
    }
    for (Eigen::Index j = 0; j < m; ++j) out(i, j) = data[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return out;
}

void ConfigFile::reject_unused() const {
  for (const auto& [key, e] : entries_) {
    if (!used_.count(key)) throw ConfigError(where(key) + ": unknown field");
  }
}

// GSpec ----------------------------------------------------------------------

namespace {

// Splits "name(args)" into name and args.
std::pair<std::string, std::string> call_syntax(const std::string& text) {
  const std::string t = trim(text);
  const auto open = t.find('(');
  if (open == std::string::npos) return {t, ""};
  if (t.back() != ')') throw ConfigError("g: missing ')' in '" + t + "'");
  return {trim(t.substr(0, open)), t.substr(open + 1, t.size() - open - 2)};
}

std::vector<int> parse_indices(const std::string& s) {
  std::vector<int> out;
  for (const auto& part : split(s, ',')) {
    const auto dash = part.find('-', 1);
    if (dash != std::string::npos) {
      const auto lo = to_long(part.substr(0, dash)), hi = to_long(part.substr(dash + 1));
      if (!lo || !hi || *hi < *lo) throw ConfigError("g: bad index range '" + part + "'");
      for (long k = *lo; k <= *hi; ++k) out.push_back(static_cast<int>(k));
    } else {
      const auto v = to_long(part);
      if (!v) throw ConfigError("g: bad index '" + part + "'");
      out.push_back(static_cast<int>(*v));
    }
  }
  return out;
}

}  // namespace

GSpec GSpec::parse(const std::string& text) {
  const auto [name, args] = call_syntax(text);
  GSpec spec;
  if (name == "zero") {
    if (!trim(args).empty()) throw ConfigError("g: zero takes no arguments");
    return spec;
  }
  if (name == "planar") {
    const auto parts = split(args, ',');
    if (parts.size() != 3) throw ConfigError("g: planar expects (i, j, g)");
    const auto i = to_long(parts[0]), j = to_long(parts[1]);
    const auto g = to_double(parts[2]);
    if (!i || !j || !g) throw ConfigError("g: planar expects (i, j, g)");
    spec.kind = Kind::planar;
    spec.i = static_cast<int>(*i);
    spec.j = static_cast<int>(*j);
    spec.g = *g;
    return spec;
  }
  if (name == "coupling") {
    const auto parts = split(args, ';');
    if (parts.size() != 3) throw ConfigError("g: coupling expects (rows; cols; g)");
    const auto g = to_double(parts[2]);
    if (!g) throw ConfigError("g: coupling strength is not a number");
    spec.kind = Kind::coupling;
    spec.rows = parse_indices(parts[0]);
    spec.cols = parse_indices(parts[1]);
    spec.g = *g;
    return spec;
  }
  if (name == "explicit") {
    const auto rows = split(args, ';');
    std::vector<std::vector<double>> data;
    for (const auto& r : rows) data.push_back(parse_numbers(r, "g"));
    const auto n = static_cast<Eigen::Index>(data.size());
    spec.kind = Kind::explicit_matrix;
    spec.matrix.resize(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
      if (static_cast<Eigen::Index>(data[static_cast<std::size_t>(r)].size()) != n) {
        throw ConfigError("g: explicit matrix must be square");
      }
      for (Eigen::Index c = 0; c < n; ++c) spec.matrix(r, c) = data[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
    return spec;
  }
  throw ConfigError("g: unknown layout '" + name + "'");
}

AntisymmetricMatrix GSpec::build(int dim) const {
  auto check = [dim](int k) {
    if (k < 1 || k > dim) {
      throw ConfigError("g: index " + std::to_string(k) + " outside 1.." + std::to_string(dim));
    }
  };
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(dim, dim);
  switch (kind) {
    case Kind::zero:
      return AntisymmetricMatrix::zero(dim);
    case Kind::planar:
      check(i);
      check(j);
      if (i == j) throw ConfigError("g: planar needs two distinct coordinates");
      m(j - 1, i - 1) = g;
      m(i - 1, j - 1) = -g;
      break;
    case Kind::coupling: {
      const std::set<int> rs(rows.begin(), rows.end());
      for (int c : cols) {
        if (rs.count(c)) throw ConfigError("g: coupling rows and cols overlap");
      }
      for (int r : rows) {
        check(r);
        for (int c : cols) {
          check(c);
          m(r - 1, c - 1) = g;
          m(c - 1, r - 1) = -g;
        }
      }
      break;
    }
    case Kind::explicit_matrix:
      if (matrix.rows() != dim) {
        throw ConfigError("g: explicit matrix is " + std::to_string(matrix.rows()) +
                          "x" + std::to_string(matrix.rows()) + " but the target has dimension " +
                          std::to_string(dim));
      }
      m = matrix;
      break;
  }
  return validate_antisymmetric(m);
}

std::string GSpec::describe() const {
  auto join = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + std::to_string(v[k]);
    return s;
  };
  switch (kind) {
    case Kind::zero: return "zero";
    case Kind::planar:
      return "planar(" + std::to_string(i) + "," + std::to_string(j) + "," + format_double(g) + ")";
    case Kind::coupling:
      return "coupling(" + join(rows) + ";" + join(cols) + ";" + format_double(g) + ")";
    case Kind::explicit_matrix: return "explicit";
  }
  return "?";
}

// TargetSpec -----------------------------------------------------------------

int TargetSpec::dim() const {
  if (kind == "gaussian" || kind == "mixture") return static_cast<int>(mean.size());
  if (kind == "funnel") return funnel_n + 1;
  if (kind == "banana") return 2;
  if (kind == "fhn") return 3;
  throw ConfigError("unknown target '" + kind + "'");
}

TargetDensity TargetSpec::build() const {
  if (kind == "gaussian") return gaussian_target(mean, covariance);
  if (kind == "mixture") return mixture_target(mean, covariance);
  if (kind == "funnel") return funnel_target(funnel_n, funnel_v_sd);
  if (kind == "banana") return banana_target(banana_b, banana_sigma1);
  if (kind == "fhn") return fhn_posterior(fhn_obs, fhn_dt);
  throw ConfigError("unknown target '" + kind + "'");
}

std::vector<Moment> TargetSpec::moments() const {
  std::vector<Moment> out;
  auto add = [&](int k, double mean_truth, double second_truth) {
    out.push_back({"mean", k + 1, mean_truth, [k](const Eigen::VectorXd& x) { return x[k]; }});
    out.push_back({"second_moment", k + 1, second_truth,
                   [k](const Eigen::VectorXd& x) { return x[k] * x[k]; }});
  };
  if (kind == "gaussian") {
    for (int k = 0; k < mean.size(); ++k) add(k, mean[k], covariance(k, k) + mean[k] * mean[k]);
  } else if (kind == "mixture") {
    // The two components have opposite means, so the mixture mean is zero.
    for (int k = 0; k < mean.size(); ++k) add(k, 0.0, covariance(k, k) + mean[k] * mean[k]);
  } else if (kind == "funnel") {
    // x_i | v ~ N(0, e^{-v}) with v ~ N(0, s²), so E[x_i²] = E[e^{-v}] = e^{s²/2}.
    const double s2 = funnel_v_sd * funnel_v_sd;
    for (int k = 0; k < funnel_n; ++k) add(k, 0.0, std::exp(0.5 * s2));
    add(funnel_n, 0.0, s2);
  } else if (kind == "banana") {
    // θ₂ = z - bθ₁² + bσ₁² with z standard normal and Var(θ₁²) = 2σ₁⁴.
    const double s2 = banana_sigma1 * banana_sigma1;
    add(0, 0.0, s2);
    add(1, 0.0, 1.0 + 2.0 * banana_b * banana_b * s2 * s2);
  }
  return out;
}

bool TargetSpec::has_exact_sampler() const { return kind != "fhn"; }

Eigen::MatrixXd TargetSpec::exact_samples(int n, std::uint64_t seed, std::uint64_t stream) const {
  const int d = dim();
  Rng rng(seed, stream);
  Eigen::MatrixXd out(n, d);
  Eigen::VectorXd z(d);
  if (kind == "gaussian" || kind == "mixture") {
    const Eigen::MatrixXd l = covariance.llt().matrixL();
    for (int i = 0; i < n; ++i) {
      rng.fill_normal(z);
      Eigen::VectorXd centre = mean;
      if (kind == "mixture" && rng.uniform() < 0.5) centre = -mean;
      out.row(i) = (centre + l * z).transpose();
    }
  } else if (kind == "funnel") {
    for (int i = 0; i < n; ++i) {
      const double v = funnel_v_sd * rng.normal();
      for (int k = 0; k < funnel_n; ++k) out(i, k) = std::exp(-0.5 * v) * rng.normal();
      out(i, funnel_n) = v;
    }
  } else if (kind == "banana") {
    const double s2 = banana_sigma1 * banana_sigma1;
    for (int i = 0; i < n; ++i) {
      const double t1 = banana_sigma1 * rng.normal();
      out(i, 0) = t1;
      out(i, 1) = rng.normal() - banana_b * t1 * t1 + banana_b * s2;
    }
  } else {
    throw ConfigError("target '" + kind + "' has no exact sampler");
  }
  return out;
}

// ExperimentSpec -------------------------------------------------------------

SamplerConfig ExperimentSpec::sampler_config() const {
  SamplerConfig cfg;
  cfg.epsilon = epsilon;
  cfg.n_leapfrog = n_leapfrog;
  cfg.n_samples = n_samples;
  cfg.seed = seed;
  const int d = target.dim();
  cfg.g_matrix = sampler == SamplerKind::mhmc ? g.build(d) : AntisymmetricMatrix::zero(d);
  cfg.mass_matrix = mass_matrix;
  return cfg;
}

namespace {

TargetSpec parse_target(const ConfigFile& cfg) {
  TargetSpec t;
  t.kind = cfg.get_string("target");
  if (t.kind == "gaussian" || t.kind == "mixture") {
    const std::string mean_key = t.kind == "gaussian" ? "mean" : "mu";
    const std::string cov_key = t.kind == "gaussian" ? "covariance" : "sigma";
    t.mean = cfg.get_vector(mean_key);
    const auto d = t.mean.size();
    if (cfg.has(cov_key) && cfg.has(cov_key + "_diag")) {
      throw ConfigError(cfg.where(cov_key) + ": give either " + cov_key + " or " + cov_key +
                        "_diag");
    }
    if (cfg.has(cov_key)) {
      t.covariance = cfg.get_matrix(cov_key);
    } else if (cfg.has(cov_key + "_diag")) {
      t.covariance = cfg.get_vector(cov_key + "_diag").asDiagonal();
    } else {
      t.covariance = Eigen::MatrixXd::Identity(d, d);
    }
    if (t.covariance.rows() != d || t.covariance.cols() != d) {
      throw ConfigError(cfg.where(mean_key) + ": mean and covariance sizes differ");
    }
  } else if (t.kind == "funnel") {
    t.funnel_n = static_cast<int>(cfg.get_int("funnel_n", 10));
    t.funnel_v_sd = cfg.get_double("funnel_v_sd", 3.0);
    if (t.funnel_n < 1) throw ConfigError(cfg.where("funnel_n") + ": must be at least 1");
    if (!(t.funnel_v_sd > 0)) throw ConfigError(cfg.where("funnel_v_sd") + ": must be positive");
  } else if (t.kind == "banana") {
    t.banana_b = cfg.get_double("banana_b", 0.1);
    t.banana_sigma1 = cfg.get_double("banana_sigma1", 10.0);
    if (!(t.banana_sigma1 > 0)) throw ConfigError(cfg.where("banana_sigma1") + ": must be positive");
  } else if (t.kind == "fhn") {
    const double noise = cfg.get_double("fhn_noise_sd", 0.1);
    Eigen::VectorXd init = Eigen::Vector2d(-1.0, 1.0);
    if (cfg.has("fhn_init")) init = cfg.get_vector("fhn_init");
    if (init.size() != 2) throw ConfigError(cfg.where("fhn_init") + ": expected two values");
    t.fhn_dt = cfg.get_double("fhn_dt", 0.01);
    if (!(t.fhn_dt > 0)) throw ConfigError(cfg.where("fhn_dt") + ": must be positive");
    if (cfg.has("fhn_data")) {
      std::filesystem::path p = cfg.get_string("fhn_data");
      if (p.is_relative()) p = cfg.base_dir() / p;
      t.fhn_obs = load_fhn_csv(p, noise, init[0], init[1]);
    } else {
      Eigen::VectorXd truth = Eigen::Vector3d(0.2, 0.2, 3.0);
      if (cfg.has("fhn_true")) truth = cfg.get_vector("fhn_true");
      if (truth.size() != 3) throw ConfigError(cfg.where("fhn_true") + ": expected a, b, c");
      const long n_obs = cfg.get_int("fhn_n_obs", 200);
      if (n_obs < 2) throw ConfigError(cfg.where("fhn_n_obs") + ": need at least two");
      const double t_end = cfg.get_double("fhn_t_end", 20.0);
      const auto seed = cfg.get_u64("fhn_data_seed", 1);
      t.fhn_obs = synthesize_fhn_observations(FhnParams{truth[0], truth[1], truth[2]},
                                              evenly_spaced_times(static_cast<int>(n_obs), t_end),
                                              noise, init[0], init[1], t.fhn_dt, seed);
    }
    try {
      t.fhn_obs.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(cfg.where("target") + ": " + e.what());
    }
  } else {
    throw ConfigError(cfg.where("target") +
                      ": unknown target (gaussian, mixture, funnel, banana, fhn)");
  }
  return t;
}

int positive_int(const ConfigFile& cfg, const std::string& key, long fallback, long min) {
  const long v = cfg.get_int(key, fallback);
  if (v < min || v > std::numeric_limits<int>::max()) {
    throw ConfigError(cfg.where(key) + ": must be at least " + std::to_string(min));
  }
  return static_cast<int>(v);
}

}  // namespace

ExperimentSpec parse_experiment(const ConfigFile& cfg) {
  ExperimentSpec spec;
  spec.name = cfg.get_string("name", "experiment");
  spec.target = parse_target(cfg);
  const int d = spec.target.dim();

  try {
    spec.sampler = sampler_kind_from_string(cfg.get_string("sampler", "mhmc"));
  } catch (const ConfigError& e) {
    throw ConfigError(cfg.where("sampler") + ": " + e.what());
  }
  spec.epsilon = cfg.get_double("epsilon");
  if (!(spec.epsilon > 0) || !std::isfinite(spec.epsilon)) {
    throw ConfigError(cfg.where("epsilon") + ": must be positive");
  }
  // Zero steps is meaningful for proposal traces only; sampling rejects it.
  spec.n_leapfrog = positive_int(cfg, "n_leapfrog", 10, 0);
  spec.n_samples = positive_int(cfg, "n_samples", 1000, 0);
  spec.burn_in = positive_int(cfg, "burn_in", 0, 0);
  spec.n_chains = positive_int(cfg, "n_chains", 1, 1);
  spec.seed = cfg.get_u64("seed", 0);
  spec.max_lag = positive_int(cfg, "max_lag", 50, 0);
  spec.n_traces = positive_int(cfg, "n_traces", 1, 0);
  spec.mmd_checkpoints = positive_int(cfg, "mmd_checkpoints", 10, 1);
  if (spec.burn_in > spec.n_samples) {
    throw ConfigError(cfg.where("burn_in") + ": exceeds n_samples");
  }

  if (cfg.has("g")) {
    try {
      spec.g = GSpec::parse(cfg.get_string("g"));
      spec.g.build(d);
    } catch (const NotAntisymmetric& e) {
      throw ConfigError(cfg.where("g") + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(cfg.where("g") + ": " + e.what());
    }
  }

  if (cfg.has("mass") && cfg.has("mass_diag")) {
    throw ConfigError(cfg.where("mass") + ": give either mass or mass_diag");
  }
  if (cfg.has("mass")) spec.mass_matrix = cfg.get_matrix("mass");
  if (cfg.has("mass_diag")) {
    spec.mass_matrix = Eigen::MatrixXd(cfg.get_vector("mass_diag").asDiagonal());
  }
  if (spec.mass_matrix && (spec.mass_matrix->rows() != d || spec.mass_matrix->cols() != d)) {
    throw ConfigError(cfg.where(cfg.has("mass") ? "mass" : "mass_diag") +
                      ": size does not match the target dimension " + std::to_string(d));
  }
  if (spec.sampler == SamplerKind::preconditioned && !spec.mass_matrix) {
    throw ConfigError(cfg.where("sampler") + ": preconditioned sampler needs mass or mass_diag");
  }

  spec.init = cfg.has("init") ? cfg.get_vector("init") : Eigen::VectorXd::Zero(d);
  if (spec.init.size() != d) {
    throw ConfigError(cfg.where("init") + ": expected " + std::to_string(d) + " values");
  }

  const std::string mmd = cfg.get_string("mmd", "false");
  if (mmd != "true" && mmd != "false") throw ConfigError(cfg.where("mmd") + ": expected true or false");
  spec.mmd = mmd == "true";
  if (spec.mmd && !spec.target.has_exact_sampler()) {
    throw ConfigError(cfg.where("mmd") + ": target has no exact sampler");
  }
  spec.mmd_seed = cfg.get_u64("mmd_seed", spec.seed ^ 0x9e3779b97f4a7c15ULL);

  std::filesystem::path out = cfg.get_string("out", "");
  if (!out.empty() && out.is_relative()) out = cfg.base_dir() / out;
  spec.out_dir = out;

  cfg.reject_unused();
  return spec;
}

// Running --------------------------------------------------------------------

namespace {

// Autocorrelation of one coordinate; a frozen chain is fully correlated.
std::vector<double> acf_or_frozen(const Eigen::VectorXd& x, int max_lag) {
  try {
    return coordinate_autocorrelation(x, max_lag);
  } catch (const ZeroVariance&) {
    return std::vector<double>(static_cast<std::size_t>(max_lag) + 1, 1.0);
  }
}

double ess_or_one(const Eigen::VectorXd& x) {
  try {
    return effective_sample_size(x);
  } catch (const ZeroVariance&) {
    return 1.0;
  }
}

void fill_diagnostics(ExperimentResult& r, int dim, int max_lag,
                      const std::vector<Moment>& moments) {
  const std::size_t n_chains = r.positions.size();
  long total = 0, accepted = 0;
  r.chain_acceptance.clear();
  for (const auto& c : r.chains) {
    long a = 0;
    for (const auto& rec : c.records) a += rec.accepted ? 1 : 0;
    total += static_cast<long>(c.records.size());
    accepted += a;
    r.chain_acceptance.push_back(c.records.empty() ? 0.0
                                                   : static_cast<double>(a) / c.records.size());
    r.wall_seconds += c.wall_seconds;
  }
  r.acceptance_rate = total ? static_cast<double>(accepted) / total : 0.0;

  Eigen::Index n = std::numeric_limits<Eigen::Index>::max();
  for (const auto& p : r.positions) n = std::min(n, p.rows());
  if (n_chains == 0 || n < 2) return;

  const int lag = static_cast<int>(std::min<Eigen::Index>(max_lag, n - 1));
  r.autocorr.assign(static_cast<std::size_t>(lag) + 1, 0.0);
  r.ess = Eigen::VectorXd::Zero(dim);
  r.chain_min_ess.clear();
  for (const auto& p : r.positions) {
    double min_ess = std::numeric_limits<double>::infinity();
    for (int k = 0; k < dim; ++k) {
      const Eigen::VectorXd col = p.col(k);
      const auto rho = acf_or_frozen(col, lag);
      for (std::size_t l = 0; l < rho.size(); ++l) r.autocorr[l] += rho[l] / (dim * n_chains);
      const double e = ess_or_one(col);
      r.ess[k] += e / static_cast<double>(n_chains);
      min_ess = std::min(min_ess, e);
    }
    r.chain_min_ess.push_back(min_ess);
  }
  double s = 0.0;
  for (double v : r.chain_min_ess) s += v;
  r.mean_min_ess = s / static_cast<double>(n_chains);

  if (n_chains >= 2) {
    for (const auto& m : moments) {
      const auto bm = bias_and_mcse(r.positions, m.fn, m.truth);
      r.moments.push_back({m.name, m.coordinate, m.truth, bm.estimate, bm.bias, bm.mcse});
    }
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, unsigned max_threads) {
  if (spec.n_leapfrog < 1) throw ConfigError("n_leapfrog must be at least 1 for sampling");
  const TargetDensity target = spec.target.build();
  const int d = target.dim();
  const SamplerConfig cfg = spec.sampler_config();
  cfg.validate(d);
  if (spec.init.size() != d) throw ConfigError("init has the wrong dimension");

  ExperimentResult r;
  r.chains.resize(static_cast<std::size_t>(spec.n_chains));
  unsigned workers = max_threads ? max_threads : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(spec.n_chains));

  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](unsigned w) {
    try {
      for (int k = next++; k < spec.n_chains; k = next++) {
        r.chains[static_cast<std::size_t>(k)] =
            run_chain(target, spec.init, cfg, spec.sampler, static_cast<std::uint64_t>(k));
      }
    } catch (...) {
      errors[w] = std::current_exception();
      next = spec.n_chains;
    }
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  for (const auto& c : r.chains) r.positions.push_back(c.positions(static_cast<std::size_t>(spec.burn_in)));
  fill_diagnostics(r, d, spec.max_lag, spec.target.moments());

  const auto n = spec.n_samples - spec.burn_in;
  if (spec.mmd && n > 0) {
    double sq = 0.0, root = 0.0;
    std::vector<double> curve(static_cast<std::size_t>(spec.mmd_checkpoints), 0.0);
    std::vector<int> counts;
    for (int c = 1; c <= spec.mmd_checkpoints; ++c) {
      counts.push_back(std::max(1, static_cast<int>(std::lround(
                                       static_cast<double>(n) * c / spec.mmd_checkpoints))));
    }
    for (std::size_t k = 0; k < r.positions.size(); ++k) {
      const Eigen::MatrixXd ref = spec.target.exact_samples(n, spec.mmd_seed, k);
      const double m2 = mmd_squared(r.positions[k], ref);
      sq += m2;
      root += std::sqrt(std::max(0.0, m2));
      for (std::size_t c = 0; c < counts.size(); ++c) {
        curve[c] += mmd_squared(r.positions[k].topRows(counts[c]), ref.topRows(counts[c]));
      }
    }
    const double chains = static_cast<double>(r.positions.size());
    r.mmd_squared = sq / chains;
    r.mmd = root / chains;
    for (std::size_t c = 0; c < counts.size(); ++c) r.mmd_curve.emplace_back(counts[c], curve[c] / chains);
  }
  return r;
}

// Output ---------------------------------------------------------------------

std::string samples_csv(const ChainResult& chain, int dim) {
  std::string s = "iter,accepted,energy_error,g_sign";
  for (int k = 1; k <= dim; ++k) s += ",theta_" + std::to_string(k);
  s += '\n';
  for (const auto& rec : chain.records) {
    s += std::to_string(rec.iteration);
    s += rec.accepted ? ",1," : ",0,";
    s += format_double(rec.energy_error);
    s += ',';
    s += std::to_string(rec.g_sign_after);
    for (Eigen::Index k = 0; k < rec.theta.size(); ++k) {
      s += ',';
      s += format_double(rec.theta[k]);
    }
    s += '\n';
  }
  return s;
}

std::string diagnostics_csv(const ExperimentResult& r) {
  std::string s = "metric,coordinate,lag,value\n";
  auto row = [&s](const std::string& metric, const std::string& coord, const std::string& lag,
                  double v) { s += metric + "," + coord + "," + lag + "," + format_double(v) + "\n"; };
  row("acceptance_rate", "all", "", r.acceptance_rate);
  for (std::size_t k = 0; k < r.chain_acceptance.size(); ++k) {
    row("chain_acceptance_rate", "chain_" + std::to_string(k), "", r.chain_acceptance[k]);
  }
  for (std::size_t l = 0; l < r.autocorr.size(); ++l) {
    row("autocorrelation", "all", std::to_string(l), r.autocorr[l]);
  }
  for (Eigen::Index k = 0; k < r.ess.size(); ++k) row("ess", std::to_string(k + 1), "", r.ess[k]);
  if (!r.chain_min_ess.empty()) row("min_ess", "all", "", r.mean_min_ess);
  for (const auto& m : r.moments) {
    const std::string c = std::to_string(m.coordinate);
    row("estimate_" + m.name, c, "", m.estimate);
    row("bias_" + m.name, c, "", m.bias);
    row("mcse_" + m.name, c, "", m.mcse);
  }
  if (r.mmd_squared) row("mmd_squared", "all", "", *r.mmd_squared);
  if (r.mmd) row("mmd", "all", "", *r.mmd);
  for (const auto& [n, v] : r.mmd_curve) row("mmd_squared_at_n", "all", std::to_string(n), v);
  return s;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace

void write_experiment(const ExperimentSpec& spec, const ExperimentResult& r) {
  if (spec.out_dir.empty()) throw ConfigError("no output directory given");
  std::filesystem::create_directories(spec.out_dir);
  const int d = spec.target.dim();
  for (std::size_t k = 0; k < r.chains.size(); ++k) {
    write_file(spec.out_dir / ("samples_chain" + std::to_string(k) + ".csv"),
               samples_csv(r.chains[k], d));
  }
  write_file(spec.out_dir / "diagnostics.csv", diagnostics_csv(r));

  nlohmann::ordered_json j;
  j["name"] = spec.name;
  j["target"] = spec.target.kind;
  j["dim"] = d;
  j["sampler"] = to_string(spec.sampler);
  j["g"] = spec.g.describe();
  j["epsilon"] = spec.epsilon;
  j["n_leapfrog"] = spec.n_leapfrog;
  j["n_samples"] = spec.n_samples;
  j["burn_in"] = spec.burn_in;
  j["n_chains"] = spec.n_chains;
  j["seed"] = spec.seed;
  j["acceptance_rate"] = r.acceptance_rate;
  j["ess"] = std::vector<double>(r.ess.data(), r.ess.data() + r.ess.size());
  j["min_ess"] = r.mean_min_ess;
  // Timing lives only here, never in the CSVs.
  j["wall_seconds"] = r.wall_seconds;
  if (r.wall_seconds > 0 && r.ess.size() > 0) {
    j["ess_per_second"] = r.ess.sum() / static_cast<double>(r.ess.size()) /
                          (r.wall_seconds / static_cast<double>(r.chains.size()));
  }
  for (const auto& m : r.moments) {
    j["moments"].push_back({{"name", m.name}, {"coordinate", m.coordinate}, {"truth", m.truth},
                            {"estimate", m.estimate}, {"bias", m.bias}, {"mcse", m.mcse}});
  }
  if (r.mmd_squared) {
    j["mmd_squared"] = *r.mmd_squared;
    j["mmd"] = *r.mmd;
  }
  write_file(spec.out_dir / "summary.json", j.dump(2) + "\n");
}

std::vector<std::vector<PhasePoint>> proposal_trace(const ExperimentSpec& spec, int n) {
  if (n < 0) throw ConfigError("number of traces must be nonnegative");
  if (spec.sampler == SamplerKind::preconditioned) {
    throw ConfigError("proposal traces are available for hmc and mhmc only");
  }
  const TargetDensity target = spec.target.build();
  const int d = target.dim();
  const SamplerConfig scfg = spec.sampler_config();
  const IntegratorConfig icfg = IntegratorConfig::magnetic(scfg.g_matrix, spec.epsilon, spec.n_leapfrog);
  std::vector<std::vector<PhasePoint>> out;
  for (int k = 0; k < n; ++k) {
    Rng rng(spec.seed, static_cast<std::uint64_t>(k));
    PhasePoint start{spec.init, Eigen::VectorXd(d)};
    rng.fill_normal(start.p);
    std::vector<PhasePoint> trace;
    trajectory(target, start, icfg, +1, &trace);
    out.push_back(std::move(trace));
  }
  return out;
}

std::string trace_csv(const std::vector<PhasePoint>& trace) {
  const auto d = trace.empty() ? 0 : trace.front().theta.size();
  std::string s = "step";
  for (Eigen::Index k = 1; k <= d; ++k) s += ",theta_" + std::to_string(k);
  for (Eigen::Index k = 1; k <= d; ++k) s += ",p_" + std::to_string(k);
  s += '\n';
  for (std::size_t i = 0; i < trace.size(); ++i) {
    s += std::to_string(i);
    for (Eigen::Index k = 0; k < d; ++k) s += "," + format_double(trace[i].theta[k]);
    for (Eigen::Index k = 0; k < d; ++k) s += "," + format_double(trace[i].p[k]);
    s += '\n';
  }
  return s;
}

ChainResult read_samples_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open samples file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty samples file");
  const auto header = split(trim(line), ',');
  if (header.size() < 5 || header[0] != "iter" || header[1] != "accepted" ||
      header[2] != "energy_error" || header[3] != "g_sign") {
    throw ConfigError(path.string() +
                      ":1: expected header 'iter,accepted,energy_error,g_sign,theta_1,...'");
  }
  const auto d = static_cast<Eigen::Index>(header.size() - 4);
  for (Eigen::Index k = 0; k < d; ++k) {
    if (header[static_cast<std::size_t>(k) + 4] != "theta_" + std::to_string(k + 1)) {
      throw ConfigError(path.string() + ":1: unexpected column '" +
                        header[static_cast<std::size_t>(k) + 4] + "'");
    }
  }
  ChainResult out;
  int lineno = 1;
  long accepted = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cells.size() != header.size()) throw ConfigError(where + ": wrong number of columns");
    SampleRecord rec;
    const auto it = to_long(cells[0]);
    const auto acc = to_long(cells[1]);
    const auto err = to_double(cells[2]);
    const auto sign = to_long(cells[3]);
    if (!it || !acc || !err || !sign || (*acc != 0 && *acc != 1) || (*sign != 1 && *sign != -1)) {
      throw ConfigError(where + ": malformed row");
    }
    rec.iteration = *it;
    rec.accepted = *acc == 1;
    rec.energy_error = *err;
    rec.g_sign_after = static_cast<int>(*sign);
    rec.theta.resize(d);
    for (Eigen::Index k = 0; k < d; ++k) {
      const auto v = to_double(cells[static_cast<std::size_t>(k) + 4]);
      if (!v) throw ConfigError(where + ": malformed theta_" + std::to_string(k + 1));
      rec.theta[k] = *v;
    }
    accepted += rec.accepted ? 1 : 0;
    out.records.push_back(std::move(rec));
  }
  out.acceptance_rate =
      out.records.empty() ? 0.0 : static_cast<double>(accepted) / out.records.size();
  return out;
}

ExperimentResult diagnose(const std::vector<ChainResult>& chains, int burn_in, int max_lag,
                          const std::optional<TargetSpec>& truth) {
  if (chains.empty()) throw ConfigError("no chains to diagnose");
  if (burn_in < 0 || max_lag < 0) throw ConfigError("burn-in and max lag must be nonnegative");
  const auto d = chains.front().records.empty() ? 0 : chains.front().records.front().theta.size();
  ExperimentResult r;
  r.chains = chains;
  for (const auto& c : chains) {
    if (!c.records.empty() && c.records.front().theta.size() != d) {
      throw ConfigError("chains have different dimensions");
    }
    r.positions.push_back(c.positions(static_cast<std::size_t>(burn_in)));
  }
  std::vector<Moment> moments;
  if (truth) {
    if (truth->dim() != d) {
      throw ConfigError("truth target has dimension " + std::to_string(truth->dim()) +
                        " but the samples have " + std::to_string(d));
    }
    moments = truth->moments();
  }
  fill_diagnostics(r, static_cast<int>(d), max_lag, moments);
  return r;
}

}  // namespace mhmc::bench
