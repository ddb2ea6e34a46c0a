#pragma once

// Phone samples, CSV corpus I/O, train/validation splitting, feature
// normalization and the synthetic phone-thermal generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crowdtemp/errors.hpp"
#include "crowdtemp/nn.hpp"

namespace crowdtemp {

using Features = std::array<double, kFeatureCount>;

/// One phone observation. Durations in seconds, temperatures in degC,
/// voltage in volts. `ambient` is the reference (label) temperature.
struct Sample {
  double screen_on = 0.0;                   // f1, 0 or 1
  double battery_voltage = 0.0;             // f2
  double battery_temp = 0.0;                // f3
  double screen_on_time = 0.0;              // f4
  double screen_off_time = 0.0;             // f5
  double off_time_before_activation = 0.0;  // f6
  double on_time_before_off = 0.0;          // f7
  double temp_at_last_activation = 0.0;     // f8
  double temp_at_last_off = 0.0;            // f9
  double ambient = 0.0;                     // label

  Features features() const {
    return {screen_on,           battery_voltage,          battery_temp,
            screen_on_time,      screen_off_time,          off_time_before_activation,
            on_time_before_off,  temp_at_last_activation,  temp_at_last_off};
  }

  static Sample from_features(const Features& f, double label) {
    return {f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], label};
  }

  bool operator==(const Sample&) const = default;
};

/// Empty when the sample satisfies the value-range invariants, otherwise a
/// description of the first violation.
inline std::optional<std::string> validate(const Sample& s) {
  if (s.screen_on != 0.0 && s.screen_on != 1.0) return "f1 must be 0 or 1";
  if (s.battery_voltage < 3.0 || s.battery_voltage > 5.0) return "f2 voltage outside [3, 5] V";
  const auto temp_ok = [](double t) { return t >= -20.0 && t <= 60.0; };
  if (!temp_ok(s.battery_temp)) return "f3 outside [-20, 60] degC";
  if (!temp_ok(s.temp_at_last_activation)) return "f8 outside [-20, 60] degC";
  if (!temp_ok(s.temp_at_last_off)) return "f9 outside [-20, 60] degC";
  if (!temp_ok(s.ambient)) return "label outside [-20, 60] degC";
  if (s.screen_on_time < 0 || s.screen_off_time < 0 || s.off_time_before_activation < 0 ||
      s.on_time_before_off < 0)
    return "negative duration";
  for (double v : s.features())
    if (!std::isfinite(v)) return "non-finite feature";
  return std::nullopt;
}

enum class PhoneRole { contributor, participant };

struct PhoneDataset {
  std::string phone_id;
  PhoneRole role = PhoneRole::contributor;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

using Corpus = std::vector<PhoneDataset>;

// ---------------------------------------------------------------------------
// CSV corpus format: header `phone_id,f1,...,f9,label`, one row per sample.
// Lines starting with '#' are comments.

inline constexpr std::array<const char*, 11> kCsvColumns = {"phone_id", "f1", "f2", "f3", "f4", "f5",
                                                             "f6",       "f7", "f8", "f9", "label"};

namespace detail {

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end != cell.c_str() + cell.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline Corpus parse_csv(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  std::size_t row = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++row;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_commas(line);
    break;
  }
  if (header.empty()) throw ParseError(source + ": missing header row");
  std::array<std::size_t, 11> col{};
  for (std::size_t c = 0; c < kCsvColumns.size(); ++c) {
    auto it = std::find_if(header.begin(), header.end(),
                           [&](const std::string& h) { return detail::trim(h) == kCsvColumns[c]; });
    if (it == header.end()) throw ParseError(source + ": missing column '" + kCsvColumns[c] + "'");
    col[c] = static_cast<std::size_t>(it - header.begin());
  }

  Corpus corpus;
  std::map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    ++row;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != header.size())
      throw ParseError(source + ": row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                       " cells, got " + std::to_string(cells.size()));
    std::array<double, 10> v{};
    for (std::size_t c = 1; c < kCsvColumns.size(); ++c) {
      const auto parsed = detail::parse_double(detail::trim(cells[col[c]]));
      if (!parsed)
        throw ParseError(source + ": row " + std::to_string(row) + ": non-numeric value in column '" +
                         kCsvColumns[c] + "'");
      v[c - 1] = *parsed;
    }
    if (v[0] != 0.0 && v[0] != 1.0)
      throw ParseError(source + ": row " + std::to_string(row) + ": f1 must be 0 or 1");
    const std::string id = detail::trim(cells[col[0]]);
    if (id.empty()) throw ParseError(source + ": row " + std::to_string(row) + ": empty phone_id");
    auto [it, inserted] = index.try_emplace(id, corpus.size());
    if (inserted) corpus.push_back({id, PhoneRole::contributor, {}});
    Sample s{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]};
    corpus[it->second].samples.push_back(s);
  }
  return corpus;
}

inline Corpus load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open file");
  return parse_csv(in, path);
}

inline void write_csv(std::ostream& out, const Corpus& corpus) {
  for (std::size_t c = 0; c < kCsvColumns.size(); ++c) out << (c ? "," : "") << kCsvColumns[c];
  out << '\n';
  for (const auto& phone : corpus) {
    for (const auto& s : phone.samples) {
      out << phone.phone_id;
      for (double v : s.features()) out << ',' << detail::format_double(v);
      out << ',' << detail::format_double(s.ambient) << '\n';
    }
  }
}

inline void save_csv(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw ParseError(path + ": cannot open for writing");
  write_csv(out, corpus);
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
  PhoneDataset train;
  PhoneDataset validation;
};

/// Seeded uniform shuffle; the train side gets round-half-up(fraction * n)
/// samples. Both sides keep the original sample order.
inline Split split(const PhoneDataset& dataset, double train_fraction, std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "split: fraction must lie in (0, 1)");
  const std::size_t n = dataset.samples.size();
  require(n >= 2, "split: dataset " + dataset.phone_id + " needs at least 2 samples");
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<char> in_train(n, 0);
  for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = 1;
  Split out{{dataset.phone_id, dataset.role, {}}, {dataset.phone_id, dataset.role, {}}};
  for (std::size_t i = 0; i < n; ++i) (in_train[i] ? out.train : out.validation).samples.push_back(dataset.samples[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  Features mean{};
  Features std{};

  bool operator==(const NormStats&) const = default;
};

inline constexpr double kStdFloor = 1e-6;

inline NormStats fit_normalizer(std::span<const PhoneDataset* const> datasets) {
  std::size_t n = 0;
  Features sum{};
  for (const auto* d : datasets)
    for (const auto& s : d->samples) {
      const auto f = s.features();
      for (std::size_t j = 0; j < kFeatureCount; ++j) sum[j] += f[j];
      ++n;
    }
  require(n >= 2, "fit_normalizer: need at least 2 samples");
  NormStats st;
  for (std::size_t j = 0; j < kFeatureCount; ++j) st.mean[j] = sum[j] / static_cast<double>(n);
  Features sq{};
  for (const auto* d : datasets)
    for (const auto& s : d->samples) {
      const auto f = s.features();
      for (std::size_t j = 0; j < kFeatureCount; ++j) sq[j] += (f[j] - st.mean[j]) * (f[j] - st.mean[j]);
    }
  for (std::size_t j = 0; j < kFeatureCount; ++j)
    st.std[j] = std::max(std::sqrt(sq[j] / static_cast<double>(n)), kStdFloor);
  return st;
}

inline NormStats fit_normalizer(const PhoneDataset& d) {
  const PhoneDataset* p = &d;
  return fit_normalizer(std::span<const PhoneDataset* const>(&p, 1));
}

inline Features normalize(const Sample& s, const NormStats& st) {
  Features f = s.features();
  for (std::size_t j = 0; j < kFeatureCount; ++j) f[j] = (f[j] - st.mean[j]) / st.std[j];
  return f;
}

// ---------------------------------------------------------------------------
// Synthetic phone-thermal generator.
//
// The battery relaxes toward ambient plus a device heating term with time
// constant tau; the sensor reports battery temperature plus a per-phone bias
// and white noise. The screen follows a two-state Markov process.

struct SynthPhoneParams {
  double tau = 300.0;               // s
  double screen_heating = 1.5;      // degC added to the equilibrium while the screen is on
  double voltage_heating = 0.5;     // degC per volt above 3.0 V
  double sensor_bias = 0.0;         // degC
  double noise_std = 0.1;           // degC
};

enum class ScreenPolicy { markov, always_off, always_on };

struct SynthConfig {
  std::size_t n_sessions = 40;
  double session_length = 1800.0;  // s
  double tick = 30.0;              // s
  double ambient_lo = 12.0;
  double ambient_hi = 35.0;
  double label_resolution = 0.1;   // reference thermometer resolution; 0 keeps raw draws
  double mean_on_time = 240.0;     // s, mean screen-on streak
  double mean_off_time = 480.0;    // s, mean screen-off streak
  double initial_offset_lo = -2.0; // battery start temperature relative to ambient
  double initial_offset_hi = 6.0;
  ScreenPolicy screen = ScreenPolicy::markov;
  std::uint64_t seed = 1;
  // When set, session ambient temperatures come from this stream instead of
  // `seed`; phones sharing it are co-located in the same sessions.
  std::optional<std::uint64_t> ambient_seed;
};

inline std::vector<double> ambient_schedule(const SynthConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(cfg.ambient_lo, cfg.ambient_hi);
  std::vector<double> out(cfg.n_sessions);
  for (auto& t : out) {
    t = dist(rng);
    if (cfg.label_resolution > 0) t = std::round(t / cfg.label_resolution) * cfg.label_resolution;
    t = std::clamp(t, cfg.ambient_lo, cfg.ambient_hi);
  }
  return out;
}

inline PhoneDataset synth_generate(const std::string& phone_id, const SynthPhoneParams& params,
                                   const SynthConfig& cfg) {
  require(params.tau > 0.0, "synth: tau must be positive");
  require(params.noise_std >= 0.0, "synth: noise std must be non-negative");
  require(cfg.tick > 0.0, "synth: tick must be positive");
  require(cfg.session_length >= 10.0 * cfg.tick, "synth: session must span at least 10 ticks");
  require(cfg.ambient_lo <= cfg.ambient_hi, "synth: empty ambient range");
  require(cfg.ambient_lo >= -20.0 && cfg.ambient_hi <= 60.0, "synth: ambient range outside [-20, 60]");
  require(cfg.initial_offset_lo <= cfg.initial_offset_hi, "synth: empty initial offset range");
  require(cfg.mean_on_time > 0 && cfg.mean_off_time > 0, "synth: screen streak means must be positive");
  require(cfg.n_sessions >= 1, "synth: need at least one session");

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto ambients = ambient_schedule(cfg, cfg.ambient_seed.value_or(cfg.seed ^ 0x9e3779b97f4a7c15ULL));
  const auto ticks = static_cast<std::size_t>(std::floor(cfg.session_length / cfg.tick));
  const double p_on_to_off = std::min(1.0, cfg.tick / cfg.mean_on_time);
  const double p_off_to_on = std::min(1.0, cfg.tick / cfg.mean_off_time);

  PhoneDataset out{phone_id, PhoneRole::contributor, {}};
  out.samples.reserve(cfg.n_sessions * ticks);
  for (std::size_t session = 0; session < cfg.n_sessions; ++session) {
    const double t_amb = ambients[session];
    double t_batt = t_amb + cfg.initial_offset_lo + (cfg.initial_offset_hi - cfg.initial_offset_lo) * unit(rng);
    double volt = 3.6 + 0.6 * unit(rng);
    bool on = cfg.screen == ScreenPolicy::always_on ||
              (cfg.screen == ScreenPolicy::markov && unit(rng) < cfg.mean_on_time / (cfg.mean_on_time + cfg.mean_off_time));
    const auto read = [&] {
      return std::clamp(t_batt + params.sensor_bias + params.noise_std * noise(rng), -20.0, 60.0);
    };
    // The session starts mid-streak; the previous streaks and the readings at
    // the last transitions are unknown to the phone, so they are seeded with
    // plausible values.
    double streak = 0.0;
    double last_on = cfg.mean_on_time * unit(rng);
    double last_off = cfg.mean_off_time * unit(rng);
    double before_activation = last_off;
    double before_off = last_on;
    double temp_activation = read();
    double temp_off = temp_activation;

    for (std::size_t k = 0; k < ticks; ++k) {
      if (k > 0) {
        const double heat = (on ? params.screen_heating : 0.0) + params.voltage_heating * (volt - 3.0);
        t_batt += (cfg.tick / params.tau) * (t_amb + heat - t_batt);
        volt = std::clamp(volt - (on ? 2e-5 : 5e-6) * cfg.tick + 0.002 * noise(rng), 3.0, 5.0);
        streak += cfg.tick;
      }
      const double reading = read();
      if (k > 0 && cfg.screen == ScreenPolicy::markov) {
        const double p = on ? p_on_to_off : p_off_to_on;
        if (unit(rng) < p) {
          if (on) {
            before_off = streak;
            last_on = streak;
            temp_off = reading;
          } else {
            before_activation = streak;
            last_off = streak;
            temp_activation = reading;
          }
          on = !on;
          streak = 0.0;
        }
      }
      Sample s;
      s.screen_on = on ? 1.0 : 0.0;
      s.battery_voltage = volt;
      s.battery_temp = reading;
      s.screen_on_time = on ? streak : last_on;
      s.screen_off_time = on ? last_off : streak;
      s.off_time_before_activation = before_activation;
      s.on_time_before_off = before_off;
      s.temp_at_last_activation = temp_activation;
      s.temp_at_last_off = temp_off;
      s.ambient = t_amb;
      out.samples.push_back(s);
    }
  }
  return out;
}

struct SynthRanges {
  double tau_lo = 120.0, tau_hi = 600.0;
  double bias_lo = -1.5, bias_hi = 1.5;
  double noise_lo = 0.05, noise_hi = 0.3;
  double screen_heating_lo = 0.5, screen_heating_hi = 3.0;
  double voltage_heating_lo = 0.0, voltage_heating_hi = 1.0;
};

inline std::vector<SynthPhoneParams> draw_phone_params(std::size_t count, std::uint64_t seed,
                                                       const SynthRanges& r = {}) {
  std::mt19937_64 rng(seed);
  const auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  std::vector<SynthPhoneParams> out(count);
  for (auto& p : out) {
    p.tau = u(r.tau_lo, r.tau_hi);
    p.sensor_bias = u(r.bias_lo, r.bias_hi);
    p.noise_std = u(r.noise_lo, r.noise_hi);
    p.screen_heating = u(r.screen_heating_lo, r.screen_heating_hi);
    p.voltage_heating = u(r.voltage_heating_lo, r.voltage_heating_hi);
  }
  return out;
}

}  // namespace crowdtemp
