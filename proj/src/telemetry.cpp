#include "tlvm/telemetry.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tlvm/error.h"

namespace tlvm {

namespace {

using nlohmann::ordered_json;

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::optional<double> parse_number(std::string_view text) {
  std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end == s.c_str()) return std::nullopt;
  while (*end == ' ' || *end == '\t' || *end == '\r') ++end;
  if (*end != '\0' || !std::isfinite(v)) return std::nullopt;
  return v;
}

ordered_json optional_json(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

std::string format_optional(const std::optional<double>& v, const char* fmt) {
  if (!v) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, *v);
  return buf;
}

}  // namespace

void BudgetEnvelope::validate() const {
  if (!(power_min_w < power_max_w)) {
    throw Error(ErrorCode::kInvalidConfig, "budget envelope needs power_min_w < power_max_w");
  }
  if (memory_budget_bytes == 0) throw Error(ErrorCode::kInvalidConfig, "memory budget must be positive");
}

PowerProvider PowerProvider::none() { return {}; }

PowerProvider PowerProvider::sim(double power_w, double utilization_pct) {
  PowerProvider p;
  p.kind_ = Kind::kSim;
  p.power_w_ = power_w;
  p.utilization_pct_ = utilization_pct;
  return p;
}

PowerProvider PowerProvider::file(std::filesystem::path path) {
  PowerProvider p;
  p.kind_ = Kind::kFile;
  p.path_ = std::move(path);
  return p;
}

PowerProvider PowerProvider::parse(std::string_view spec) {
  if (spec == "none") return none();
  if (spec.starts_with("sim:")) {
    const std::string_view rest = spec.substr(4);
    const auto comma = rest.find(',');
    if (comma != std::string_view::npos) {
      const auto w = parse_number(rest.substr(0, comma));
      const auto pct = parse_number(rest.substr(comma + 1));
      if (w && pct) return sim(*w, *pct);
    }
  } else if (spec.starts_with("file:") && spec.size() > 5) {
    return file(std::filesystem::path(std::string(spec.substr(5))));
  }
  throw Error(ErrorCode::kInvalidArgument, "bad power provider \"" + std::string(spec) +
                                               "\" (expected none, sim:<w>,<pct> or file:<path>)");
}

std::string PowerProvider::describe() const {
  switch (kind_) {
    case Kind::kNone: return "none";
    case Kind::kSim: {
      std::ostringstream ss;
      ss << "sim:" << power_w_ << "," << utilization_pct_;
      return ss.str();
    }
    case Kind::kFile: return "file:" + path_.string();
  }
  return "?";
}

PowerReading PowerProvider::read() const {
  switch (kind_) {
    case Kind::kNone: return {};
    case Kind::kSim: return {power_w_, utilization_pct_, false};
    case Kind::kFile: break;
  }
  std::ifstream in(path_);
  if (!in) return {std::nullopt, std::nullopt, true};
  std::optional<double> power, util;
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("power_w=")) power = parse_number(std::string_view(line).substr(8));
    else if (line.starts_with("util_pct=")) util = parse_number(std::string_view(line).substr(9));
  }
  if (!power || !util) return {std::nullopt, std::nullopt, true};
  return {power, util, false};
}

TelemetryCounters::TelemetryCounters() : started_(std::chrono::steady_clock::now()) {}

void TelemetryCounters::record_token(double latency_ms) {
  last_latency_ms_.store(latency_ms, std::memory_order_relaxed);
  tokens_.fetch_add(1, std::memory_order_relaxed);
}

MemoryUsage process_memory() {
  MemoryUsage m;
  std::ifstream in("/proc/self/status");
  std::string line;
  auto kib = [](const std::string& l) {
    return std::strtoull(l.c_str() + l.find(':') + 1, nullptr, 10) * 1024ull;
  };
  while (std::getline(in, line)) {
    if (line.starts_with("VmRSS:")) m.resident_bytes = kib(line);
    else if (line.starts_with("VmHWM:")) m.peak_resident_bytes = kib(line);
  }
  m.peak_resident_bytes = std::max(m.peak_resident_bytes, m.resident_bytes);
  return m;
}

TelemetrySnapshot sample(const PowerProvider& provider, const TelemetryCounters& counters,
                         const TelemetrySnapshot* previous) {
  TelemetrySnapshot s;
  s.timestamp_ms = now_ms();
  const MemoryUsage mem = process_memory();
  s.resident_bytes = mem.resident_bytes;
  s.peak_resident_bytes = mem.peak_resident_bytes;
  s.tokens_generated = counters.tokens();
  s.last_token_latency_ms = counters.last_latency_ms();

  std::uint64_t window_tokens = s.tokens_generated;
  double window_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - counters.started()).count();
  if (previous) {
    window_tokens = s.tokens_generated - std::min(previous->tokens_generated, s.tokens_generated);
    window_s = static_cast<double>(s.timestamp_ms - previous->timestamp_ms) / 1000.0;
  }
  s.tokens_per_second = window_tokens > 0 && window_s > 0 ? static_cast<double>(window_tokens) / window_s : 0.0;

  const PowerReading r = provider.read();
  s.power_w = r.power_w;
  s.utilization_pct = r.utilization_pct;
  s.sensor_warning = r.warning;
  return s;
}

std::string_view verdict_name(Verdict v) {
  switch (v) {
    case Verdict::kOk: return "OK";
    case Verdict::kOverPower: return "OVER_POWER";
    case Verdict::kUnderPower: return "UNDER_POWER";
    case Verdict::kOverMemory: return "OVER_MEMORY";
  }
  return "?";
}

VerdictSet check_budget(const TelemetrySnapshot& snapshot, const BudgetEnvelope& envelope) {
  VerdictSet out;
  if (snapshot.power_w) {
    if (*snapshot.power_w > envelope.power_max_w) out.insert(Verdict::kOverPower);
    if (*snapshot.power_w < envelope.power_min_w) out.insert(Verdict::kUnderPower);
  }
  if (snapshot.resident_bytes > envelope.memory_budget_bytes) out.insert(Verdict::kOverMemory);
  if (out.empty()) out.insert(Verdict::kOk);
  return out;
}

RunReport aggregate_run(const std::vector<TelemetrySnapshot>& snapshots, const BudgetEnvelope& envelope) {
  if (snapshots.empty()) throw Error(ErrorCode::kInvalidArgument, "no telemetry snapshots to aggregate");
  RunReport r;
  r.n_snapshots = snapshots.size();
  r.envelope = envelope;
  double power_sum = 0.0, util_sum = 0.0, tps_sum = 0.0;
  std::size_t n_power = 0, n_util = 0;
  for (const TelemetrySnapshot& s : snapshots) {
    if (s.power_w) {
      power_sum += *s.power_w;
      ++n_power;
      r.max_power_w = std::max(r.max_power_w.value_or(*s.power_w), *s.power_w);
    }
    if (s.utilization_pct) {
      util_sum += *s.utilization_pct;
      ++n_util;
    }
    tps_sum += s.tokens_per_second;
    r.peak_memory_bytes = std::max({r.peak_memory_bytes, s.resident_bytes, s.peak_resident_bytes});
    r.tokens_generated = std::max(r.tokens_generated, s.tokens_generated);
    r.sensor_warnings += s.sensor_warning ? 1 : 0;
    for (Verdict v : check_budget(s, envelope)) {
      ++r.verdict_counts[v];
      r.verdicts.insert(v);
    }
  }
  if (n_power) r.mean_power_w = power_sum / static_cast<double>(n_power);
  if (n_util) r.mean_utilization_pct = util_sum / static_cast<double>(n_util);
  r.mean_tokens_per_second = tps_sum / static_cast<double>(snapshots.size());
  if (r.verdicts.size() > 1) r.verdicts.erase(Verdict::kOk);
  return r;
}

std::string snapshot_to_json(const TelemetrySnapshot& s) {
  ordered_json j;
  j["timestamp_ms"] = s.timestamp_ms;
  j["resident_bytes"] = s.resident_bytes;
  j["peak_resident_bytes"] = s.peak_resident_bytes;
  j["tokens_generated"] = s.tokens_generated;
  j["tokens_per_second"] = s.tokens_per_second;
  j["last_token_latency_ms"] = s.last_token_latency_ms;
  j["power_w"] = optional_json(s.power_w);
  j["utilization_pct"] = optional_json(s.utilization_pct);
  j["sensor_warning"] = s.sensor_warning;
  return j.dump();
}

std::string run_report_to_json(const RunReport& r) {
  ordered_json j;
  j["n_snapshots"] = r.n_snapshots;
  j["mean_power_w"] = optional_json(r.mean_power_w);
  j["max_power_w"] = optional_json(r.max_power_w);
  j["mean_utilization_pct"] = optional_json(r.mean_utilization_pct);
  j["utilization_source"] = "as-reported";
  j["peak_memory_bytes"] = r.peak_memory_bytes;
  j["mean_tokens_per_second"] = r.mean_tokens_per_second;
  j["tokens_generated"] = r.tokens_generated;
  j["sensor_warnings"] = r.sensor_warnings;
  ordered_json counts = ordered_json::object();
  for (const auto& [v, n] : r.verdict_counts) counts[std::string(verdict_name(v))] = n;
  j["verdict_counts"] = counts;
  j["verdicts"] = ordered_json::array();
  for (Verdict v : r.verdicts) j["verdicts"].push_back(verdict_name(v));
  j["expected"] = {{"power_min_w", r.envelope.power_min_w},
                   {"power_max_w", r.envelope.power_max_w},
                   {"memory_budget_bytes", r.envelope.memory_budget_bytes},
                   {"utilization_target_pct", r.envelope.utilization_target_pct}};
  return j.dump();
}

std::string run_report_table(const RunReport& r) {
  char buf[256];
  std::string out;
  auto row = [&](const char* metric, const std::string& measured, const std::string& expected) {
    std::snprintf(buf, sizeof(buf), "%-24s %-22s %-16s\n", metric, measured.c_str(), expected.c_str());
    out += buf;
  };
  char expected[64];
  row("Metric", "Measured", "Expected");
  std::snprintf(expected, sizeof(expected), "%.0f", r.envelope.utilization_target_pct);
  row("GPU Utilization (%)", format_optional(r.mean_utilization_pct, "%.1f (as-reported)"), expected);
  std::snprintf(expected, sizeof(expected), "%g-%g", r.envelope.power_min_w, r.envelope.power_max_w);
  row("Power Consumption (W)", format_optional(r.mean_power_w, "%.1f"), expected);
  std::snprintf(expected, sizeof(expected), "<= %.1f",
                static_cast<double>(r.envelope.memory_budget_bytes) / static_cast<double>(kGiB));
  row("Memory Usage (GB)",
      format_optional(static_cast<double>(r.peak_memory_bytes) / static_cast<double>(kGiB), "%.3f"), expected);
  return out;
}

Sampler::Sampler(PowerProvider provider, const TelemetryCounters& counters, std::chrono::milliseconds period,
                 std::size_t capacity)
    : provider_(std::move(provider)), counters_(counters), period_(period), capacity_(std::max<std::size_t>(capacity, 1)) {}

Sampler::~Sampler() { stop(); }

void Sampler::start() {
  std::lock_guard lock(mutex_);
  if (running_) return;
  running_ = true;
  thread_ = std::thread([this] { loop(); });
}

void Sampler::stop() {
  {
    std::lock_guard lock(mutex_);
    if (!running_) return;
    running_ = false;
  }
  wake_.notify_all();
  if (thread_.joinable()) thread_.join();
}

TelemetrySnapshot Sampler::sample_now() {
  std::optional<TelemetrySnapshot> prev = latest();
  TelemetrySnapshot s = sample(provider_, counters_, prev ? &*prev : nullptr);
  push(s);
  return s;
}

std::optional<TelemetrySnapshot> Sampler::latest() const {
  std::lock_guard lock(mutex_);
  if (ring_.empty()) return std::nullopt;
  return ring_.back();
}

std::vector<TelemetrySnapshot> Sampler::snapshots() const {
  std::lock_guard lock(mutex_);
  return {ring_.begin(), ring_.end()};
}

void Sampler::push(const TelemetrySnapshot& s) {
  std::lock_guard lock(mutex_);
  ring_.push_back(s);
  while (ring_.size() > capacity_) ring_.pop_front();
}

void Sampler::loop() {
  std::unique_lock lock(mutex_);
  while (running_) {
    lock.unlock();
    sample_now();
    lock.lock();
    wake_.wait_for(lock, period_, [this] { return !running_; });
  }
}

}  // namespace tlvm
