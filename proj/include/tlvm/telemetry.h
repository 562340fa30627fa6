#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace tlvm {

constexpr std::uint64_t kGiB = 1ull << 30;

struct BudgetEnvelope {
  double power_min_w = 10.0;
  double power_max_w = 30.0;
  std::uint64_t memory_budget_bytes = 32 * kGiB;
  double utilization_target_pct = 100.0;

  // Throws kInvalidConfig unless min < max and the budget is positive.
  void validate() const;
};

struct TelemetrySnapshot {
  std::int64_t timestamp_ms = 0;  // wall clock, ms since epoch
  std::uint64_t resident_bytes = 0;
  std::uint64_t peak_resident_bytes = 0;
  std::uint64_t tokens_generated = 0;
  double tokens_per_second = 0.0;
  double last_token_latency_ms = 0.0;
  std::optional<double> power_w;
  std::optional<double> utilization_pct;
  bool sensor_warning = false;
  bool operator==(const TelemetrySnapshot&) const = default;
};

struct PowerReading {
  std::optional<double> power_w;
  std::optional<double> utilization_pct;
  bool warning = false;
};

class PowerProvider {
 public:
  enum class Kind { kNone, kSim, kFile };

  static PowerProvider none();
  static PowerProvider sim(double power_w, double utilization_pct);
  static PowerProvider file(std::filesystem::path path);
  // "none", "sim:<w>,<pct>" or "file:<path>"; throws kInvalidArgument.
  static PowerProvider parse(std::string_view spec);

  Kind kind() const { return kind_; }
  std::string describe() const;
  // FILE re-reads the file on every call; a read or parse failure yields no
  // values and sets the warning flag.
  PowerReading read() const;

 private:
  Kind kind_ = Kind::kNone;
  double power_w_ = 0.0;
  double utilization_pct_ = 0.0;
  std::filesystem::path path_;
};

// Lock-free counters the generation path bumps once per token.
class TelemetryCounters {
 public:
  TelemetryCounters();
  void record_token(double latency_ms);
  std::uint64_t tokens() const { return tokens_.load(std::memory_order_relaxed); }
  double last_latency_ms() const { return last_latency_ms_.load(std::memory_order_relaxed); }
  std::chrono::steady_clock::time_point started() const { return started_; }

 private:
  std::atomic<std::uint64_t> tokens_{0};
  std::atomic<double> last_latency_ms_{0.0};
  std::chrono::steady_clock::time_point started_;
};

struct MemoryUsage {
  std::uint64_t resident_bytes = 0;
  std::uint64_t peak_resident_bytes = 0;
};
// VmRSS and VmHWM of this process; zeros where the platform has no probe.
MemoryUsage process_memory();

// Takes one snapshot. tokens_per_second covers the window since `previous`
// (or since the counters were created) and is 0 when no tokens were produced.
TelemetrySnapshot sample(const PowerProvider& provider, const TelemetryCounters& counters,
                         const TelemetrySnapshot* previous = nullptr);

enum class Verdict { kOk, kOverPower, kUnderPower, kOverMemory };
using VerdictSet = std::set<Verdict>;
std::string_view verdict_name(Verdict v);

// Every violated bound, or {kOk}. Bounds are inclusive; absent power gives no
// power verdicts.
VerdictSet check_budget(const TelemetrySnapshot& snapshot, const BudgetEnvelope& envelope);

struct RunReport {
  std::size_t n_snapshots = 0;
  std::optional<double> mean_power_w;
  std::optional<double> max_power_w;
  std::optional<double> mean_utilization_pct;
  std::uint64_t peak_memory_bytes = 0;
  double mean_tokens_per_second = 0.0;
  std::uint64_t tokens_generated = 0;
  std::size_t sensor_warnings = 0;
  std::map<Verdict, std::size_t> verdict_counts;  // snapshots carrying each verdict
  VerdictSet verdicts;                            // union over snapshots
  BudgetEnvelope envelope;
};

// Throws kInvalidArgument on empty input.
RunReport aggregate_run(const std::vector<TelemetrySnapshot>& snapshots,
                        const BudgetEnvelope& envelope = {});

std::string snapshot_to_json(const TelemetrySnapshot& snapshot);
std::string run_report_to_json(const RunReport& report);
// Metric / measured / expected rows for utilization, power and memory.
std::string run_report_table(const RunReport& report);

// Periodic sampler writing into a bounded ring; readers never block the
// counters.
class Sampler {
 public:
  Sampler(PowerProvider provider, const TelemetryCounters& counters,
          std::chrono::milliseconds period = std::chrono::milliseconds(100), std::size_t capacity = 4096);
  ~Sampler();
  Sampler(const Sampler&) = delete;
  Sampler& operator=(const Sampler&) = delete;

  void start();
  void stop();
  // Takes a snapshot now, outside the periodic schedule.
  TelemetrySnapshot sample_now();
  std::optional<TelemetrySnapshot> latest() const;
  std::vector<TelemetrySnapshot> snapshots() const;

 private:
  void push(const TelemetrySnapshot& s);
  void loop();

  PowerProvider provider_;
  const TelemetryCounters& counters_;
  std::chrono::milliseconds period_;
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable wake_;
  std::deque<TelemetrySnapshot> ring_;
  bool running_ = false;
  std::thread thread_;
};

}  // namespace tlvm
