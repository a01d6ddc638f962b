#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "dyndepth/backbone.hpp"
#include "dyndepth/random.hpp"

namespace dyndepth {

enum class OpKind : std::uint8_t {
  kEmbed,      // tokens -> x
  kLayerNorm,  // x -> normed (unfused plans only)
  kLnLinear,   // x -> normed, normed W + b (optionally relu)
  kLinear,     // x W + b (+ residual) (optionally relu)
  kAttention,  // q, k, v -> out
  kMeanPool,   // x -> 1 x d
};

const char* op_name(OpKind kind);

struct OpDesc {
  OpKind kind;
  int in = -1;        // primary input buffer
  int in_k = -1;      // attention key buffer
  int in_v = -1;      // attention value buffer
  int residual = -1;  // buffer added to the output
  int normed = -1;    // layer-norm output (kLnLinear, kLayerNorm)
  int out = -1;
  Index cols = 0;     // output width
  bool pooled = false;  // rows = 1 instead of the sequence length
  bool relu = false;
  const LayerNormParams* ln = nullptr;
  const Linear* lin = nullptr;
  std::int64_t flops = 0;
};

struct CompileOptions {
  bool fuse_layer_norm = true;
};

/// Immutable op list for one depth. Every buffer is sized for max_seq_len
/// rows and placed at a fixed offset in one arena; scratch space for folded
/// linears and attention scores follows the buffers.
struct ExecutionPlan {
  int depth = 0;
  Index max_seq_len = 0;
  std::vector<OpDesc> ops;
  std::vector<std::size_t> buffer_doubles;  // id -> size
  std::vector<std::size_t> buffer_offset;   // id -> offset (doubles)
  std::size_t scratch_offset = 0;
  std::size_t scratch_doubles = 0;
  std::size_t total_doubles = 0;
  std::int64_t flops = 0;
  int logits_buffer = -1;
  Index num_classes = 0;
  std::shared_ptr<const BackboneParams> params;

  std::size_t op_count() const { return ops.size(); }
  std::size_t buffer_bytes() const { return (total_doubles - scratch_doubles) * sizeof(double); }
  std::size_t total_bytes() const { return total_doubles * sizeof(double); }
};

std::vector<ExecutionPlan> compile_plans(std::shared_ptr<const BackboneParams> params,
                                         const CompileOptions& options = {});

// ---------------------------------------------------------------------------
// Probability-driven pool.

struct DepthDistribution {
  Vector probs;
  double ema_weight = 0.9;
  long updates = 0;

  static DepthDistribution uniform(int num_layers);
  static DepthDistribution onehot(int num_layers, int depth);
  int num_layers() const { return static_cast<int>(probs.size()); }
};

/// probs <- w probs + (1 - w) onehot(depth).
DepthDistribution update_distribution(const DepthDistribution& dist, int observed_depth);

class BufferPool;

/// Exclusive use of a slab (pool hit) or of a fresh allocation (miss).
class Lease {
 public:
  Lease() = default;
  Lease(Lease&& other) noexcept;
  Lease& operator=(Lease&& other) noexcept;
  Lease(const Lease&) = delete;
  Lease& operator=(const Lease&) = delete;
  ~Lease();

  double* data() const { return data_; }
  bool hit() const { return pool_ != nullptr; }
  std::size_t bytes() const { return bytes_; }

  static Lease fresh(std::size_t doubles);

 private:
  friend class BufferPool;
  BufferPool* pool_ = nullptr;
  int slab_ = -1;
  double* data_ = nullptr;
  std::size_t bytes_ = 0;
  std::unique_ptr<double[]> owned_;
};

class BufferPool {
 public:
  /// `plan_bytes[l - 1]` is the arena size needed by plan l (rounded up to
  /// 64 bytes internally).
  BufferPool(std::size_t capacity_bytes, std::vector<std::size_t> plan_bytes);

  /// Re-carves the arena: depth l gets floor(p_l capacity / E[bytes]) slabs,
  /// leftover space goes to the deepest plans that fit, and one slab always
  /// fits the largest plan. Throws ConfigurationError when the arena cannot
  /// hold the largest plan or a slab is checked out.
  void rebalance(const DepthDistribution& dist);

  /// Best-fit free slab with room for plan `depth`; falls back to a fresh
  /// allocation (counted as a miss) when none is free.
  Lease checkout(int depth);

  std::size_t capacity() const { return capacity_; }
  std::size_t reserved_bytes() const;
  int slab_count(int depth) const;
  long hits() const;
  long misses() const;
  double hit_rate() const;
  void reset_counters();

 private:
  friend class Lease;
  void release(int slab);

  struct Slab {
    std::size_t offset = 0;  // doubles
    std::size_t bytes = 0;
    int depth = 0;
    bool busy = false;
  };

  std::size_t capacity_;
  std::vector<std::size_t> plan_bytes_;
  std::unique_ptr<double[]> arena_;
  std::vector<Slab> slabs_;
  long hits_ = 0;
  long misses_ = 0;
  mutable std::mutex mu_;
};

/// Expected bytes in flight with `concurrency` simultaneous executions.
double expected_working_set(const DepthDistribution& dist, std::span<const std::size_t> plan_bytes,
                            int concurrency);

/// Draws `executions` depths from `dist` in rounds of `concurrency`
/// simultaneous checkouts and returns the pool hit rate.
double simulate_hit_rate(BufferPool& pool, const DepthDistribution& dist, int executions,
                         int concurrency, Rng& rng);

// ---------------------------------------------------------------------------
// Execution.

struct ExecMetrics {
  int depth = 0;
  std::int64_t flops = 0;
  std::size_t peak_bytes = 0;
  bool pool_hit = false;
  std::int64_t wall_time_ns = 0;
};

struct ExecResult {
  Vector logits;
  ExecMetrics metrics;
};

/// `pool` may be null, in which case a fresh arena is allocated.
ExecResult execute(const ExecutionPlan& plan, std::span<const int> tokens, BufferPool* pool);

/// Runs `order` (a list of depths) through the plans; returns wall time in ns.
std::int64_t time_executions(const std::vector<ExecutionPlan>& plans,
                             std::span<const TokenSequence> inputs, std::span<const int> order,
                             BufferPool* pool);

struct SwitchOverhead {
  double random_ns = 0.0;
  double sorted_ns = 0.0;
  double ratio = 0.0;
};

/// Same multiset of depths executed in random and in depth-sorted order;
/// each side keeps its best of `repeats` passes.
SwitchOverhead measure_switch_overhead(const std::vector<ExecutionPlan>& plans,
                                       std::span<const TokenSequence> inputs,
                                       std::span<const int> depths, int repeats, Rng& rng);

}  // namespace dyndepth
