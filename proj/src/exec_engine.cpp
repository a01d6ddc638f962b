#include "dyndepth/exec_engine.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

namespace dyndepth {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kEmbed: return "embed";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kLnLinear: return "ln_linear";
    case OpKind::kLinear: return "linear";
    case OpKind::kAttention: return "attention";
    case OpKind::kMeanPool: return "mean_pool";
  }
  return "?";
}

namespace {

// Buffers and slabs start on 64-byte boundaries so Eigen's vectorised loops
// peel identically wherever an arena lives; otherwise reductions could round
// differently between pool hits and fresh allocations.
constexpr std::size_t kAlignDoubles = 8;

std::size_t align_up(std::size_t doubles) {
  return (doubles + kAlignDoubles - 1) / kAlignDoubles * kAlignDoubles;
}

double* aligned_base(double* raw) {
  const auto addr = reinterpret_cast<std::uintptr_t>(raw);
  const std::uintptr_t bytes = kAlignDoubles * sizeof(double);
  return reinterpret_cast<double*>((addr + bytes - 1) / bytes * bytes);
}

class PlanBuilder {
 public:
  PlanBuilder(const BackboneParams& params, int depth, bool fuse) : p_(params), fuse_(fuse) {
    plan_.depth = depth;
    plan_.max_seq_len = params.config.max_seq_len;
    plan_.num_classes = params.config.num_classes;
  }

  int buffer(Index rows, Index cols) {
    plan_.buffer_doubles.push_back(static_cast<std::size_t>(rows * cols));
    return static_cast<int>(plan_.buffer_doubles.size()) - 1;
  }

  int seq_buffer(Index cols) { return buffer(plan_.max_seq_len, cols); }

  void note_rank(const Linear& lin, Index rows) {
    if (lin.folded) max_scratch_ = std::max<std::size_t>(max_scratch_, rows * lin.rank());
  }

  int linear(int in, const Linear& lin, int residual, bool relu, bool pooled) {
    OpDesc op{};
    op.kind = OpKind::kLinear;
    op.in = in;
    op.residual = residual;
    op.relu = relu;
    op.pooled = pooled;
    op.lin = &lin;
    op.cols = lin.out_dim();
    const Index rows = pooled ? 1 : plan_.max_seq_len;
    op.out = buffer(rows, op.cols);
    op.flops = linear_flops(rows, lin);
    note_rank(lin, rows);
    plan_.ops.push_back(op);
    return op.out;
  }

  /// Returns {normed, out}.
  std::pair<int, int> ln_linear(int in, const LayerNormParams& ln, const Linear& lin, bool relu,
                                bool pooled) {
    const Index rows = pooled ? 1 : plan_.max_seq_len;
    const Index d = p_.config.hidden;
    if (!fuse_) {
      OpDesc norm{};
      norm.kind = OpKind::kLayerNorm;
      norm.in = in;
      norm.ln = &ln;
      norm.pooled = pooled;
      norm.cols = d;
      norm.out = buffer(rows, d);
      norm.normed = norm.out;
      plan_.ops.push_back(norm);
      return {norm.out, linear(norm.out, lin, -1, relu, pooled)};
    }
    OpDesc op{};
    op.kind = OpKind::kLnLinear;
    op.in = in;
    op.ln = &ln;
    op.lin = &lin;
    op.relu = relu;
    op.pooled = pooled;
    op.cols = lin.out_dim();
    op.normed = buffer(rows, d);
    op.out = buffer(rows, op.cols);
    op.flops = linear_flops(rows, lin);
    note_rank(lin, rows);
    plan_.ops.push_back(op);
    return {op.normed, op.out};
  }

  ExecutionPlan build() {
    const auto& cfg = p_.config;
    const Index d = cfg.hidden;
    const Index n = plan_.max_seq_len;

    OpDesc embed{};
    embed.kind = OpKind::kEmbed;
    embed.cols = d;
    embed.out = seq_buffer(d);
    plan_.ops.push_back(embed);
    int x = embed.out;

    for (int i = 0; i < plan_.depth; ++i) {
      const auto& layer = p_.layers[i];
      const auto [a1, q] = ln_linear(x, layer.ln1, layer.q, false, false);
      const int k = linear(a1, layer.k, -1, false, false);
      const int v = linear(a1, layer.v, -1, false, false);
      OpDesc att{};
      att.kind = OpKind::kAttention;
      att.in = q;
      att.in_k = k;
      att.in_v = v;
      att.cols = d;
      att.out = seq_buffer(d);
      att.flops = 4 * static_cast<std::int64_t>(n) * n * d;
      plan_.ops.push_back(att);
      max_scratch_ = std::max<std::size_t>(max_scratch_, n * n);
      const int xm = linear(att.out, layer.o, x, false, false);
      const auto [a2, f] = ln_linear(xm, layer.ln2, layer.ffn_in, true, false);
      x = linear(f, layer.ffn_out, xm, false, false);
    }

    OpDesc pool{};
    pool.kind = OpKind::kMeanPool;
    pool.in = x;
    pool.cols = d;
    pool.pooled = true;
    pool.out = buffer(1, d);
    plan_.ops.push_back(pool);
    const auto& head = p_.exits[plan_.depth - 1];
    plan_.logits_buffer = ln_linear(pool.out, head.ln, head.out, false, true).second;

    std::size_t at = 0;
    for (std::size_t size : plan_.buffer_doubles) {
      plan_.buffer_offset.push_back(at);
      at += align_up(size);
    }
    plan_.scratch_offset = at;
    plan_.scratch_doubles = align_up(max_scratch_);
    plan_.total_doubles = at + plan_.scratch_doubles;
    for (const auto& op : plan_.ops) plan_.flops += op.flops;
    return std::move(plan_);
  }

 private:
  const BackboneParams& p_;
  bool fuse_;
  ExecutionPlan plan_;
  std::size_t max_scratch_ = 0;
};

}  // namespace

std::vector<ExecutionPlan> compile_plans(std::shared_ptr<const BackboneParams> params,
                                         const CompileOptions& options) {
  if (!params) throw InputError("compile_plans: null parameters");
  params->config.validate();
  std::vector<ExecutionPlan> plans;
  for (int l = 1; l <= params->config.num_layers; ++l) {
    auto plan = PlanBuilder(*params, l, options.fuse_layer_norm).build();
    plan.params = params;
    plans.push_back(std::move(plan));
  }
  return plans;
}

// ---------------------------------------------------------------------------
// Distribution and pool

DepthDistribution DepthDistribution::uniform(int num_layers) {
  if (num_layers < 1) throw ParameterError("DepthDistribution: need at least one depth");
  DepthDistribution d;
  d.probs = Vector::Constant(num_layers, 1.0 / num_layers);
  return d;
}

DepthDistribution DepthDistribution::onehot(int num_layers, int depth) {
  if (depth < 1 || depth > num_layers) throw ParameterError("DepthDistribution: depth out of range");
  DepthDistribution d;
  d.probs = Vector::Zero(num_layers);
  d.probs[depth - 1] = 1.0;
  return d;
}

DepthDistribution update_distribution(const DepthDistribution& dist, int observed_depth) {
  if (observed_depth < 1 || observed_depth > dist.num_layers()) {
    throw ParameterError("update_distribution: depth " + std::to_string(observed_depth) +
                         " outside [1, " + std::to_string(dist.num_layers()) + "]");
  }
  DepthDistribution out = dist;
  out.probs *= dist.ema_weight;
  out.probs[observed_depth - 1] += 1.0 - dist.ema_weight;
  ++out.updates;
  return out;
}

Lease::Lease(Lease&& other) noexcept { *this = std::move(other); }

Lease& Lease::operator=(Lease&& other) noexcept {
  if (this != &other) {
    if (pool_) pool_->release(slab_);
    pool_ = std::exchange(other.pool_, nullptr);
    slab_ = std::exchange(other.slab_, -1);
    data_ = std::exchange(other.data_, nullptr);
    bytes_ = std::exchange(other.bytes_, 0);
    owned_ = std::move(other.owned_);
  }
  return *this;
}

Lease::~Lease() {
  if (pool_) pool_->release(slab_);
}

Lease Lease::fresh(std::size_t doubles) {
  Lease l;
  l.owned_ = std::make_unique<double[]>(doubles + kAlignDoubles);
  l.data_ = aligned_base(l.owned_.get());
  l.bytes_ = doubles * sizeof(double);
  return l;
}

BufferPool::BufferPool(std::size_t capacity_bytes, std::vector<std::size_t> plan_bytes)
    : capacity_(capacity_bytes), plan_bytes_(std::move(plan_bytes)) {
  if (plan_bytes_.empty()) throw ParameterError("BufferPool: no plans");
  for (auto& b : plan_bytes_) b = align_up((b + sizeof(double) - 1) / sizeof(double)) * sizeof(double);
  arena_ = std::make_unique<double[]>(capacity_ / sizeof(double) + kAlignDoubles);
}

void BufferPool::rebalance(const DepthDistribution& dist) {
  if (dist.num_layers() != static_cast<int>(plan_bytes_.size())) {
    throw ParameterError("BufferPool::rebalance: distribution over " +
                         std::to_string(dist.num_layers()) + " depths, pool has " +
                         std::to_string(plan_bytes_.size()) + " plans");
  }
  const std::size_t largest = *std::max_element(plan_bytes_.begin(), plan_bytes_.end());
  if (capacity_ < largest) {
    throw ConfigurationError("BufferPool: capacity " + std::to_string(capacity_) +
                             " bytes is below the largest plan (" + std::to_string(largest) +
                             " bytes)");
  }
  std::lock_guard lock(mu_);
  if (std::any_of(slabs_.begin(), slabs_.end(), [](const Slab& s) { return s.busy; })) {
    throw ConfigurationError("BufferPool::rebalance: slabs are checked out");
  }
  const int L = dist.num_layers();
  double mean_bytes = 0.0;
  int deepest = 0;
  for (int l = 0; l < L; ++l) {
    mean_bytes += dist.probs[l] * plan_bytes_[l];
    if (dist.probs[l] > 0.0) deepest = l;
  }
  // Depth l is expected to hold p_l of the concurrent executions, so it gets
  // p_l * capacity / mean_bytes slabs.
  std::vector<int> count(L, 0);
  std::size_t used = 0;
  for (int l = 0; l < L; ++l) {
    count[l] = static_cast<int>(dist.probs[l] * static_cast<double>(capacity_) / mean_bytes);
    used += count[l] * plan_bytes_[l];
  }
  // Leftover goes to the deepest slab that still fits; a larger slab can
  // serve any shallower plan.
  for (int l = deepest; l >= 0; --l) {
    while (used + plan_bytes_[l] <= capacity_) {
      ++count[l];
      used += plan_bytes_[l];
    }
  }
  // Always keep one slab that fits the largest plan.
  const int big = static_cast<int>(std::max_element(plan_bytes_.begin(), plan_bytes_.end()) -
                                   plan_bytes_.begin());
  if (count[big] == 0) {
    // Give up the least likely slabs until the largest plan fits.
    std::vector<int> order(L);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dist.probs[a] < dist.probs[b]; });
    for (int l : order) {
      for (; count[l] > 0 && used + largest > capacity_; --count[l]) used -= plan_bytes_[l];
    }
    ++count[big];
  }

  slabs_.clear();
  std::size_t offset = 0;
  for (int l = 0; l < L; ++l) {
    for (int c = 0; c < count[l]; ++c) {
      slabs_.push_back({offset, plan_bytes_[l], l + 1, false});
      offset += plan_bytes_[l] / sizeof(double);
    }
  }
}

Lease BufferPool::checkout(int depth) {
  if (depth < 1 || depth > static_cast<int>(plan_bytes_.size())) {
    throw ParameterError("BufferPool::checkout: depth " + std::to_string(depth) + " out of range");
  }
  const std::size_t need = plan_bytes_[depth - 1];
  {
    std::lock_guard lock(mu_);
    int best = -1;
    for (int i = 0; i < static_cast<int>(slabs_.size()); ++i) {
      const auto& s = slabs_[i];
      if (s.busy || s.bytes < need) continue;
      if (best < 0 || s.bytes < slabs_[best].bytes) best = i;
    }
    if (best >= 0) {
      slabs_[best].busy = true;
      ++hits_;
      Lease l;
      l.pool_ = this;
      l.slab_ = best;
      l.data_ = aligned_base(arena_.get()) + slabs_[best].offset;
      l.bytes_ = slabs_[best].bytes;
      return l;
    }
    ++misses_;
  }
  return Lease::fresh((need + sizeof(double) - 1) / sizeof(double));
}

void BufferPool::release(int slab) {
  std::lock_guard lock(mu_);
  slabs_[slab].busy = false;
}

std::size_t BufferPool::reserved_bytes() const {
  std::lock_guard lock(mu_);
  std::size_t total = 0;
  for (const auto& s : slabs_) total += s.bytes;
  return total;
}

int BufferPool::slab_count(int depth) const {
  std::lock_guard lock(mu_);
  return static_cast<int>(
      std::count_if(slabs_.begin(), slabs_.end(), [&](const Slab& s) { return s.depth == depth; }));
}

long BufferPool::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

long BufferPool::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

double BufferPool::hit_rate() const {
  std::lock_guard lock(mu_);
  const long total = hits_ + misses_;
  return total == 0 ? 0.0 : static_cast<double>(hits_) / total;
}

void BufferPool::reset_counters() {
  std::lock_guard lock(mu_);
  hits_ = misses_ = 0;
}

double expected_working_set(const DepthDistribution& dist, std::span<const std::size_t> plan_bytes,
                            int concurrency) {
  double mean = 0.0;
  for (int l = 0; l < dist.num_layers(); ++l) mean += dist.probs[l] * plan_bytes[l];
  return concurrency * mean;
}

namespace {

int sample_depth(const DepthDistribution& dist, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (int l = 0; l < dist.num_layers(); ++l) {
    acc += dist.probs[l];
    if (u < acc) return l + 1;
  }
  return dist.num_layers();
}

}  // namespace

double simulate_hit_rate(BufferPool& pool, const DepthDistribution& dist, int executions,
                         int concurrency, Rng& rng) {
  if (concurrency < 1 || executions < 1) throw ParameterError("simulate_hit_rate: bad sizes");
  pool.reset_counters();
  for (int done = 0; done < executions;) {
    std::vector<Lease> live;
    for (int c = 0; c < concurrency && done < executions; ++c, ++done) {
      live.push_back(pool.checkout(sample_depth(dist, rng)));
    }
  }
  return pool.hit_rate();
}

// ---------------------------------------------------------------------------
// Execution

ExecResult execute(const ExecutionPlan& plan, std::span<const int> tokens, BufferPool* pool) {
  const auto start = std::chrono::steady_clock::now();
  const auto& p = *plan.params;
  const Index n = static_cast<Index>(tokens.size());
  if (n == 0) throw InputError("execute: empty token sequence");
  if (n > plan.max_seq_len) {
    throw InputError("execute: sequence length " + std::to_string(n) + " exceeds plan maximum " +
                     std::to_string(plan.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= p.config.vocab_size) {
      throw InputError("execute: token " + std::to_string(t) + " outside vocabulary");
    }
  }

  Lease lease = pool ? pool->checkout(plan.depth) : Lease::fresh(plan.total_doubles);
  double* arena = lease.data();
  double* scratch = plan.scratch_doubles > 0 ? arena + plan.scratch_offset : nullptr;
  auto buf = [&](int id, Index rows, Index cols) {
    return Eigen::Map<Matrix>(arena + plan.buffer_offset[id], rows, cols);
  };
  const Index d = p.config.hidden;

  for (const auto& op : plan.ops) {
    const Index rows = op.pooled ? 1 : n;
    switch (op.kind) {
      case OpKind::kEmbed: {
        auto x = buf(op.out, n, d);
        for (Index t = 0; t < n; ++t) {
          x.row(t) = p.token_embedding.row(tokens[t]) + p.position_embedding.row(t);
        }
        break;
      }
      case OpKind::kLayerNorm:
        layer_norm_forward(buf(op.in, rows, d), *op.ln, buf(op.out, rows, d));
        break;
      case OpKind::kLnLinear: {
        auto normed = buf(op.normed, rows, d);
        layer_norm_forward(buf(op.in, rows, d), *op.ln, normed);
        auto y = buf(op.out, rows, op.cols);
        linear_forward(normed, *op.lin, y, scratch);
        if (op.relu) y = y.cwiseMax(0.0);
        break;
      }
      case OpKind::kLinear: {
        auto y = buf(op.out, rows, op.cols);
        linear_forward(buf(op.in, rows, op.lin->in_dim()), *op.lin, y, scratch);
        if (op.residual >= 0) y += buf(op.residual, rows, op.cols);
        if (op.relu) y = y.cwiseMax(0.0);
        break;
      }
      case OpKind::kAttention:
        attention_forward(buf(op.in, n, d), buf(op.in_k, n, d), buf(op.in_v, n, d),
                          p.config.heads, buf(op.out, n, d), nullptr, scratch);
        break;
      case OpKind::kMeanPool:
        buf(op.out, 1, d) = buf(op.in, n, d).colwise().mean();
        break;
    }
  }

  ExecResult r;
  r.logits = buf(plan.logits_buffer, 1, plan.num_classes).row(0).transpose();
  r.metrics.depth = plan.depth;
  r.metrics.flops = plan.flops;
  r.metrics.peak_bytes = plan.total_bytes();
  r.metrics.pool_hit = lease.hit();
  r.metrics.wall_time_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                               std::chrono::steady_clock::now() - start)
                               .count();
  return r;
}

std::int64_t time_executions(const std::vector<ExecutionPlan>& plans,
                             std::span<const TokenSequence> inputs, std::span<const int> order,
                             BufferPool* pool) {
  const auto start = std::chrono::steady_clock::now();
  double sink = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    sink += execute(plans[order[i] - 1], inputs[i % inputs.size()], pool).logits[0];
  }
  const auto stop = std::chrono::steady_clock::now();
  if (!std::isfinite(sink)) throw EvaluationError("time_executions: non-finite logits");
  return std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count();
}

SwitchOverhead measure_switch_overhead(const std::vector<ExecutionPlan>& plans,
                                       std::span<const TokenSequence> inputs,
                                       std::span<const int> depths, int repeats, Rng& rng) {
  std::vector<int> shuffled(depths.begin(), depths.end());
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<int> sorted(depths.begin(), depths.end());
  std::sort(sorted.begin(), sorted.end());

  std::vector<std::size_t> bytes;
  for (const auto& p : plans) bytes.push_back(p.total_bytes());
  BufferPool pool(2 * *std::max_element(bytes.begin(), bytes.end()), bytes);
  pool.rebalance(DepthDistribution::onehot(static_cast<int>(plans.size()),
                                           static_cast<int>(plans.size())));

  SwitchOverhead out;
  out.random_ns = out.sorted_ns = 1e300;
  // Interleave the two orders so drift in machine load hits both equally.
  for (int r = 0; r < repeats; ++r) {
    out.random_ns = std::min<double>(out.random_ns, time_executions(plans, inputs, shuffled, &pool));
    out.sorted_ns = std::min<double>(out.sorted_ns, time_executions(plans, inputs, sorted, &pool));
  }
  out.ratio = out.random_ns / out.sorted_ns;
  return out;
}

}  // namespace dyndepth
