#pragma once

// Reverse-mode differentiation over a static expression graph.
//
// A Graph is built once (nodes are appended in topological order) and can then
// be evaluated at any ParamVector of the right size. Nodes hold vectors or
// matrices; parameters enter through Param leaves that alias contiguous ranges
// of the ParamVector. All reductions run left to right in index order, so a
// given graph and parameter vector always produce the same bits.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dvrp::grad {

/// log of a non-positive value, division by zero, or a NaN result.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  bool operator==(const ParamBlock&) const = default;
};

/// Flat f64 parameter storage partitioned into named, contiguous blocks.
class ParamVector {
 public:
  ParamVector() = default;
  /// Validates that the blocks tile `values` contiguously in order.
  ParamVector(std::vector<ParamBlock> blocks, std::vector<double> values);

  /// Appends a block of `length` entries initialised to `fill`; returns its offset.
  std::size_t addBlock(std::string name, std::size_t length, double fill = 0.0);

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

  bool hasBlock(std::string_view name) const;
  const ParamBlock& block(std::string_view name) const;
  std::span<double> blockValues(std::string_view name);
  std::span<const double> blockValues(std::string_view name) const;

  bool allFinite() const;

  /// Bitwise equality of layout and values (distinguishes -0.0 and NaN payloads).
  bool bitwiseEqual(const ParamVector& other) const;

 private:
  std::vector<ParamBlock> blocks_;
  std::vector<double> values_;
};

struct Ref {
  std::uint32_t index = UINT32_MAX;
  bool valid() const { return index != UINT32_MAX; }
  bool operator==(const Ref&) const = default;
};

enum class Op : std::uint8_t {
  Param,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  Neg,
  Exp,
  Log,
  Tanh,
  Min,
  Clamp,
  MatVec,
  Row,
  Concat,
  SumOf,
  Softmax,
  LogSoftmax,
  Sum,
  Dot,
  Element,
  StopGradient,
};

class Graph {
 public:
  explicit Graph(std::size_t paramCount) : paramCount_(paramCount) {}

  std::size_t paramCount() const { return paramCount_; }
  std::size_t nodeCount() const { return nodes_.size(); }

  /// Matrix leaf of shape rows x cols (row-major) aliasing params[offset ...].
  Ref param(std::size_t offset, std::size_t rows, std::size_t cols = 1);
  Ref param(const ParamBlock& block, std::size_t rows, std::size_t cols = 1);
  Ref constant(std::span<const double> values);
  Ref constant(double value);

  // Elementwise; operands have equal size or one of them is a scalar.
  Ref add(Ref a, Ref b);
  Ref sub(Ref a, Ref b);
  Ref mul(Ref a, Ref b);
  Ref div(Ref a, Ref b);
  Ref minimum(Ref a, Ref b);

  Ref scale(Ref a, double factor);
  Ref neg(Ref a);
  Ref exp(Ref a);
  Ref log(Ref a);
  Ref tanh(Ref a);
  /// Gradient passes where lo <= a <= hi and is exactly zero outside.
  Ref clamp(Ref a, double lo, double hi);

  Ref matVec(Ref matrix, Ref vector);
  Ref row(Ref matrix, std::size_t r);
  Ref concat(std::span<const Ref> parts);
  /// Elementwise n-ary sum; terms added strictly left to right.
  Ref sumOf(std::span<const Ref> terms);

  Ref softmax(Ref logits);
  Ref logSoftmax(Ref logits);
  Ref sum(Ref a);
  Ref dot(Ref a, Ref b);
  Ref element(Ref a, std::size_t i);
  Ref stopGradient(Ref a);

  std::size_t size(Ref r) const;
  std::size_t rows(Ref r) const;
  std::size_t cols(Ref r) const;
  bool dependsOnParams(Ref r) const;

 private:
  friend class Evaluation;

  struct Node {
    Op op;
    bool needsGrad = false;
    std::uint32_t a = UINT32_MAX;
    std::uint32_t b = UINT32_MAX;
    std::uint32_t rows = 0;
    std::uint32_t cols = 1;
    std::size_t data = 0;   // param offset, constant offset, or n-ary input start
    std::size_t count = 0;  // n-ary input count or selected index
    double lo = 0.0;
    double hi = 0.0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  };

  const Node& node(Ref r) const;
  Ref push(Node n);
  Ref binary(Op op, Ref a, Ref b);
  Ref unary(Op op, Ref a);

  std::size_t paramCount_;
  std::vector<Node> nodes_;
  std::vector<double> constants_;
  std::vector<std::uint32_t> operands_;
};

/// One forward evaluation of a graph at fixed parameters; the reverse pass can
/// then be run from any scalar node.
class Evaluation {
 public:
  Evaluation(const Graph& graph, std::span<const double> params);

  std::span<const double> value(Ref r) const;
  double scalar(Ref r) const;

  std::vector<double> gradient(Ref root) const;
  /// out += weight * d(root)/d(params).
  void accumulateGradient(Ref root, std::span<double> out, double weight = 1.0) const;

 private:
  const double* ptr(std::uint32_t i) const { return valuePtr_[i]; }

  const Graph& graph_;
  std::span<const double> params_;
  std::vector<double> arena_;
  std::vector<const double*> valuePtr_;
  std::vector<std::size_t> arenaOffset_;
};

/// A scalar function of a ParamVector described by (graph, root).
struct ScalarExpr {
  std::shared_ptr<const Graph> graph;
  Ref root;
};

double evalForward(const ScalarExpr& expr, const ParamVector& params);
std::vector<double> evalGradient(const ScalarExpr& expr, const ParamVector& params);

using ScalarFn = std::function<double(const ParamVector&)>;

/// Central differences (fn(p + h e_i) - fn(p - h e_i)) / 2h per coordinate.
std::vector<double> finiteDifferenceGradient(const ScalarFn& fn, const ParamVector& params, double h);

/// max over coordinates of |a - b| / max(|b|, absFloor / relTol); <= relTol means
/// every coordinate is within relTol relative or absFloor absolute error.
double maxGradientError(std::span<const double> analytic, std::span<const double> reference, double relTol,
                        double absFloor);

enum class ReductionMode { Deterministic, Fast };

/// Sums per-slot gradient vectors. Deterministic mode keeps one buffer per
/// slot and reduces them in slot order; Fast mode adds into a shared buffer as
/// contributions arrive.
class GradientAccumulator {
 public:
  GradientAccumulator(std::size_t size, std::size_t slots, ReductionMode mode);
  void add(std::size_t slot, std::span<const double> grad);
  std::vector<double> reduce() const;

 private:
  ReductionMode mode_;
  std::size_t size_;
  std::vector<std::vector<double>> slots_;
  std::vector<double> shared_;
  mutable std::mutex mutex_;
};

}  // namespace dvrp::grad
