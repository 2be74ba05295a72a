#include "dvrp/gradcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "dvrp/detail/kernels.hpp"

namespace dvrp::grad {

// ---------------------------------------------------------------------------
// ParamVector

ParamVector::ParamVector(std::vector<ParamBlock> blocks, std::vector<double> values)
    : blocks_(std::move(blocks)), values_(std::move(values)) {
  std::size_t expected = 0;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    if (b.offset != expected) {
      throw std::invalid_argument(fmt::format("block '{}' starts at {} but {} was expected", b.name, b.offset, expected));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (blocks_[j].name == b.name) throw std::invalid_argument(fmt::format("duplicate block name '{}'", b.name));
    }
    expected += b.length;
  }
  if (expected != values_.size()) {
    throw std::invalid_argument(fmt::format("blocks cover {} values but {} were given", expected, values_.size()));
  }
}

std::size_t ParamVector::addBlock(std::string name, std::size_t length, double fill) {
  if (hasBlock(name)) throw std::invalid_argument(fmt::format("duplicate block name '{}'", name));
  const std::size_t offset = values_.size();
  blocks_.push_back({std::move(name), offset, length});
  values_.resize(offset + length, fill);
  return offset;
}

bool ParamVector::hasBlock(std::string_view name) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const ParamBlock& b) { return b.name == name; });
}

const ParamBlock& ParamVector::block(std::string_view name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw std::out_of_range(fmt::format("no parameter block named '{}'", name));
}

std::span<double> ParamVector::blockValues(std::string_view name) {
  const auto& b = block(name);
  return std::span<double>(values_).subspan(b.offset, b.length);
}

std::span<const double> ParamVector::blockValues(std::string_view name) const {
  const auto& b = block(name);
  return std::span<const double>(values_).subspan(b.offset, b.length);
}

bool ParamVector::allFinite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

bool ParamVector::bitwiseEqual(const ParamVector& other) const {
  return blocks_ == other.blocks_ && values_.size() == other.values_.size() &&
         (values_.empty() || std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0);
}

// ---------------------------------------------------------------------------
// Graph construction

const Graph::Node& Graph::node(Ref r) const {
  if (!r.valid() || r.index >= nodes_.size()) throw std::invalid_argument("invalid node reference");
  return nodes_[r.index];
}

Ref Graph::push(Node n) {
  nodes_.push_back(n);
  return Ref{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::size_t Graph::size(Ref r) const { return node(r).size(); }
std::size_t Graph::rows(Ref r) const { return node(r).rows; }
std::size_t Graph::cols(Ref r) const { return node(r).cols; }
bool Graph::dependsOnParams(Ref r) const { return node(r).needsGrad; }

Ref Graph::param(std::size_t offset, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0 || offset + rows * cols > paramCount_) {
    throw std::invalid_argument(
        fmt::format("param leaf [{}, {}) outside parameter vector of size {}", offset, offset + rows * cols, paramCount_));
  }
  Node n{Op::Param};
  n.needsGrad = true;
  n.rows = static_cast<std::uint32_t>(rows);
  n.cols = static_cast<std::uint32_t>(cols);
  n.data = offset;
  return push(n);
}

Ref Graph::param(const ParamBlock& block, std::size_t rows, std::size_t cols) {
  if (rows * cols != block.length) {
    throw std::invalid_argument(fmt::format("block '{}' has {} values, not {}x{}", block.name, block.length, rows, cols));
  }
  return param(block.offset, rows, cols);
}

Ref Graph::constant(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("empty constant");
  Node n{Op::Constant};
  n.rows = static_cast<std::uint32_t>(values.size());
  n.data = constants_.size();
  constants_.insert(constants_.end(), values.begin(), values.end());
  return push(n);
}

Ref Graph::constant(double value) { return constant(std::span<const double>(&value, 1)); }

Ref Graph::binary(Op op, Ref a, Ref b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  const std::size_t sa = na.size();
  const std::size_t sb = nb.size();
  if (sa != sb && sa != 1 && sb != 1) {
    throw std::invalid_argument(fmt::format("elementwise size mismatch: {} vs {}", sa, sb));
  }
  Node n{op};
  n.a = a.index;
  n.b = b.index;
  n.needsGrad = na.needsGrad || nb.needsGrad;
  n.rows = static_cast<std::uint32_t>(std::max(sa, sb));
  return push(n);
}

Ref Graph::unary(Op op, Ref a) {
  const Node& na = node(a);
  Node n{op};
  n.a = a.index;
  n.needsGrad = na.needsGrad;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(n);
}

Ref Graph::add(Ref a, Ref b) { return binary(Op::Add, a, b); }
Ref Graph::sub(Ref a, Ref b) { return binary(Op::Sub, a, b); }
Ref Graph::mul(Ref a, Ref b) { return binary(Op::Mul, a, b); }
Ref Graph::div(Ref a, Ref b) { return binary(Op::Div, a, b); }
Ref Graph::minimum(Ref a, Ref b) { return binary(Op::Min, a, b); }

Ref Graph::scale(Ref a, double factor) {
  Ref r = unary(Op::Scale, a);
  nodes_[r.index].lo = factor;
  return r;
}

Ref Graph::neg(Ref a) { return unary(Op::Neg, a); }
Ref Graph::exp(Ref a) { return unary(Op::Exp, a); }
Ref Graph::log(Ref a) { return unary(Op::Log, a); }
Ref Graph::tanh(Ref a) { return unary(Op::Tanh, a); }

Ref Graph::clamp(Ref a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp requires lo <= hi");
  Ref r = unary(Op::Clamp, a);
  nodes_[r.index].lo = lo;
  nodes_[r.index].hi = hi;
  return r;
}

Ref Graph::matVec(Ref matrix, Ref vector) {
  const Node& m = node(matrix);
  const Node& x = node(vector);
  if (m.cols != x.size()) {
    throw std::invalid_argument(fmt::format("matVec: {}x{} matrix times vector of size {}", m.rows, m.cols, x.size()));
  }
  Node n{Op::MatVec};
  n.a = matrix.index;
  n.b = vector.index;
  n.needsGrad = m.needsGrad || x.needsGrad;
  n.rows = m.rows;
  return push(n);
}

Ref Graph::row(Ref matrix, std::size_t r) {
  const Node& m = node(matrix);
  if (r >= m.rows) throw std::invalid_argument(fmt::format("row {} out of range for {} rows", r, m.rows));
  Node n{Op::Row};
  n.a = matrix.index;
  n.needsGrad = m.needsGrad;
  n.rows = m.cols;
  n.count = r;
  return push(n);
}

Ref Graph::concat(std::span<const Ref> parts) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  Node n{Op::Concat};
  n.data = operands_.size();
  n.count = parts.size();
  std::size_t total = 0;
  for (Ref p : parts) {
    const Node& np = node(p);
    total += np.size();
    n.needsGrad = n.needsGrad || np.needsGrad;
    operands_.push_back(p.index);
  }
  n.rows = static_cast<std::uint32_t>(total);
  return push(n);
}

Ref Graph::sumOf(std::span<const Ref> terms) {
  if (terms.empty()) throw std::invalid_argument("sumOf of nothing");
  Node n{Op::SumOf};
  n.data = operands_.size();
  n.count = terms.size();
  const std::size_t s = node(terms[0]).size();
  for (Ref t : terms) {
    const Node& nt = node(t);
    if (nt.size() != s) throw std::invalid_argument("sumOf terms must share a size");
    n.needsGrad = n.needsGrad || nt.needsGrad;
    operands_.push_back(t.index);
  }
  n.rows = static_cast<std::uint32_t>(s);
  return push(n);
}

Ref Graph::softmax(Ref logits) {
  Ref r = unary(Op::Softmax, logits);
  nodes_[r.index].cols = 1;
  nodes_[r.index].rows = static_cast<std::uint32_t>(node(logits).size());
  return r;
}

Ref Graph::logSoftmax(Ref logits) {
  Ref r = unary(Op::LogSoftmax, logits);
  nodes_[r.index].cols = 1;
  nodes_[r.index].rows = static_cast<std::uint32_t>(node(logits).size());
  return r;
}

Ref Graph::sum(Ref a) {
  Ref r = unary(Op::Sum, a);
  nodes_[r.index].rows = 1;
  nodes_[r.index].cols = 1;
  return r;
}

Ref Graph::dot(Ref a, Ref b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.size() != nb.size()) throw std::invalid_argument("dot: size mismatch");
  Node n{Op::Dot};
  n.a = a.index;
  n.b = b.index;
  n.needsGrad = na.needsGrad || nb.needsGrad;
  n.rows = 1;
  return push(n);
}

Ref Graph::element(Ref a, std::size_t i) {
  const Node& na = node(a);
  if (i >= na.size()) throw std::invalid_argument(fmt::format("element {} out of range for size {}", i, na.size()));
  Node n{Op::Element};
  n.a = a.index;
  n.needsGrad = na.needsGrad;
  n.rows = 1;
  n.count = i;
  return push(n);
}

Ref Graph::stopGradient(Ref a) {
  Ref r = unary(Op::StopGradient, a);
  nodes_[r.index].needsGrad = false;
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

inline std::size_t bidx(std::size_t size, std::size_t i) { return size == 1 ? 0 : i; }

}  // namespace

Evaluation::Evaluation(const Graph& graph, std::span<const double> params) : graph_(graph), params_(params) {
  if (params.size() != graph.paramCount()) {
    throw std::invalid_argument(
        fmt::format("graph expects {} parameters but {} were given", graph.paramCount(), params.size()));
  }
  const auto& nodes = graph.nodes_;
  const std::size_t count = nodes.size();
  arenaOffset_.assign(count, 0);
  valuePtr_.assign(count, nullptr);
  std::size_t total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (nodes[i].op == Op::Param || nodes[i].op == Op::Constant) continue;
    arenaOffset_[i] = total;
    total += nodes[i].size();
  }
  arena_.assign(total, 0.0);

  for (std::size_t i = 0; i < count; ++i) {
    const auto& n = nodes[i];
    if (n.op == Op::Param) {
      valuePtr_[i] = params.data() + n.data;
      continue;
    }
    if (n.op == Op::Constant) {
      valuePtr_[i] = graph.constants_.data() + n.data;
      continue;
    }
    double* y = arena_.data() + arenaOffset_[i];
    valuePtr_[i] = y;
    const std::size_t sz = n.size();
    const double* a = n.a != UINT32_MAX ? valuePtr_[n.a] : nullptr;
    const double* b = n.b != UINT32_MAX ? valuePtr_[n.b] : nullptr;
    const std::size_t sa = n.a != UINT32_MAX ? nodes[n.a].size() : 0;
    const std::size_t sb = n.b != UINT32_MAX ? nodes[n.b].size() : 0;

    switch (n.op) {
      case Op::Add:
        for (std::size_t k = 0; k < sz; ++k) y[k] = a[bidx(sa, k)] + b[bidx(sb, k)];
        break;
      case Op::Sub:
        for (std::size_t k = 0; k < sz; ++k) y[k] = a[bidx(sa, k)] - b[bidx(sb, k)];
        break;
      case Op::Mul:
        for (std::size_t k = 0; k < sz; ++k) y[k] = a[bidx(sa, k)] * b[bidx(sb, k)];
        break;
      case Op::Div:
        for (std::size_t k = 0; k < sz; ++k) {
          const double d = b[bidx(sb, k)];
          if (d == 0.0) throw DomainError(fmt::format("division by zero at node {}", i));
          y[k] = a[bidx(sa, k)] / d;
        }
        break;
      case Op::Min:
        for (std::size_t k = 0; k < sz; ++k) {
          const double u = a[bidx(sa, k)];
          const double v = b[bidx(sb, k)];
          y[k] = u <= v ? u : v;
        }
        break;
      case Op::Scale:
        for (std::size_t k = 0; k < sz; ++k) y[k] = a[k] * n.lo;
        break;
      case Op::Neg:
        for (std::size_t k = 0; k < sz; ++k) y[k] = -a[k];
        break;
      case Op::Exp:
        for (std::size_t k = 0; k < sz; ++k) y[k] = std::exp(a[k]);
        break;
      case Op::Log:
        for (std::size_t k = 0; k < sz; ++k) {
          if (!(a[k] > 0.0)) throw DomainError(fmt::format("log of non-positive value {} at node {}", a[k], i));
          y[k] = std::log(a[k]);
        }
        break;
      case Op::Tanh:
        for (std::size_t k = 0; k < sz; ++k) y[k] = std::tanh(a[k]);
        break;
      case Op::Clamp:
        for (std::size_t k = 0; k < sz; ++k) y[k] = std::clamp(a[k], n.lo, n.hi);
        break;
      case Op::MatVec: {
        const auto& m = nodes[n.a];
        detail::matVec(a, m.rows, m.cols, b, y);
        break;
      }
      case Op::Row: {
        const auto& m = nodes[n.a];
        std::copy_n(a + n.count * m.cols, m.cols, y);
        break;
      }
      case Op::Concat: {
        double* out = y;
        for (std::size_t t = 0; t < n.count; ++t) {
          const std::uint32_t in = graph.operands_[n.data + t];
          const std::size_t s = nodes[in].size();
          std::copy_n(valuePtr_[in], s, out);
          out += s;
        }
        break;
      }
      case Op::SumOf: {
        std::copy_n(valuePtr_[graph.operands_[n.data]], sz, y);
        for (std::size_t t = 1; t < n.count; ++t) {
          const double* in = valuePtr_[graph.operands_[n.data + t]];
          for (std::size_t k = 0; k < sz; ++k) y[k] += in[k];
        }
        break;
      }
      case Op::Softmax:
        detail::softmax(a, sz, y);
        break;
      case Op::LogSoftmax:
        detail::logSoftmax(a, sz, y);
        break;
      case Op::Sum: {
        double acc = 0.0;
        for (std::size_t k = 0; k < sa; ++k) acc += a[k];
        y[0] = acc;
        break;
      }
      case Op::Dot: {
        double acc = 0.0;
        for (std::size_t k = 0; k < sa; ++k) acc += a[k] * b[k];
        y[0] = acc;
        break;
      }
      case Op::Element:
        y[0] = a[n.count];
        break;
      case Op::StopGradient:
        std::copy_n(a, sz, y);
        break;
      case Op::Param:
      case Op::Constant:
        break;
    }
  }
}

std::span<const double> Evaluation::value(Ref r) const {
  const auto& n = graph_.node(r);
  return {valuePtr_[r.index], n.size()};
}

double Evaluation::scalar(Ref r) const {
  const auto& n = graph_.node(r);
  if (n.size() != 1) throw std::invalid_argument(fmt::format("node {} is not a scalar (size {})", r.index, n.size()));
  return valuePtr_[r.index][0];
}

std::vector<double> Evaluation::gradient(Ref root) const {
  std::vector<double> out(params_.size(), 0.0);
  accumulateGradient(root, out, 1.0);
  return out;
}

void Evaluation::accumulateGradient(Ref root, std::span<double> out, double weight) const {
  const auto& nodes = graph_.nodes_;
  const auto& rn = graph_.node(root);
  if (rn.size() != 1) throw std::invalid_argument("gradient root must be a scalar");
  if (out.size() != params_.size()) throw std::invalid_argument("gradient buffer has the wrong size");
  if (!rn.needsGrad) return;
  if (rn.op == Op::Param) {
    out[rn.data] += weight;
    return;
  }

  // Only ancestors of the root that depend on parameters carry adjoints.
  std::vector<char> live(root.index + 1, 0);
  live[root.index] = 1;
  for (std::size_t i = root.index + 1; i-- > 0;) {
    if (!live[i]) continue;
    const auto& n = nodes[i];
    if (!n.needsGrad || n.op == Op::StopGradient) continue;
    auto mark = [&](std::uint32_t in) {
      if (in != UINT32_MAX && nodes[in].needsGrad) live[in] = 1;
    };
    if (n.op == Op::Concat || n.op == Op::SumOf) {
      for (std::size_t t = 0; t < n.count; ++t) mark(graph_.operands_[n.data + t]);
    } else {
      mark(n.a);
      mark(n.b);
    }
  }

  std::vector<double> adj(arena_.size(), 0.0);
  auto sink = [&](std::uint32_t in) -> double* {
    if (in == UINT32_MAX || !nodes[in].needsGrad) return nullptr;
    if (nodes[in].op == Op::Param) return out.data() + nodes[in].data;
    return adj.data() + arenaOffset_[in];
  };
  adj[arenaOffset_[root.index]] = weight;

  for (std::size_t i = root.index + 1; i-- > 0;) {
    if (!live[i]) continue;
    const auto& n = nodes[i];
    if (n.op == Op::Param || n.op == Op::Constant || n.op == Op::StopGradient) continue;
    const double* g = adj.data() + arenaOffset_[i];
    const double* y = valuePtr_[i];
    const std::size_t sz = n.size();
    const double* a = n.a != UINT32_MAX ? valuePtr_[n.a] : nullptr;
    const double* b = n.b != UINT32_MAX ? valuePtr_[n.b] : nullptr;
    const std::size_t sa = n.a != UINT32_MAX ? nodes[n.a].size() : 0;
    const std::size_t sb = n.b != UINT32_MAX ? nodes[n.b].size() : 0;
    double* ga = sink(n.a);
    double* gb = sink(n.b);

    switch (n.op) {
      case Op::Add:
        for (std::size_t k = 0; k < sz; ++k) {
          if (ga) ga[bidx(sa, k)] += g[k];
          if (gb) gb[bidx(sb, k)] += g[k];
        }
        break;
      case Op::Sub:
        for (std::size_t k = 0; k < sz; ++k) {
          if (ga) ga[bidx(sa, k)] += g[k];
          if (gb) gb[bidx(sb, k)] -= g[k];
        }
        break;
      case Op::Mul:
        for (std::size_t k = 0; k < sz; ++k) {
          if (ga) ga[bidx(sa, k)] += g[k] * b[bidx(sb, k)];
          if (gb) gb[bidx(sb, k)] += g[k] * a[bidx(sa, k)];
        }
        break;
      case Op::Div:
        for (std::size_t k = 0; k < sz; ++k) {
          const double d = b[bidx(sb, k)];
          if (ga) ga[bidx(sa, k)] += g[k] / d;
          if (gb) gb[bidx(sb, k)] -= g[k] * a[bidx(sa, k)] / (d * d);
        }
        break;
      case Op::Min:
        for (std::size_t k = 0; k < sz; ++k) {
          if (a[bidx(sa, k)] <= b[bidx(sb, k)]) {
            if (ga) ga[bidx(sa, k)] += g[k];
          } else if (gb) {
            gb[bidx(sb, k)] += g[k];
          }
        }
        break;
      case Op::Scale:
        for (std::size_t k = 0; k < sz; ++k) ga[k] += g[k] * n.lo;
        break;
      case Op::Neg:
        for (std::size_t k = 0; k < sz; ++k) ga[k] -= g[k];
        break;
      case Op::Exp:
        for (std::size_t k = 0; k < sz; ++k) ga[k] += g[k] * y[k];
        break;
      case Op::Log:
        for (std::size_t k = 0; k < sz; ++k) ga[k] += g[k] / a[k];
        break;
      case Op::Tanh:
        for (std::size_t k = 0; k < sz; ++k) ga[k] += g[k] * (1.0 - y[k] * y[k]);
        break;
      case Op::Clamp:
        for (std::size_t k = 0; k < sz; ++k) {
          if (a[k] >= n.lo && a[k] <= n.hi) ga[k] += g[k];
        }
        break;
      case Op::MatVec: {
        const std::size_t rows = nodes[n.a].rows;
        const std::size_t cols = nodes[n.a].cols;
        if (ga) {
          for (std::size_t r = 0; r < rows; ++r) {
            const double gr = g[r];
            if (gr == 0.0) continue;
            double* gm = ga + r * cols;
            for (std::size_t c = 0; c < cols; ++c) gm[c] += gr * b[c];
          }
        }
        if (gb) {
          for (std::size_t r = 0; r < rows; ++r) {
            const double gr = g[r];
            const double* mr = a + r * cols;
            for (std::size_t c = 0; c < cols; ++c) gb[c] += mr[c] * gr;
          }
        }
        break;
      }
      case Op::Row: {
        const std::size_t cols = nodes[n.a].cols;
        double* gm = ga + n.count * cols;
        for (std::size_t c = 0; c < cols; ++c) gm[c] += g[c];
        break;
      }
      case Op::Concat: {
        const double* gin = g;
        for (std::size_t t = 0; t < n.count; ++t) {
          const std::uint32_t in = graph_.operands_[n.data + t];
          const std::size_t s = nodes[in].size();
          if (double* gt = sink(in)) {
            for (std::size_t k = 0; k < s; ++k) gt[k] += gin[k];
          }
          gin += s;
        }
        break;
      }
      case Op::SumOf:
        for (std::size_t t = 0; t < n.count; ++t) {
          if (double* gt = sink(graph_.operands_[n.data + t])) {
            for (std::size_t k = 0; k < sz; ++k) gt[k] += g[k];
          }
        }
        break;
      case Op::Softmax: {
        double s = 0.0;
        for (std::size_t k = 0; k < sz; ++k) s += g[k] * y[k];
        for (std::size_t k = 0; k < sz; ++k) ga[k] += y[k] * (g[k] - s);
        break;
      }
      case Op::LogSoftmax: {
        double s = 0.0;
        for (std::size_t k = 0; k < sz; ++k) s += g[k];
        for (std::size_t k = 0; k < sz; ++k) ga[k] += g[k] - std::exp(y[k]) * s;
        break;
      }
      case Op::Sum:
        for (std::size_t k = 0; k < sa; ++k) ga[k] += g[0];
        break;
      case Op::Dot:
        for (std::size_t k = 0; k < sa; ++k) {
          if (ga) ga[k] += g[0] * b[k];
          if (gb) gb[k] += g[0] * a[k];
        }
        break;
      case Op::Element:
        ga[n.count] += g[0];
        break;
      case Op::Param:
      case Op::Constant:
      case Op::StopGradient:
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// Free functions

double evalForward(const ScalarExpr& expr, const ParamVector& params) {
  Evaluation eval(*expr.graph, params.values());
  const double v = eval.scalar(expr.root);
  if (std::isnan(v)) throw DomainError("expression evaluated to NaN");
  return v;
}

std::vector<double> evalGradient(const ScalarExpr& expr, const ParamVector& params) {
  Evaluation eval(*expr.graph, params.values());
  if (std::isnan(eval.scalar(expr.root))) throw DomainError("expression evaluated to NaN");
  return eval.gradient(expr.root);
}

std::vector<double> finiteDifferenceGradient(const ScalarFn& fn, const ParamVector& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  ParamVector probe = params;
  std::vector<double> out(params.size(), 0.0);
  auto values = probe.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = values[i];
    values[i] = x + h;
    const double up = fn(probe);
    values[i] = x - h;
    const double down = fn(probe);
    values[i] = x;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

double maxGradientError(std::span<const double> analytic, std::span<const double> reference, double relTol,
                        double absFloor) {
  if (analytic.size() != reference.size()) throw std::invalid_argument("gradient size mismatch");
  double worst = 0.0;
  const double floor = absFloor / relTol;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max(std::abs(reference[i]), floor);
    const double err = std::abs(analytic[i] - reference[i]) / denom;
    if (!(err <= worst)) worst = err;  // propagates NaN
  }
  return worst;
}

GradientAccumulator::GradientAccumulator(std::size_t size, std::size_t slots, ReductionMode mode)
    : mode_(mode), size_(size) {
  if (mode_ == ReductionMode::Deterministic) {
    slots_.assign(slots, std::vector<double>());
  } else {
    shared_.assign(size, 0.0);
  }
}

void GradientAccumulator::add(std::size_t slot, std::span<const double> grad) {
  if (grad.size() != size_) throw std::invalid_argument("gradient size mismatch");
  if (mode_ == ReductionMode::Deterministic) {
    slots_.at(slot).assign(grad.begin(), grad.end());
    return;
  }
  std::lock_guard lock(mutex_);
  for (std::size_t k = 0; k < size_; ++k) shared_[k] += grad[k];
}

std::vector<double> GradientAccumulator::reduce() const {
  if (mode_ == ReductionMode::Fast) {
    std::lock_guard lock(mutex_);
    return shared_;
  }
  std::vector<double> out(size_, 0.0);
  for (const auto& s : slots_) {
    if (s.empty()) continue;
    for (std::size_t k = 0; k < size_; ++k) out[k] += s[k];
  }
  return out;
}

}  // namespace dvrp::grad
