#include "dvrp/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "dvrp/detail/kernels.hpp"
#include "dvrp/rng.hpp"

namespace dvrp {

namespace tokens {

std::string name(TokenId id) {
  switch (id) {
    case kEos: return "<eos>";
    case kSep: return "<sep>";
    case kRed: return "red";
    case kGreen: return "green";
    case kBlue: return "blue";
    case kYellow: return "yellow";
    case kLeft: return "left";
    case kRight: return "right";
    case kQueryCount: return "<count>";
    case kQueryMajority: return "<majority>";
    case kQueryCompare: return "<compare>";
    case kQueryShortcut: return "<shortcut>";
    default: break;
  }
  if (id >= kDigit0 && id < kDigit0 + 10) return std::to_string(id - kDigit0);
  if (id >= kDifficulty0 && id < kDifficulty0 + kDifficultyLevels) return fmt::format("<d{}>", id - kDifficulty0);
  return fmt::format("<tok{}>", id);
}

std::string render(TokenSpan seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += name(seq[i]);
  }
  return out;
}

}  // namespace tokens

namespace {

enum Block : std::size_t {
  kPatchW,
  kPatchB,
  kImageNull,
  kQueryE,
  kTokenE,
  kRnnW,
  kRnnU,
  kRnnB,
  kHiddenW,
  kHiddenB,
  kHeadW,
  kHeadB,
  kBlockCount
};

std::span<const double> blockSpan(const grad::ParamVector& p, const std::vector<grad::ParamBlock>& layout, Block b) {
  return p.values().subspan(layout[b].offset, layout[b].length);
}

void addInPlace(std::span<double> y, std::span<const double> b) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + b[i];
}

void tanhInPlace(std::span<double> y) {
  for (auto& v : y) v = std::tanh(v);
}

}  // namespace

void PolicySpec::validate() const {
  if (vocabSize < 2) throw std::invalid_argument("vocabSize must be >= 2");
  if (maxTokens < 1) throw std::invalid_argument("maxTokens must be >= 1");
  if (embedDim < 1 || hiddenDim < 1 || patchSize < 1 || channels < 1) {
    throw std::invalid_argument("policy dimensions must be positive");
  }
}

TokenId Distribution::argmax() const {
  return static_cast<TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

void SamplingConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (!(topP > 0.0 && topP <= 1.0)) throw std::invalid_argument("topP must be in (0, 1]");
}

std::vector<double> nucleusDistribution(std::span<const double> logits, double temperature, double topP) {
  const std::size_t n = logits.size();
  std::vector<double> scaled(n);
  for (std::size_t i = 0; i < n; ++i) scaled[i] = logits[i] / temperature;
  std::vector<double> probs(n);
  detail::softmax(scaled.data(), n, probs.data());

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });

  std::vector<double> out(n, 0.0);
  double mass = 0.0;
  for (std::size_t i : order) {
    out[i] = probs[i];
    mass += probs[i];
    if (mass >= topP) break;
  }
  for (auto& v : out) v /= mass;
  return out;
}

Policy::Policy(PolicySpec spec) : spec_(spec) {
  spec_.validate();
  const std::size_t e = spec_.embedDim;
  const std::size_t h = spec_.hiddenDim;
  const std::size_t v = spec_.vocabSize;
  const std::pair<const char*, std::size_t> blocks[kBlockCount] = {
      {"patch.W", e * spec_.patchDim()}, {"patch.b", e},      {"image.null", e}, {"query.E", v * e},
      {"token.E", v * e},                {"rnn.W", e * e},    {"rnn.U", e * e},  {"rnn.b", e},
      {"hidden.W", h * 3 * e},           {"hidden.b", h},     {"head.W", v * h}, {"head.b", v},
  };
  for (const auto& [name, length] : blocks) {
    layout_.push_back({name, paramCount_, length});
    paramCount_ += length;
  }
}

grad::ParamVector Policy::zeroParams() const {
  return grad::ParamVector(layout_, std::vector<double>(paramCount_, 0.0));
}

std::vector<double> Policy::imageFeatures(const ImageGrid& image) const {
  auto mp = meanPatch(image, spec_.patchSize);
  for (double& v : mp) v = (v - kPixelCenter) / kPixelScale;
  return mp;
}

grad::ParamVector Policy::initParams(std::uint64_t seed) const {
  const double e = spec_.embedDim;
  const double fanIn[kBlockCount] = {
      static_cast<double>(spec_.patchDim()), static_cast<double>(spec_.patchDim()), e, e, e, 2 * e, 2 * e, 2 * e,
      3 * e, 3 * e, static_cast<double>(spec_.hiddenDim), static_cast<double>(spec_.hiddenDim)};
  grad::ParamVector params = zeroParams();
  auto values = params.values();
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    const double s = 1.0 / std::sqrt(fanIn[b]);
    const CounterRng rng(deriveSeed(seed, {b}));
    for (std::size_t i = 0; i < layout_[b].length; ++i) {
      values[layout_[b].offset + i] = s * (2.0 * rng.uniformAt(i) - 1.0);
    }
  }
  return params;
}

void Policy::checkLayout(const grad::ParamVector& params) const {
  if (params.size() != paramCount_ || params.blocks().size() < kBlockCount) {
    throw std::invalid_argument(fmt::format("parameter vector of size {} does not match policy ({} parameters)",
                                            params.size(), paramCount_));
  }
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    if (!(params.blocks()[b] == layout_[b])) {
      throw std::invalid_argument(fmt::format("parameter block '{}' does not match policy layout", layout_[b].name));
    }
  }
}

void Policy::checkTokens(TokenSpan seq) const {
  for (TokenId t : seq) {
    if (t >= spec_.vocabSize) throw std::invalid_argument(fmt::format("token {} outside vocabulary", t));
  }
}

Policy::Context Policy::encode(const grad::ParamVector& params, const ImageGrid* image, TokenSpan query) const {
  checkLayout(params);
  checkTokens(query);
  const std::size_t e = spec_.embedDim;
  Context ctx;
  if (image) {
    if (image->channels != spec_.channels) {
      throw std::invalid_argument(fmt::format("image has {} channels, policy expects {}", image->channels, spec_.channels));
    }
    const auto mp = imageFeatures(*image);
    ctx.image.assign(e, 0.0);
    detail::matVec(blockSpan(params, layout_, kPatchW).data(), e, spec_.patchDim(), mp.data(), ctx.image.data());
    addInPlace(ctx.image, blockSpan(params, layout_, kPatchB));
  } else {
    const auto null = blockSpan(params, layout_, kImageNull);
    ctx.image.assign(null.begin(), null.end());
  }
  ctx.query.assign(e, 0.0);
  if (!query.empty()) {
    const auto table = blockSpan(params, layout_, kQueryE);
    const auto first = table.subspan(query[0] * e, e);
    ctx.query.assign(first.begin(), first.end());
    for (std::size_t i = 1; i < query.size(); ++i) addInPlace(ctx.query, table.subspan(query[i] * e, e));
    const double factor = 1.0 / static_cast<double>(query.size());
    for (auto& v : ctx.query) v = v * factor;
  }
  return ctx;
}

std::vector<double> Policy::initialState() const { return std::vector<double>(spec_.embedDim, 0.0); }

std::vector<double> Policy::advance(const grad::ParamVector& params, std::span<const double> state,
                                    TokenId token) const {
  const std::size_t e = spec_.embedDim;
  std::vector<double> mixed(e), input(e);
  detail::matVec(blockSpan(params, layout_, kRnnW).data(), e, e, state.data(), mixed.data());
  detail::matVec(blockSpan(params, layout_, kRnnU).data(), e, e,
                 blockSpan(params, layout_, kTokenE).subspan(token * e, e).data(), input.data());
  addInPlace(mixed, input);
  addInPlace(mixed, blockSpan(params, layout_, kRnnB));
  tanhInPlace(mixed);
  return mixed;
}

std::vector<double> Policy::logits(const grad::ParamVector& params, const Context& ctx,
                                   std::span<const double> state) const {
  const std::size_t e = spec_.embedDim;
  const std::size_t h = spec_.hiddenDim;
  std::vector<double> features;
  features.reserve(3 * e);
  features.insert(features.end(), ctx.image.begin(), ctx.image.end());
  features.insert(features.end(), ctx.query.begin(), ctx.query.end());
  features.insert(features.end(), state.begin(), state.end());
  std::vector<double> hidden(h);
  detail::matVec(blockSpan(params, layout_, kHiddenW).data(), h, 3 * e, features.data(), hidden.data());
  addInPlace(hidden, blockSpan(params, layout_, kHiddenB));
  tanhInPlace(hidden);
  std::vector<double> out(spec_.vocabSize);
  detail::matVec(blockSpan(params, layout_, kHeadW).data(), spec_.vocabSize, h, hidden.data(), out.data());
  addInPlace(out, blockSpan(params, layout_, kHeadB));
  return out;
}

Distribution Policy::stepDistribution(const grad::ParamVector& params, const ImageGrid* image, TokenSpan query,
                                      TokenSpan prefix) const {
  if (prefix.size() >= spec_.maxTokens) {
    throw std::invalid_argument(fmt::format("prefix of {} tokens leaves no room below maxTokens {}", prefix.size(),
                                            spec_.maxTokens));
  }
  checkTokens(prefix);
  const Context ctx = encode(params, image, query);
  auto state = initialState();
  for (TokenId t : prefix) state = advance(params, state, t);
  const auto z = logits(params, ctx, state);
  Distribution d;
  d.probs.resize(z.size());
  detail::softmax(z.data(), z.size(), d.probs.data());
  return d;
}

Trajectory Policy::sampleTrajectory(const grad::ParamVector& params, const ImageGrid* image, TokenSpan query,
                                    const SamplingConfig& sampling, std::uint64_t seed) const {
  return sampleTrajectory(params, encode(params, image, query), sampling, seed);
}

Trajectory Policy::sampleTrajectory(const grad::ParamVector& params, const Context& ctx,
                                    const SamplingConfig& sampling, std::uint64_t seed) const {
  sampling.validate();
  const std::uint32_t limit = sampling.maxTokens == 0 ? spec_.maxTokens : std::min(sampling.maxTokens, spec_.maxTokens);
  const CounterRng rng(seed);
  Trajectory traj;
  auto state = initialState();
  std::vector<double> logp(spec_.vocabSize);
  for (std::uint32_t t = 0; t < limit; ++t) {
    const auto z = logits(params, ctx, state);
    detail::logSoftmax(z.data(), z.size(), logp.data());
    const auto probs = nucleusDistribution(z, sampling.temperature, sampling.topP);
    const double u = rng.uniformAt(t);
    double cumulative = 0.0;
    TokenId chosen = 0;
    // Last non-zero entry absorbs any rounding shortfall in the cumulative sum.
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      chosen = static_cast<TokenId>(i);
      cumulative += probs[i];
      if (u < cumulative) break;
    }
    traj.tokens.push_back(chosen);
    traj.logProbs.push_back(logp[chosen]);
    if (chosen == tokens::kEos) break;
    if (t + 1 < limit) state = advance(params, state, chosen);
  }
  return traj;
}

std::vector<double> Policy::logprobTrajectory(const grad::ParamVector& params, const ImageGrid* image,
                                              TokenSpan query, TokenSpan tokens) const {
  checkTokens(tokens);
  const Context ctx = encode(params, image, query);
  auto state = initialState();
  std::vector<double> out;
  std::vector<double> logp(spec_.vocabSize);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto z = logits(params, ctx, state);
    detail::logSoftmax(z.data(), z.size(), logp.data());
    out.push_back(logp[tokens[t]]);
    if (t + 1 < tokens.size()) state = advance(params, state, tokens[t]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PolicyGraph

PolicyGraph::PolicyGraph(grad::Graph& graph, const Policy& policy) : graph_(graph), policy_(policy) {
  const auto& spec = policy.spec();
  const auto& l = policy.layout();
  const std::size_t e = spec.embedDim;
  const std::size_t h = spec.hiddenDim;
  const std::size_t v = spec.vocabSize;
  if (graph.paramCount() != policy.paramCount()) throw std::invalid_argument("graph and policy disagree on size");
  patchW_ = graph.param(l[kPatchW], e, spec.patchDim());
  patchB_ = graph.param(l[kPatchB], e);
  imageNull_ = graph.param(l[kImageNull], e);
  queryE_ = graph.param(l[kQueryE], v, e);
  tokenE_ = graph.param(l[kTokenE], v, e);
  rnnW_ = graph.param(l[kRnnW], e, e);
  rnnU_ = graph.param(l[kRnnU], e, e);
  rnnB_ = graph.param(l[kRnnB], e);
  hiddenW_ = graph.param(l[kHiddenW], h, 3 * e);
  hiddenB_ = graph.param(l[kHiddenB], h);
  headW_ = graph.param(l[kHeadW], v, h);
  headB_ = graph.param(l[kHeadB], v);
  const std::vector<double> zeros(e, 0.0);
  zeroState_ = graph.constant(zeros);
  zeroQuery_ = zeroState_;
}

grad::Ref PolicyGraph::imageEmbedding(const ImageGrid* image) {
  if (!image) return imageNull_;
  if (image->channels != policy_.spec().channels) throw std::invalid_argument("image channel count mismatch");
  return imageEmbeddingFromFeatures(policy_.imageFeatures(*image));
}

grad::Ref PolicyGraph::imageEmbeddingFromFeatures(std::span<const double> features) {
  const grad::Ref mp = graph_.constant(features);
  return graph_.add(graph_.matVec(patchW_, mp), patchB_);
}

grad::Ref PolicyGraph::queryEmbedding(TokenSpan query) {
  if (query.empty()) return zeroQuery_;
  std::vector<grad::Ref> rows;
  rows.reserve(query.size());
  for (TokenId t : query) {
    if (t >= policy_.spec().vocabSize) throw std::invalid_argument("query token outside vocabulary");
    rows.push_back(graph_.row(queryE_, t));
  }
  return graph_.scale(graph_.sumOf(rows), 1.0 / static_cast<double>(query.size()));
}

std::vector<grad::Ref> PolicyGraph::prefixStates(TokenSpan tokens) {
  std::vector<grad::Ref> states;
  states.reserve(tokens.size());
  grad::Ref state = zeroState_;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    states.push_back(state);
    if (t + 1 == tokens.size()) break;
    if (tokens[t] >= policy_.spec().vocabSize) throw std::invalid_argument("token outside vocabulary");
    const grad::Ref mixed = graph_.matVec(rnnW_, state);
    const grad::Ref input = graph_.matVec(rnnU_, graph_.row(tokenE_, tokens[t]));
    state = graph_.tanh(graph_.add(graph_.add(mixed, input), rnnB_));
  }
  return states;
}

grad::Ref PolicyGraph::logits(grad::Ref image, grad::Ref query, grad::Ref state) {
  const grad::Ref parts[] = {image, query, state};
  const grad::Ref features = graph_.concat(parts);
  const grad::Ref hidden = graph_.tanh(graph_.add(graph_.matVec(hiddenW_, features), hiddenB_));
  return graph_.add(graph_.matVec(headW_, hidden), headB_);
}

std::vector<grad::Ref> PolicyGraph::tokenLogProbs(grad::Ref image, grad::Ref query, std::span<const grad::Ref> states,
                                                  TokenSpan tokens) {
  if (states.size() != tokens.size()) throw std::invalid_argument("one prefix state per token is required");
  std::vector<grad::Ref> out;
  out.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= policy_.spec().vocabSize) throw std::invalid_argument("token outside vocabulary");
    out.push_back(graph_.element(graph_.logSoftmax(logits(image, query, states[t])), tokens[t]));
  }
  return out;
}

}  // namespace dvrp
