#pragma once

// Small autoregressive categorical policy conditioned on (image, query).
//
// Per generation step:
//   image  = patch.W * x(I) + patch.b               (image.null when absent)
//   x(I)   = (meanPatch(I) - 0.5) / 0.5             pixel values centred on mid-grey
//   query  = mean of query.E rows over the query tokens
//   s_0    = 0,  s_{t+1} = tanh(rnn.W s_t + rnn.U token.E[o_t] + rnn.b)
//   h      = tanh(hidden.W [image; query; s_t] + hidden.b)
//   logits = head.W h + head.b
//
// Parameter blocks (E = embedDim, H = hiddenDim, V = vocabSize,
// P = patchSize^2 * channels), in storage order:
//   patch.W E*P, patch.b E, image.null E, query.E V*E, token.E V*E,
//   rnn.W E*E, rnn.U E*E, rnn.b E, hidden.W H*3E, hidden.b H, head.W V*H, head.b V

#include <cstdint>
#include <span>
#include <vector>

#include "dvrp/gradcore.hpp"
#include "dvrp/tokens.hpp"
#include "dvrp/views.hpp"

namespace dvrp {

inline constexpr double kPixelCenter = 0.5;
inline constexpr double kPixelScale = 0.5;

struct PolicySpec {
  std::uint32_t vocabSize = tokens::kVocabSize;
  std::uint32_t embedDim = 16;
  std::uint32_t hiddenDim = 32;
  std::uint32_t patchSize = 14;
  std::uint32_t channels = 3;
  std::uint32_t maxTokens = 2;

  std::size_t patchDim() const { return static_cast<std::size_t>(patchSize) * patchSize * channels; }
  void validate() const;
  bool operator==(const PolicySpec&) const = default;
};

struct Distribution {
  std::vector<double> probs;

  /// Lowest index among the most probable tokens.
  TokenId argmax() const;
};

struct Trajectory {
  TokenSeq tokens;
  /// Untruncated temperature-1 log-probabilities of each emitted token.
  std::vector<double> logProbs;
  double reward = 0.0;
};

struct SamplingConfig {
  double temperature = 1.0;
  double topP = 0.99;
  /// 0 means PolicySpec::maxTokens.
  std::uint32_t maxTokens = 0;

  void validate() const;
  static SamplingConfig training() { return {1.0, 0.99, 0}; }
  static SamplingConfig evaluation() { return {1.0, 0.9, 0}; }
};

/// Temperature scaling followed by nucleus truncation: the smallest prefix of
/// the probability-sorted vocabulary whose mass reaches topP, renormalised.
std::vector<double> nucleusDistribution(std::span<const double> logits, double temperature, double topP);

class Policy {
 public:
  explicit Policy(PolicySpec spec);

  const PolicySpec& spec() const { return spec_; }
  const std::vector<grad::ParamBlock>& layout() const { return layout_; }
  std::size_t paramCount() const { return paramCount_; }

  /// Entries uniform in (-s, s) with s = 1 / sqrt(fan-in).
  grad::ParamVector initParams(std::uint64_t seed) const;
  grad::ParamVector zeroParams() const;
  /// Throws std::invalid_argument if params do not have this policy's layout.
  void checkLayout(const grad::ParamVector& params) const;

  /// Image and query embeddings, reused across generation steps.
  struct Context {
    std::vector<double> image;
    std::vector<double> query;
  };

  /// Normalised mean patch fed to the patch embedding.
  std::vector<double> imageFeatures(const ImageGrid& image) const;

  /// image == nullptr selects the learned null embedding (text-only input).
  Context encode(const grad::ParamVector& params, const ImageGrid* image, TokenSpan query) const;
  std::vector<double> initialState() const;
  std::vector<double> advance(const grad::ParamVector& params, std::span<const double> state, TokenId token) const;
  std::vector<double> logits(const grad::ParamVector& params, const Context& ctx, std::span<const double> state) const;

  Distribution stepDistribution(const grad::ParamVector& params, const ImageGrid* image, TokenSpan query,
                                TokenSpan prefix) const;

  Trajectory sampleTrajectory(const grad::ParamVector& params, const ImageGrid* image, TokenSpan query,
                              const SamplingConfig& sampling, std::uint64_t seed) const;
  Trajectory sampleTrajectory(const grad::ParamVector& params, const Context& ctx, const SamplingConfig& sampling,
                              std::uint64_t seed) const;

  std::vector<double> logprobTrajectory(const grad::ParamVector& params, const ImageGrid* image, TokenSpan query,
                                        TokenSpan tokens) const;

 private:
  void checkTokens(TokenSpan seq) const;

  PolicySpec spec_;
  std::vector<grad::ParamBlock> layout_;
  std::size_t paramCount_ = 0;
};

/// Emits the policy's computations into a gradcore Graph. Parameter leaves
/// are created once per builder and shared by every call.
class PolicyGraph {
 public:
  PolicyGraph(grad::Graph& graph, const Policy& policy);

  grad::Graph& graph() { return graph_; }

  grad::Ref imageEmbedding(const ImageGrid* image);
  grad::Ref imageEmbeddingFromFeatures(std::span<const double> features);
  grad::Ref nullImage() const { return imageNull_; }
  grad::Ref queryEmbedding(TokenSpan query);

  /// states[t] summarises tokens[0, t); one state per token.
  std::vector<grad::Ref> prefixStates(TokenSpan tokens);
  grad::Ref logits(grad::Ref image, grad::Ref query, grad::Ref state);

  /// Per-token log-probabilities (scalars) of `tokens` under teacher forcing.
  std::vector<grad::Ref> tokenLogProbs(grad::Ref image, grad::Ref query, std::span<const grad::Ref> states,
                                       TokenSpan tokens);

 private:
  grad::Graph& graph_;
  const Policy& policy_;
  grad::Ref patchW_, patchB_, imageNull_, queryE_, tokenE_, rnnW_, rnnU_, rnnB_, hiddenW_, hiddenB_, headW_, headB_;
  grad::Ref zeroState_;
  grad::Ref zeroQuery_;
};

}  // namespace dvrp
