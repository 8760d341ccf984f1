#pragma once

// Transfer surrogate. An LSTM encoder reads the token sequence; the mean of
// its hidden states is the architecture code z. Task predictions decompose
// as f_i(z) = f_u(z) + r_i(z), a universal head plus one residual head per
// registered task. An LSTM decoder with scaled dot-product attention over
// the encoder states reconstructs the sequence.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfernas/archspace.hpp"
#include "xfernas/autodiff.hpp"
#include "xfernas/taskbench.hpp"
#include "xfernas/tensor.hpp"

namespace xfernas {

// Task argument selecting the universal head alone.
inline constexpr std::string_view kUniversal = "<universal>";

struct XferNetConfig {
  int blocks = 5;
  int embedding = 32;
  int hidden = 96;
  int universal_hidden = 64;
  int residual_hidden = 32;

  bool operator==(const XferNetConfig&) const = default;
};

struct ArchitectureCode {
  std::vector<double> z;

  bool operator==(const ArchitectureCode&) const = default;
};

// Encoder output for one sequence: hidden states (T, H) and their mean.
struct Encoding {
  Tensor states;
  ArchitectureCode code;
};

struct Decoded {
  Tensor logits;  // (T, V); illegal tokens at each position hold -infinity
  TokenSeq tokens;
};

struct TrainingExample {
  TokenSeq tokens;
  std::string task;
  double score = 0.0;
};

struct LossTerms {
  ad::Var total;
  ad::Var prediction;      // sum of squared errors, each record on its own task head
  ad::Var reconstruction;  // per-record mean token cross-entropy (teacher forced), summed over records
};

struct TrainConfig {
  double alpha = 0.8;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int epochs = 200;
  int batch_size = 32;
  // Upper bound on optimizer steps; 0 means epochs alone decide.
  int max_steps = 0;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean total loss per record, per epoch
  int steps = 0;
};

class XferNet {
 public:
  XferNet(std::vector<std::string> tasks, std::string target, std::uint64_t seed, XferNetConfig config = {});

  const XferNetConfig& config() const { return config_; }
  const std::vector<std::string>& tasks() const { return tasks_; }
  const std::string& target() const { return target_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  Encoding encode(const TokenSeq& seq) const;
  std::vector<Encoding> encode_batch(std::span<const TokenSeq> seqs) const;

  double predict(const ArchitectureCode& code, std::string_view task) const;
  double universal(const ArchitectureCode& code) const;
  double residual(const ArchitectureCode& code, std::string_view task) const;
  // d predict(z, task) / dz.
  std::vector<double> prediction_gradient(const ArchitectureCode& code, std::string_view task) const;

  // Decoder initial state is the mean of `states`. With a teacher, step t is
  // fed teacher token t-1; otherwise the previous greedy choice.
  Decoded decode(const Tensor& states, const TokenSeq* teacher = nullptr) const;
  TokenSeq reconstruct(const TokenSeq& seq) const;

  // Records the joint loss alpha * L_pred + (1 - alpha) * L_rec for a batch.
  LossTerms loss(ad::Graph& g, const ParamStore& params, std::span<const TrainingExample> batch,
                 double alpha) const;

  // Writes <prefix>.params (binary ParamStore) and <prefix>.json (registry).
  void save(const std::filesystem::path& prefix) const;
  static XferNet load(const std::filesystem::path& prefix);

 private:
  struct EncoderPass {
    ad::Var states;  // (T, n, H)
    ad::Var code;    // (n, H)
  };

  XferNet() = default;
  std::vector<ParamSpec> param_specs() const;
  void check_task(std::string_view task) const;
  void check_tokens(const TokenSeq& seq) const;
  EncoderPass encoder(ad::Graph& g, const ParamStore& p, std::span<const TokenSeq> seqs) const;
  ad::Var universal_head(ad::Graph& g, const ParamStore& p, ad::Var z) const;
  ad::Var residual_head(ad::Graph& g, const ParamStore& p, ad::Var z, std::string_view task) const;
  ad::Var task_predictions(ad::Graph& g, const ParamStore& p, ad::Var z, std::span<const std::string> tasks) const;

  XferNetConfig config_;
  std::vector<std::string> tasks_;
  std::string target_;
  ParamStore params_;
};

struct TrainResult {
  XferNet net;
  TrainLog log;
};

std::vector<TrainingExample> training_examples(const ObservationHistory& history);

// Fresh network over the history's registry, then Adam on shuffled
// mini-batches. Throws ConfigError for an empty history or a history without
// a designated target.
TrainResult train(const ObservationHistory& history, const TrainConfig& cfg, XferNetConfig config = {});

}  // namespace xfernas
