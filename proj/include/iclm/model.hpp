#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "iclm/aggregate.hpp"
#include "iclm/batch.hpp"
#include "iclm/data.hpp"
#include "iclm/lm.hpp"
#include "iclm/mi.hpp"
#include "iclm/optim.hpp"
#include "iclm/router.hpp"
#include "iclm/tensor.hpp"

namespace iclm {

struct LossWeights {
    double alpha = 0.1;    // invariant-module self-supervised loss
    double beta = 0.1;     // domain-module self-supervised loss
    double gamma = 0.1;    // routing loss
    double epsilon = 0.01; // mutual-information loss
    double nu = 0.25;      // commitment weight inside the routing loss

    void validate() const;
};

struct IclmConfig {
    LmConfig module_cfg;
    std::size_t n_specific = 2;
    RoutingStrategy strategy = RoutingStrategy::Vq;
    double temperature = 1.0;   // softmin
    std::size_t mds_dim = 16;   // kmeans
    AggregationConfig agg;
    LossWeights loss;
    std::uint64_t seed = 42;
};

// do(target := h*): overwrite a module's final hidden state with a fixed
// vector for one forward pass.
struct InterventionSpec {
    enum class Target { Specific, Invariant };
    Target target = Target::Specific;
    std::size_t module_index = 0;
    std::vector<double> value;  // length d_model
};

struct StepOutput {
    Tensor combined_logits;  // Y
    Tensor inv_logits;       // invariant module's own head
    Tensor dom_logits;       // activated modules' own heads, batch order
    std::vector<Tensor> spec_logits;  // per module (softmin path)
    RoutingDecision decision;
    std::vector<std::vector<std::size_t>> assignment;  // rows per module

    Tensor router_states;            // H_R
    Tensor h_inv;                    // H_I (post intervention, if any)
    Tensor h_spec_combined;          // routed/weighted specific state
    std::vector<Tensor> spec_final;  // per-module final states (undefined if inactive)
    Tensor inv_pooled;               // [B, D]

    Tensor loss_output, loss_inv, loss_dom, loss_routing, loss_mi;
    Tensor total;
    std::vector<double> mi_values;        // off-tape MI per (invariant, specific-n)
    std::vector<std::size_t> mi_batches;  // paired contexts per estimate
};

struct StepMetrics {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double total = 0, loss_o = 0, loss_inv = 0, loss_dom = 0, loss_r = 0, loss_i = 0;
    std::vector<double> mi_values;
};

struct TrainConfig {
    std::size_t epochs = 3;
    std::size_t batch_size = 16;
    AdamWConfig optimizer;
    std::size_t pretrain_epochs = 1;  // base-LM pretraining before ICLM fine-tuning
    std::uint64_t shuffle_seed = 42;
    std::string run_dir;  // empty: keep everything in memory
};

struct TrainLog {
    std::vector<StepMetrics> steps;
    std::size_t total_steps() const { return steps.size(); }
};

enum class EvalMode { Combined, InvariantOnly, SpecificOnly };
EvalMode eval_mode_from_string(const std::string& s);
std::string to_string(EvalMode m);

class IclmModel {
public:
    explicit IclmModel(IclmConfig cfg);

    const IclmConfig& config() const { return cfg_; }

    // Copies one pre-trained base module into the router (minus head),
    // the invariant module and every specific module.
    void init_from_pretrained(const LmModule& base);

    // Builds the codebook from pooled router embeddings of the training
    // set: farthest-point init for vq/softmin, full K-Means + SMACOF fit
    // for kmeans. Also freezes the router unless the strategy is vq.
    void prepare_codebook(const Dataset& dataset, const Tokenizer& tokenizer,
                          std::size_t embed_batch);

    StepOutput forward(const TokenBatch& batch, bool training,
                       const InterventionSpec* intervention = nullptr);
    Tensor total_loss(StepOutput& step, const TokenBatch& batch);

    std::vector<int> generate(const std::vector<int>& prompt, std::size_t max_new,
                              EvalMode mode);

    // Parameter registry. Group names: router, centroids, invariant,
    // specific.<n>, aggregation.
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    std::map<std::string, std::vector<Tensor>> param_groups() const;
    // Everything forward depends on: parameters plus batch-norm running
    // stats plus codebook tensors (reserved names).
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;

    void zero_grad();
    std::set<std::string> active_groups(const StepOutput& step) const;

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

    LmModule& router_module() { return router_; }
    LmModule& invariant_module() { return invariant_; }
    LmModule& specific_module(std::size_t n) { return specific_.at(n); }
    const LmModule& specific_module(std::size_t n) const { return specific_.at(n); }
    std::size_t n_specific() const { return specific_.size(); }
    Codebook& codebook() { return codebook_; }
    Aggregator& aggregator() { return agg_; }

    // Test-only fault injection: wire the router to read specific-module
    // state, breaking the routing-separation structure on purpose so the
    // causal audits have a positive control.
    void inject_router_coupling_fault(bool on) { fault_router_coupling_ = on; }
    bool router_coupling_fault() const { return fault_router_coupling_; }

private:
    Tensor own_head_probs(const Tensor& logits) const;

    IclmConfig cfg_;
    LmModule router_;
    LmModule invariant_;
    std::vector<LmModule> specific_;
    Codebook codebook_;
    Aggregator agg_;
    bool fault_router_coupling_ = false;
};

// Plain LM pretraining on the mixed corpus; the result seeds all N+2
// modules ("pre-trained partially domain-invariant mechanisms" at desk
// scale).
LmModule pretrain_base_lm(const Dataset& dataset, const Tokenizer& tokenizer, LmConfig cfg,
                          const TrainConfig& train_cfg, std::uint64_t seed);

TrainLog train(IclmModel& model, const Dataset& dataset, const Tokenizer& tokenizer,
               const TrainConfig& cfg);

struct SequentialResult {
    TrainLog phase_a;
    TrainLog phase_b;
    // Copies of every named tensor at the phase-A boundary.
    std::vector<std::pair<std::string, Tensor>> phase_a_snapshot;
};

SequentialResult train_sequential(IclmModel& model, const Dataset& dataset_a,
                                  const Dataset& dataset_b, const Tokenizer& tokenizer,
                                  const TrainConfig& cfg);

double evaluate_accuracy(IclmModel& model, const Dataset& dataset, const Tokenizer& tokenizer,
                         EvalMode mode);

// Dense baseline: one plain module trained with the same recipe, used by
// the continual-learning comparison.
TrainLog train_dense(LmModule& module, const Dataset& dataset, const Tokenizer& tokenizer,
                     const TrainConfig& cfg);
double evaluate_accuracy_dense(const LmModule& module, const Dataset& dataset,
                               const Tokenizer& tokenizer);

}  // namespace iclm
