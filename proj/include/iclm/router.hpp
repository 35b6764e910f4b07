#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iclm/batch.hpp"
#include "iclm/lm.hpp"
#include "iclm/mds.hpp"
#include "iclm/tensor.hpp"

namespace iclm {

enum class RoutingStrategy { Vq, Kmeans, Softmin };

RoutingStrategy routing_strategy_from_string(const std::string& s);
std::string to_string(RoutingStrategy s);

// Router state: centroids plus the strategy that interprets them. For
// vq/softmin the centroids live in the raw embedding space; for kmeans
// they live in the SMACOF-projected space together with the sampled
// basis (8 x M vectors from the training embeddings).
class Codebook {
public:
    Codebook() = default;

    static Codebook vq(std::size_t n, std::size_t d_model, double nu);
    static Codebook softmin(std::size_t n, std::size_t d_model, double temperature);

    // Fits K-Means over SMACOF-projected pooled embeddings. Happens
    // before and independent of module fine-tuning; the centroids are
    // frozen afterwards.
    static Codebook kmeans_fit(const std::vector<double>& pooled_embeddings, std::size_t count,
                               std::size_t d_model, std::size_t n, std::size_t mds_dim,
                               std::uint64_t seed);

    // Deterministic data-driven initialization for vq/softmin centroids
    // (greedy farthest-point over pooled embeddings).
    void init_centroids_from(const std::vector<double>& pooled_embeddings, std::size_t count,
                             std::uint64_t seed);

    RoutingStrategy strategy() const { return strategy_; }
    std::size_t n_modules() const { return centroids_.shape()[0]; }
    std::size_t centroid_dim() const { return centroids_.shape()[1]; }
    Tensor& centroids() { return centroids_; }
    const Tensor& centroids() const { return centroids_; }
    double nu() const { return nu_; }
    double temperature() const { return temperature_; }
    std::size_t mds_dim() const { return mds_dim_; }
    const MdsModel& mds() const { return mds_; }
    MdsModel& mds() { return mds_; }

    void validate() const;

private:
    RoutingStrategy strategy_ = RoutingStrategy::Vq;
    Tensor centroids_;  // [N, d_model] or [N, mds_dim] for kmeans
    double nu_ = 0.25;
    double temperature_ = 1.0;
    std::size_t mds_dim_ = 0;
    MdsModel mds_;
};

struct RoutingDecision {
    Tensor weights;            // [B, N]; one-hot rows or softmin rows on tape
    std::vector<int> chosen;   // argmin / argmax index per input
    Tensor routing_loss;       // scalar tape node (zero for kmeans/softmin)
    std::vector<double> distances;  // [B, N] per-input distances, reporting only
    bool one_hot = true;
};

// Final hidden states of the router for a batch; the embedding space the
// routing strategies consume. The router must have no LM head.
Tensor embed_input(const LmModule& router, const TokenBatch& batch);

// Mean of final-layer token states over unmasked positions, the
// per-input clustering point. Plain doubles, off the tape.
std::vector<double> pooled_embeddings(const Tensor& states, const std::vector<double>& pad_mask);

RoutingDecision vq_route(const Tensor& states, const std::vector<double>& pad_mask,
                         const Codebook& codebook);
RoutingDecision kmeans_route(const Tensor& states, const std::vector<double>& pad_mask,
                             const Codebook& codebook);
RoutingDecision softmin_weights(const Tensor& states, const std::vector<double>& pad_mask,
                                const Codebook& codebook);

RoutingDecision route(const Tensor& states, const std::vector<double>& pad_mask,
                      const Codebook& codebook);

}  // namespace iclm
