#include "iclm/router.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "iclm/errors.hpp"
#include "iclm/rng.hpp"

namespace iclm {

RoutingStrategy routing_strategy_from_string(const std::string& s) {
    if (s == "vq") return RoutingStrategy::Vq;
    if (s == "kmeans") return RoutingStrategy::Kmeans;
    if (s == "softmin") return RoutingStrategy::Softmin;
    throw ConfigError("router.strategy: unknown value '" + s + "' (vq | kmeans | softmin)");
}

std::string to_string(RoutingStrategy s) {
    switch (s) {
        case RoutingStrategy::Vq: return "vq";
        case RoutingStrategy::Kmeans: return "kmeans";
        case RoutingStrategy::Softmin: return "softmin";
    }
    return "?";
}

Codebook Codebook::vq(std::size_t n, std::size_t d_model, double nu) {
    if (n < 1) throw ConfigError("codebook: need at least one centroid");
    Codebook cb;
    cb.strategy_ = RoutingStrategy::Vq;
    cb.centroids_ = Tensor::zeros({n, d_model}, true);
    cb.nu_ = nu;
    return cb;
}

Codebook Codebook::softmin(std::size_t n, std::size_t d_model, double temperature) {
    if (n < 1) throw ConfigError("codebook: need at least one centroid");
    if (temperature <= 0.0) throw ConfigError("codebook: softmin temperature must be positive");
    Codebook cb;
    cb.strategy_ = RoutingStrategy::Softmin;
    cb.centroids_ = Tensor::zeros({n, d_model}, true);
    cb.temperature_ = temperature;
    return cb;
}

void Codebook::init_centroids_from(const std::vector<double>& pooled, std::size_t count,
                                   std::uint64_t seed) {
    const std::size_t n = n_modules();
    const std::size_t d = centroid_dim();
    if (pooled.size() != count * d) throw ShapeError("codebook init: embedding buffer mismatch");
    if (count < n) {
        throw ClusteringError("codebook init: " + std::to_string(count) +
                              " points for " + std::to_string(n) + " centroids");
    }
    Rng rng(seed);
    std::vector<std::size_t> picked;
    picked.push_back(static_cast<std::size_t>(rng.below(count)));
    while (picked.size() < n) {
        // Farthest point from the chosen set; ties keep the lowest index.
        std::size_t best = 0;
        double best_dist = -1.0;
        for (std::size_t i = 0; i < count; ++i) {
            double nearest = 1e300;
            for (auto p : picked) {
                double ssq = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = pooled[i * d + j] - pooled[p * d + j];
                    ssq += diff * diff;
                }
                nearest = std::min(nearest, ssq);
            }
            if (nearest > best_dist) {
                best_dist = nearest;
                best = i;
            }
        }
        picked.push_back(best);
    }
    for (std::size_t k = 0; k < n; ++k) {
        std::copy(pooled.begin() + picked[k] * d, pooled.begin() + (picked[k] + 1) * d,
                  centroids_.data() + k * d);
    }
}

void Codebook::validate() const {
    for (std::size_t i = 0; i < centroids_.size(); ++i) {
        if (!std::isfinite(centroids_.data()[i])) {
            throw ClusteringError("codebook: centroid values must be finite");
        }
    }
}

Tensor embed_input(const LmModule& router, const TokenBatch& batch) {
    if (router.config().has_lm_head) {
        throw ConfigError("router: router module must have no language modelling head");
    }
    return router.forward(batch).final_hidden;
}

std::vector<double> pooled_embeddings(const Tensor& states, const std::vector<double>& pad_mask) {
    if (states.rank() != 3) throw ShapeError("pooled_embeddings: expected [B,T,D]");
    const std::size_t b = states.shape()[0], t = states.shape()[1], d = states.shape()[2];
    std::vector<double> out(b * d, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
            const double m = pad_mask[i * t + j];
            if (m == 0.0) continue;
            total += m;
            const double* row = states.data() + (i * t + j) * d;
            for (std::size_t k = 0; k < d; ++k) out[i * d + k] += m * row[k];
        }
        if (total == 0.0) {
            throw RoutingError("routing: input " + std::to_string(i) + " has an empty sequence");
        }
        for (std::size_t k = 0; k < d; ++k) out[i * d + k] /= total;
    }
    return out;
}

namespace {

Tensor one_hot_weights(const std::vector<int>& chosen, std::size_t n) {
    Tensor w = Tensor::zeros({chosen.size(), n}, false);
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        w.data()[i * n + static_cast<std::size_t>(chosen[i])] = 1.0;
    }
    return w;
}

// Eq-1 style loss with the stop-gradient split: the first term reaches
// only the token states, the nu-weighted second term only the centroids.
// MSE is the mean over (unmasked token, feature) elements per input,
// averaged over the batch.
Tensor vq_loss(const Tensor& states, const Tensor& centroids, const std::vector<int>& chosen,
               const std::vector<double>& pad_mask, double nu) {
    const std::size_t b = states.shape()[0], t = states.shape()[1], d = states.shape()[2];
    std::vector<double> counts(b, 0.0);
    double value = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < t; ++j) counts[i] += pad_mask[i * t + j] != 0.0 ? 1.0 : 0.0;
        const double* c = centroids.data() + static_cast<std::size_t>(chosen[i]) * d;
        double acc = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
            if (pad_mask[i * t + j] == 0.0) continue;
            const double* h = states.data() + (i * t + j) * d;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = h[k] - c[k];
                acc += diff * diff;
            }
        }
        value += acc / (counts[i] * static_cast<double>(d));
    }
    value *= (1.0 + nu) / static_cast<double>(b);

    return make_op(
        "vq_loss", {}, {value}, {states, centroids},
        [chosen, pad_mask, counts, nu, b, t, d](TapeNode& node) {
            auto& hs = *node.parents[0];
            auto& cs = *node.parents[1];
            const double g = node.grad[0];
            for (std::size_t i = 0; i < b; ++i) {
                const double w = g / (static_cast<double>(b) * counts[i] * static_cast<double>(d));
                const std::size_t ci = static_cast<std::size_t>(chosen[i]);
                for (std::size_t j = 0; j < t; ++j) {
                    if (pad_mask[i * t + j] == 0.0) continue;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double h = hs.data[(i * t + j) * d + k];
                        const double c = cs.data[ci * d + k];
                        // MSE(sg(c), h): gradient to the token states only.
                        if (hs.requires_grad) hs.grad[(i * t + j) * d + k] += w * 2.0 * (h - c);
                        // nu * MSE(c, sg(h)): gradient to the centroid only.
                        if (cs.requires_grad) cs.grad[ci * d + k] += w * 2.0 * nu * (c - h);
                    }
                }
            }
        });
}

// Per-input mean Euclidean distance between unmasked token states and
// each centroid ("measure the distance between a centroid and each token
// and sum them", normalized per token so padded batches are comparable).
std::vector<double> token_distance_matrix(const Tensor& states,
                                          const std::vector<double>& pad_mask,
                                          const Tensor& centroids) {
    const std::size_t b = states.shape()[0], t = states.shape()[1], d = states.shape()[2];
    const std::size_t n = centroids.shape()[0];
    std::vector<double> dist(b * n, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        double count = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
            if (pad_mask[i * t + j] == 0.0) continue;
            count += 1.0;
            const double* h = states.data() + (i * t + j) * d;
            for (std::size_t k = 0; k < n; ++k) {
                const double* c = centroids.data() + k * d;
                double ssq = 0.0;
                for (std::size_t x = 0; x < d; ++x) {
                    const double diff = h[x] - c[x];
                    ssq += diff * diff;
                }
                dist[i * n + k] += std::sqrt(ssq);
            }
        }
        if (count == 0.0) {
            throw RoutingError("routing: input " + std::to_string(i) + " has an empty sequence");
        }
        for (std::size_t k = 0; k < n; ++k) dist[i * n + k] /= count;
    }
    return dist;
}

std::vector<int> argmin_rows(const std::vector<double>& dist, std::size_t b, std::size_t n) {
    std::vector<int> chosen(b, 0);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < n; ++k) {
            if (dist[i * n + k] < dist[i * n + best]) best = k;  // ties keep lowest index
        }
        chosen[i] = static_cast<int>(best);
    }
    return chosen;
}

}  // namespace

RoutingDecision vq_route(const Tensor& states, const std::vector<double>& pad_mask,
                         const Codebook& codebook) {
    if (codebook.strategy() != RoutingStrategy::Vq) {
        throw ConfigError("vq_route: codebook strategy is " + to_string(codebook.strategy()));
    }
    const std::size_t b = states.shape()[0];
    const std::size_t n = codebook.n_modules();
    RoutingDecision dec;
    dec.distances = token_distance_matrix(states, pad_mask, codebook.centroids());
    dec.chosen = argmin_rows(dec.distances, b, n);
    dec.weights = one_hot_weights(dec.chosen, n);
    dec.routing_loss = vq_loss(states, codebook.centroids(), dec.chosen, pad_mask, codebook.nu());
    dec.one_hot = true;
    return dec;
}

Codebook Codebook::kmeans_fit(const std::vector<double>& pooled, std::size_t count,
                              std::size_t d_model, std::size_t n, std::size_t mds_dim,
                              std::uint64_t seed) {
    if (mds_dim > d_model) throw ConfigError("kmeans: mds_dim must be <= d_model");
    if (pooled.size() != count * d_model) throw ShapeError("kmeans: embedding buffer mismatch");

    // Distinct-point precondition.
    std::set<std::vector<double>> distinct;
    for (std::size_t i = 0; i < count && distinct.size() < n; ++i) {
        distinct.insert(std::vector<double>(pooled.begin() + i * d_model,
                                            pooled.begin() + (i + 1) * d_model));
    }
    if (distinct.size() < n) {
        throw ClusteringError("kmeans: fewer than " + std::to_string(n) + " distinct points");
    }

    Rng rng(seed);

    // Basis of 8 x M training vectors, sampled without replacement.
    const std::size_t basis_target = 8 * mds_dim;
    const std::size_t basis_count = std::min(basis_target, count);
    auto idx = rng.sample_without_replacement(count, basis_count);
    std::vector<double> basis(basis_count * d_model);
    for (std::size_t i = 0; i < basis_count; ++i) {
        std::copy(pooled.begin() + idx[i] * d_model, pooled.begin() + (idx[i] + 1) * d_model,
                  basis.begin() + i * d_model);
    }
    SmacofOptions opts;
    opts.seed = rng.next_u64();
    MdsModel mds = smacof_fit(basis, basis_count, d_model, mds_dim, opts);

    std::vector<double> projected = mds.transform_all(pooled, count);

    // k-means++ seeding on the projected points.
    std::vector<std::vector<double>> centers;
    centers.reserve(n);
    const std::size_t first = static_cast<std::size_t>(rng.below(count));
    centers.emplace_back(projected.begin() + first * mds_dim,
                         projected.begin() + (first + 1) * mds_dim);
    std::vector<double> min_sq(count, 0.0);
    while (centers.size() < n) {
        double total = 0.0;
        for (std::size_t i = 0; i < count; ++i) {
            double best = 1e300;
            for (const auto& c : centers) {
                double ssq = 0.0;
                for (std::size_t j = 0; j < mds_dim; ++j) {
                    const double diff = projected[i * mds_dim + j] - c[j];
                    ssq += diff * diff;
                }
                best = std::min(best, ssq);
            }
            min_sq[i] = best;
            total += best;
        }
        std::size_t pick = 0;
        if (total <= 0.0) {
            pick = static_cast<std::size_t>(rng.below(count));
        } else {
            double r = rng.uniform() * total;
            for (std::size_t i = 0; i < count; ++i) {
                r -= min_sq[i];
                if (r <= 0.0) {
                    pick = i;
                    break;
                }
                pick = i;
            }
        }
        centers.emplace_back(projected.begin() + pick * mds_dim,
                             projected.begin() + (pick + 1) * mds_dim);
    }

    // Lloyd iterations to convergence.
    std::vector<std::size_t> assign(count, 0);
    for (std::size_t iter = 0; iter < 300; ++iter) {
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t best = 0;
            double best_sq = 1e300;
            for (std::size_t kk = 0; kk < n; ++kk) {
                double ssq = 0.0;
                for (std::size_t j = 0; j < mds_dim; ++j) {
                    const double diff = projected[i * mds_dim + j] - centers[kk][j];
                    ssq += diff * diff;
                }
                if (ssq < best_sq) {
                    best_sq = ssq;
                    best = kk;
                }
            }
            assign[i] = best;
        }
        double max_shift = 0.0;
        for (std::size_t kk = 0; kk < n; ++kk) {
            std::vector<double> mean(mds_dim, 0.0);
            double cnt = 0.0;
            for (std::size_t i = 0; i < count; ++i) {
                if (assign[i] != kk) continue;
                cnt += 1.0;
                for (std::size_t j = 0; j < mds_dim; ++j) mean[j] += projected[i * mds_dim + j];
            }
            if (cnt == 0.0) continue;  // empty cluster keeps its centroid
            double shift = 0.0;
            for (std::size_t j = 0; j < mds_dim; ++j) {
                mean[j] /= cnt;
                const double diff = mean[j] - centers[kk][j];
                shift += diff * diff;
            }
            centers[kk] = mean;
            max_shift = std::max(max_shift, std::sqrt(shift));
        }
        if (max_shift < 1e-8) break;
    }

    Codebook cb;
    cb.strategy_ = RoutingStrategy::Kmeans;
    cb.centroids_ = Tensor::zeros({n, mds_dim}, false);  // frozen; no gradient to the router
    for (std::size_t kk = 0; kk < n; ++kk) {
        std::copy(centers[kk].begin(), centers[kk].end(), cb.centroids_.data() + kk * mds_dim);
    }
    cb.mds_dim_ = mds_dim;
    cb.mds_ = std::move(mds);
    return cb;
}

RoutingDecision kmeans_route(const Tensor& states, const std::vector<double>& pad_mask,
                             const Codebook& codebook) {
    if (codebook.strategy() != RoutingStrategy::Kmeans) {
        throw ConfigError("kmeans_route: codebook strategy is " + to_string(codebook.strategy()));
    }
    const std::size_t b = states.shape()[0];
    const std::size_t n = codebook.n_modules();
    const std::size_t m = codebook.mds_dim();

    std::vector<double> pooled = pooled_embeddings(states, pad_mask);
    std::vector<double> projected = codebook.mds().transform_all(pooled, b);

    RoutingDecision dec;
    dec.distances.assign(b * n, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            double ssq = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const double diff = projected[i * m + j] - codebook.centroids().data()[k * m + j];
                ssq += diff * diff;
            }
            dec.distances[i * n + k] = std::sqrt(ssq);
        }
    }
    dec.chosen = argmin_rows(dec.distances, b, n);
    dec.weights = one_hot_weights(dec.chosen, n);
    dec.routing_loss = Tensor::scalar(0.0);
    dec.one_hot = true;
    return dec;
}

RoutingDecision softmin_weights(const Tensor& states, const std::vector<double>& pad_mask,
                                const Codebook& codebook) {
    if (codebook.strategy() != RoutingStrategy::Softmin) {
        throw ConfigError("softmin_weights: codebook strategy is " +
                          to_string(codebook.strategy()));
    }
    const std::size_t b = states.shape()[0];
    const std::size_t n = codebook.n_modules();

    // All modules stay active; the distances stay on the tape so the
    // centroids receive gradients from the output loss. This strategy
    // deliberately breaks the routing-separation causal structure.
    Tensor pooled = masked_mean_pool(states, pad_mask);
    Tensor dist = pairwise_euclidean(pooled, codebook.centroids());
    Tensor weights = softmax(scale(dist, -1.0 / codebook.temperature()), 1);

    RoutingDecision dec;
    dec.weights = weights;
    dec.distances.assign(dist.data(), dist.data() + dist.size());
    dec.chosen.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < n; ++k) {
            if (weights.data()[i * n + k] > weights.data()[i * n + best]) best = k;
        }
        dec.chosen[i] = static_cast<int>(best);
    }
    dec.routing_loss = Tensor::scalar(0.0);
    dec.one_hot = false;
    return dec;
}

RoutingDecision route(const Tensor& states, const std::vector<double>& pad_mask,
                      const Codebook& codebook) {
    switch (codebook.strategy()) {
        case RoutingStrategy::Vq: return vq_route(states, pad_mask, codebook);
        case RoutingStrategy::Kmeans: return kmeans_route(states, pad_mask, codebook);
        case RoutingStrategy::Softmin: return softmin_weights(states, pad_mask, codebook);
    }
    throw ConfigError("route: unknown strategy");
}

}  // namespace iclm
