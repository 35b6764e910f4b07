#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace iclm {

// SMACOF stress-majorization MDS. fit() embeds a point set; a fitted
// model can also place new points against its basis (single-point
// Guttman updates with the basis coordinates held fixed), which is how
// embeddings outside the training sample are projected.
struct MdsModel {
    std::size_t input_dim = 0;
    std::size_t out_dim = 0;
    std::vector<double> basis_points;  // [m, input_dim]
    std::vector<double> basis_coords;  // [m, out_dim]
    double stress = 0.0;

    std::size_t basis_size() const { return out_dim == 0 ? 0 : basis_coords.size() / out_dim; }

    std::vector<double> transform(const std::vector<double>& point) const;
    std::vector<double> transform_all(const std::vector<double>& points,
                                      std::size_t count) const;
};

struct SmacofOptions {
    std::size_t max_iter = 128;
    double stress_tol = 1e-9;
    std::uint64_t seed = 42;
};

// Embeds `count` points of dimension `input_dim` into `out_dim`
// dimensions. Throws DegenerateInputError when all pairwise distances
// vanish (duplicate-only configuration).
MdsModel smacof_fit(const std::vector<double>& points, std::size_t count, std::size_t input_dim,
                    std::size_t out_dim, const SmacofOptions& options = {});

double smacof_stress(const std::vector<double>& coords, std::size_t count, std::size_t dim,
                     const std::vector<double>& target_dist);

}  // namespace iclm
