#include "iclm/mds.hpp"

#include <cmath>

#include "iclm/errors.hpp"
#include "iclm/rng.hpp"

namespace iclm {

namespace {

double euclidean(const double* a, const double* b, std::size_t dim) {
    double ssq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
        const double d = a[j] - b[j];
        ssq += d * d;
    }
    return std::sqrt(ssq);
}

// Classical (Torgerson) MDS as the SMACOF starting configuration: exact
// for embeddable distance matrices, so the majorization refinement is
// not left to escape local minima from a random start. Top eigenpairs of
// the double-centered squared-distance matrix come from deterministic
// shifted power iteration with deflation.
std::vector<double> torgerson_init(const std::vector<double>& delta, std::size_t n,
                                   std::size_t out_dim, Rng& rng) {
    std::vector<double> b(n * n);
    std::vector<double> row_mean(n, 0.0);
    double grand = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double d2 = delta[i * n + j] * delta[i * n + j];
            row_mean[i] += d2;
            grand += d2;
        }
        row_mean[i] /= static_cast<double>(n);
    }
    grand /= static_cast<double>(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double d2 = delta[i * n + j] * delta[i * n + j];
            b[i * n + j] = -0.5 * (d2 - row_mean[i] - row_mean[j] + grand);
        }
    }

    // Gershgorin shift keeps the iteration matrix positive definite.
    double shift = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += std::abs(b[i * n + j]);
        shift = std::max(shift, row);
    }
    shift += 1.0;
    for (std::size_t i = 0; i < n; ++i) b[i * n + i] += shift;

    std::vector<double> coords(n * out_dim, 0.0);
    std::vector<double> v(n), bv(n);
    for (std::size_t k = 0; k < out_dim; ++k) {
        for (auto& x : v) x = rng.gaussian();
        double lambda = 0.0;
        for (int iter = 0; iter < 600; ++iter) {
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += b[i * n + j] * v[j];
                bv[i] = acc;
            }
            double norm = 0.0;
            for (double x : bv) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-30) break;
            double diff = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                bv[i] /= norm;
                const double d = bv[i] - v[i];
                diff += d * d;
            }
            v = bv;
            lambda = norm;
            if (diff < 1e-24 && iter > 8) break;
        }
        const double eig = lambda - shift;
        const double scale_k = eig > 0.0 ? std::sqrt(eig) : 0.0;
        for (std::size_t i = 0; i < n; ++i) coords[i * out_dim + k] = scale_k * v[i];
        // Deflate.
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) b[i * n + j] -= lambda * v[i] * v[j];
    }
    return coords;
}

}  // namespace

double smacof_stress(const std::vector<double>& coords, std::size_t count, std::size_t dim,
                     const std::vector<double>& target_dist) {
    double stress = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = i + 1; j < count; ++j) {
            const double d = euclidean(coords.data() + i * dim, coords.data() + j * dim, dim);
            const double delta = target_dist[i * count + j];
            stress += (delta - d) * (delta - d);
        }
    }
    return stress;
}

MdsModel smacof_fit(const std::vector<double>& points, std::size_t count, std::size_t input_dim,
                    std::size_t out_dim, const SmacofOptions& options) {
    if (count < 2) throw DegenerateInputError("smacof: need at least 2 points");
    if (points.size() != count * input_dim) throw ShapeError("smacof: point buffer size mismatch");

    std::vector<double> delta(count * count, 0.0);
    double max_delta = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = i + 1; j < count; ++j) {
            const double d =
                euclidean(points.data() + i * input_dim, points.data() + j * input_dim, input_dim);
            delta[i * count + j] = d;
            delta[j * count + i] = d;
            max_delta = std::max(max_delta, d);
        }
    }
    if (max_delta == 0.0) {
        throw DegenerateInputError("smacof: all points coincide; configuration is degenerate");
    }

    Rng rng(options.seed);
    std::vector<double> coords = torgerson_init(delta, count, out_dim, rng);

    double stress = smacof_stress(coords, count, out_dim, delta);
    std::vector<double> next(count * out_dim);
    for (std::size_t iter = 0; iter < options.max_iter; ++iter) {
        // Guttman transform: X <- (1/n) B(X) X.
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < count; ++i) {
            double bii = 0.0;
            double* row = next.data() + i * out_dim;
            for (std::size_t j = 0; j < count; ++j) {
                if (j == i) continue;
                const double dij =
                    euclidean(coords.data() + i * out_dim, coords.data() + j * out_dim, out_dim);
                const double bij = dij > 1e-15 ? -delta[i * count + j] / dij : 0.0;
                bii -= bij;
                for (std::size_t k = 0; k < out_dim; ++k)
                    row[k] += bij * coords[j * out_dim + k];
            }
            for (std::size_t k = 0; k < out_dim; ++k) {
                row[k] += bii * coords[i * out_dim + k];
                row[k] /= static_cast<double>(count);
            }
        }
        coords.swap(next);
        const double new_stress = smacof_stress(coords, count, out_dim, delta);
        if (std::abs(stress - new_stress) < options.stress_tol) {
            stress = new_stress;
            break;
        }
        stress = new_stress;
    }

    MdsModel model;
    model.input_dim = input_dim;
    model.out_dim = out_dim;
    model.basis_points = points;
    model.basis_coords = std::move(coords);
    model.stress = stress;
    return model;
}

std::vector<double> MdsModel::transform(const std::vector<double>& point) const {
    if (point.size() != input_dim) throw ShapeError("mds transform: point dimension mismatch");
    const std::size_t m = basis_size();

    std::vector<double> delta(m);
    for (std::size_t j = 0; j < m; ++j) {
        delta[j] = euclidean(point.data(), basis_points.data() + j * input_dim, input_dim);
    }

    // Start at the basis centroid and run single-point majorization.
    std::vector<double> y(out_dim, 0.0);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < out_dim; ++k) y[k] += basis_coords[j * out_dim + k];
    for (auto& v : y) v /= static_cast<double>(m);

    std::vector<double> next(out_dim);
    for (std::size_t iter = 0; iter < 64; ++iter) {
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            const double* z = basis_coords.data() + j * out_dim;
            const double dyz = euclidean(y.data(), z, out_dim);
            if (dyz > 1e-15) {
                const double r = delta[j] / dyz;
                for (std::size_t k = 0; k < out_dim; ++k)
                    next[k] += z[k] + r * (y[k] - z[k]);
            } else {
                for (std::size_t k = 0; k < out_dim; ++k) next[k] += z[k];
            }
        }
        double move = 0.0;
        for (std::size_t k = 0; k < out_dim; ++k) {
            next[k] /= static_cast<double>(m);
            const double d = next[k] - y[k];
            move += d * d;
        }
        y = next;
        if (move < 1e-20) break;
    }
    return y;
}

std::vector<double> MdsModel::transform_all(const std::vector<double>& points,
                                            std::size_t count) const {
    std::vector<double> out;
    out.reserve(count * out_dim);
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<double> point(points.begin() + i * input_dim,
                                  points.begin() + (i + 1) * input_dim);
        auto coord = transform(point);
        out.insert(out.end(), coord.begin(), coord.end());
    }
    return out;
}

}  // namespace iclm
