#include "iclm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "iclm/errors.hpp"

namespace iclm {

namespace {

std::shared_ptr<TapeNode> new_node(std::vector<std::size_t> shape, std::vector<double> data,
                                   bool requires_grad, const char* op) {
    auto node = std::make_shared<TapeNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->op = op;
    if (requires_grad) node->ensure_grad();
    return node;
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts) {
        if (t.requires_grad()) return true;
    }
    return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

Tensor make_op(const char* op, std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<Tensor> parents, std::function<void(TapeNode&)> backward_fn) {
    const bool rg = any_requires_grad(parents);
    auto node = new_node(std::move(shape), std::move(data), rg, op);
    if (rg) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(node);
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), 0.0);
    return Tensor(new_node(std::move(shape), std::move(data), requires_grad, "leaf"));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), value);
    return Tensor(new_node(std::move(shape), std::move(data), requires_grad, "leaf"));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("from_data: " + std::to_string(data.size()) +
                         " values do not fill shape " + shape_str(shape));
    }
    return Tensor(new_node(std::move(shape), std::move(data), requires_grad, "leaf"));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(new_node({}, {value}, requires_grad, "leaf"));
}

double Tensor::item() const {
    if (size() != 1) {
        throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) {
        throw ShapeError("at: rank mismatch");
    }
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : idx) {
        if (v >= node_->shape[i]) throw IndexError("at: index out of range");
        flat = flat * node_->shape[i] + v;
        ++i;
    }
    return node_->data[flat];
}

Tensor Tensor::clone_detached() const {
    return Tensor(new_node(node_->shape, node_->data, false, "leaf"));
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return make_op("add", a.shape(), std::move(out), {a, b}, [](TapeNode& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            for (std::size_t i = 0; i < n.size(); ++i) p.grad[i] += n.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [](TapeNode& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            for (std::size_t i = 0; i < n.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            for (std::size_t i = 0; i < n.size(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [](TapeNode& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            for (std::size_t i = 0; i < n.size(); ++i) pa.grad[i] += n.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            for (std::size_t i = 0; i < n.size(); ++i) pb.grad[i] += n.grad[i] * pa.data[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const double* pa = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
    return make_op("scale", a.shape(), std::move(out), {a}, [c](TapeNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) p.grad[i] += n.grad[i] * c;
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.shape()[0]) {
        throw ShapeError("add_bias: " + shape_str(x.shape()) + " with bias " +
                         shape_str(bias.shape()));
    }
    const std::size_t d = bias.size();
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    const double* px = x.data();
    const double* pb = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = px[r * d + j] + pb[j];
    }
    return make_op("add_bias", x.shape(), std::move(out), {x, bias}, [rows, d](TapeNode& n) {
        auto& px = *n.parents[0];
        auto& pb = *n.parents[1];
        if (px.requires_grad) {
            for (std::size_t i = 0; i < n.size(); ++i) px.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) pb.grad[j] += n.grad[r * d + j];
            }
        }
    });
}

Tensor elem_log(const Tensor& x) {
    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(px[i]);
    return make_op("elem_log", x.shape(), std::move(out), {x}, [](TapeNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) p.grad[i] += n.grad[i] / p.data[i];
    });
}

Tensor add_const(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] + c;
    return make_op("add_const", x.shape(), std::move(out), {x}, [](TapeNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) p.grad[i] += n.grad[i];
    });
}

Tensor expand_rows(const Tensor& x, std::vector<std::size_t> shape) {
    if (x.rank() != 1 || shape.empty() || shape[0] != x.shape()[0]) {
        throw ShapeError("expand_rows: need [B] source matching target leading extent");
    }
    const std::size_t b = shape[0];
    const std::size_t stride = shape_numel(shape) / b;
    std::vector<double> out(b * stride);
    for (std::size_t i = 0; i < b; ++i) {
        std::fill(out.begin() + i * stride, out.begin() + (i + 1) * stride, x.data()[i]);
    }
    return make_op("expand_rows", std::move(shape), std::move(out), {x},
                   [b, stride](TapeNode& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       for (std::size_t i = 0; i < b; ++i) {
                           double acc = 0.0;
                           for (std::size_t j = 0; j < stride; ++j) acc += n.grad[i * stride + j];
                           p.grad[i] += acc;
                       }
                   });
}

// ---------------------------------------------------------------- structural

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    std::vector<double> out(x.data(), x.data() + x.size());
    return make_op("reshape", std::move(shape), std::move(out), {x}, [](TapeNode& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < n.size(); ++i) p.grad[i] += n.grad[i];
    });
}

namespace {

// Maps flat output index -> flat input index for a permutation.
std::vector<std::size_t> permute_index_map(const std::vector<std::size_t>& in_shape,
                                           const std::vector<std::size_t>& perm) {
    const std::size_t rank = in_shape.size();
    std::vector<std::size_t> out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];

    std::vector<std::size_t> in_strides(rank, 1), out_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    for (std::size_t i = rank; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];

    const std::size_t total = shape_numel(in_shape);
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t o = 0; o < total; ++o) {
        std::size_t rem = o;
        std::size_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) {
            idx[i] = rem / out_strides[i];
            rem %= out_strides[i];
            src += idx[i] * in_strides[perm[i]];
        }
        map[o] = src;
    }
    return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) throw ShapeError("permute: perm rank mismatch");
    std::vector<bool> seen(x.rank(), false);
    for (auto p : perm) {
        if (p >= x.rank() || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = true;
    }
    std::vector<std::size_t> out_shape(x.rank());
    for (std::size_t i = 0; i < x.rank(); ++i) out_shape[i] = x.shape()[perm[i]];
    auto map = permute_index_map(x.shape(), perm);
    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = px[map[o]];
    return make_op("permute", std::move(out_shape), std::move(out), {x},
                   [map = std::move(map)](TapeNode& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       for (std::size_t o = 0; o < n.size(); ++o) p.grad[map[o]] += n.grad[o];
                   });
}

Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2");
    std::vector<std::size_t> perm(x.rank());
    for (std::size_t i = 0; i < x.rank(); ++i) perm[i] = i;
    std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
    return permute(x, perm);
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 1) {
        throw ShapeError("concat_last: rank mismatch");
    }
    for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
        if (a.shape()[i] != b.shape()[i]) {
            throw ShapeError("concat_last: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
    }
    const std::size_t da = a.shape().back();
    const std::size_t db = b.shape().back();
    const std::size_t rows = a.size() / da;
    std::vector<std::size_t> out_shape = a.shape();
    out_shape.back() = da + db;
    std::vector<double> out(rows * (da + db));
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy(pa + r * da, pa + (r + 1) * da, out.begin() + r * (da + db));
        std::copy(pb + r * db, pb + (r + 1) * db, out.begin() + r * (da + db) + da);
    }
    return make_op("concat_last", std::move(out_shape), std::move(out), {a, b},
                   [rows, da, db](TapeNode& n) {
                       auto& pa = *n.parents[0];
                       auto& pb = *n.parents[1];
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* g = n.grad.data() + r * (da + db);
                           if (pa.requires_grad) {
                               for (std::size_t j = 0; j < da; ++j) pa.grad[r * da + j] += g[j];
                           }
                           if (pb.requires_grad) {
                               for (std::size_t j = 0; j < db; ++j)
                                   pb.grad[r * db + j] += g[da + j];
                           }
                       }
                   });
}

Tensor concat_axis0(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("concat_axis0: empty list");
    std::vector<std::size_t> tail(xs[0].shape().begin() + 1, xs[0].shape().end());
    std::size_t rows = 0;
    for (const auto& x : xs) {
        if (x.rank() != xs[0].rank() ||
            !std::equal(tail.begin(), tail.end(), x.shape().begin() + 1)) {
            throw ShapeError("concat_axis0: incompatible shapes");
        }
        rows += x.shape()[0];
    }
    const std::size_t stride = shape_numel(tail);
    std::vector<std::size_t> out_shape;
    out_shape.push_back(rows);
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    std::vector<double> out;
    out.reserve(rows * stride);
    std::vector<std::size_t> sizes;
    for (const auto& x : xs) {
        out.insert(out.end(), x.data(), x.data() + x.size());
        sizes.push_back(x.size());
    }
    return make_op("concat_axis0", std::move(out_shape), std::move(out), xs,
                   [sizes = std::move(sizes)](TapeNode& n) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < n.parents.size(); ++k) {
                           auto& p = *n.parents[k];
                           if (p.requires_grad) {
                               for (std::size_t i = 0; i < sizes[k]; ++i)
                                   p.grad[i] += n.grad[off + i];
                           }
                           off += sizes[k];
                       }
                   });
}

Tensor slice_axis0(const Tensor& x, std::size_t offset, std::size_t count) {
    if (x.rank() < 1 || offset + count > x.shape()[0]) {
        throw ShapeError("slice_axis0: range out of bounds");
    }
    const std::size_t stride = x.size() / x.shape()[0];
    std::vector<std::size_t> out_shape = x.shape();
    out_shape[0] = count;
    std::vector<double> out(x.data() + offset * stride, x.data() + (offset + count) * stride);
    return make_op("slice_axis0", std::move(out_shape), std::move(out), {x},
                   [offset, stride](TapeNode& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       for (std::size_t i = 0; i < n.size(); ++i)
                           p.grad[offset * stride + i] += n.grad[i];
                   });
}

Tensor rows_gather(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.rank() < 1) throw ShapeError("rows_gather: rank 0 input");
    const std::size_t stride = x.size() / x.shape()[0];
    for (auto r : rows) {
        if (r >= x.shape()[0]) throw IndexError("rows_gather: row out of range");
    }
    std::vector<std::size_t> out_shape = x.shape();
    out_shape[0] = rows.size();
    std::vector<double> out(rows.size() * stride);
    const double* px = x.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(px + rows[i] * stride, px + (rows[i] + 1) * stride, out.begin() + i * stride);
    }
    return make_op("rows_gather", std::move(out_shape), std::move(out), {x},
                   [rows, stride](TapeNode& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                           for (std::size_t j = 0; j < stride; ++j)
                               p.grad[rows[i] * stride + j] += n.grad[i * stride + j];
                       }
                   });
}

Tensor rows_scatter(const std::vector<Tensor>& pieces,
                    const std::vector<std::vector<std::size_t>>& rows, std::size_t batch) {
    if (pieces.empty() || pieces.size() != rows.size()) {
        throw ShapeError("rows_scatter: pieces/rows mismatch");
    }
    std::vector<std::size_t> tail(pieces[0].shape().begin() + 1, pieces[0].shape().end());
    const std::size_t stride = shape_numel(tail);
    std::vector<int> covered(batch, 0);
    for (std::size_t k = 0; k < pieces.size(); ++k) {
        if (pieces[k].shape()[0] != rows[k].size()) {
            throw ShapeError("rows_scatter: piece " + std::to_string(k) + " has " +
                             std::to_string(pieces[k].shape()[0]) + " rows, expected " +
                             std::to_string(rows[k].size()));
        }
        for (auto r : rows[k]) {
            if (r >= batch) throw IndexError("rows_scatter: row out of range");
            if (covered[r]++) throw IndexError("rows_scatter: row covered twice");
        }
    }
    std::vector<std::size_t> out_shape;
    out_shape.push_back(batch);
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    std::vector<double> out(batch * stride, 0.0);
    for (std::size_t k = 0; k < pieces.size(); ++k) {
        const double* pp = pieces[k].data();
        for (std::size_t i = 0; i < rows[k].size(); ++i) {
            std::copy(pp + i * stride, pp + (i + 1) * stride,
                      out.begin() + rows[k][i] * stride);
        }
    }
    return make_op("rows_scatter", std::move(out_shape), std::move(out), pieces,
                   [rows, stride](TapeNode& n) {
                       for (std::size_t k = 0; k < n.parents.size(); ++k) {
                           auto& p = *n.parents[k];
                           if (!p.requires_grad) continue;
                           for (std::size_t i = 0; i < rows[k].size(); ++i) {
                               for (std::size_t j = 0; j < stride; ++j)
                                   p.grad[i * stride + j] += n.grad[rows[k][i] * stride + j];
                           }
                       }
                   });
}

// ------------------------------------------------------------------- numeric

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: inputs must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const std::size_t k = a.shape()[a.rank() - 1];
    const std::size_t m = a.shape()[a.rank() - 2];
    if (b.shape()[b.rank() - 2] != k) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t n = b.shape()[b.rank() - 1];

    const bool shared_b = (b.rank() == 2 && a.rank() >= 2);
    std::size_t batch = 1;
    if (shared_b) {
        batch = a.size() / (m * k);
    } else {
        if (a.rank() != b.rank()) {
            throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
        }
        for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
            if (a.shape()[i] != b.shape()[i]) {
                throw ShapeError("matmul: batch extents differ, " + shape_str(a.shape()) +
                                 " x " + shape_str(b.shape()));
            }
            batch *= a.shape()[i];
        }
    }

    std::vector<std::size_t> out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(batch * m * n, 0.0);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* A = pa + bi * m * k;
        const double* B = shared_b ? pb : pb + bi * k * n;
        double* C = out.data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = A[i * k + kk];
                if (av == 0.0) continue;
                const double* Brow = B + kk * n;
                double* Crow = C + i * n;
                for (std::size_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
            }
        }
    }
    return make_op(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [batch, m, k, n, shared_b](TapeNode& node) {
            auto& pa = *node.parents[0];
            auto& pb = *node.parents[1];
            for (std::size_t bi = 0; bi < batch; ++bi) {
                const double* A = pa.data.data() + bi * m * k;
                const double* B = shared_b ? pb.data.data() : pb.data.data() + bi * k * n;
                const double* G = node.grad.data() + bi * m * n;
                if (pa.requires_grad) {
                    double* dA = pa.grad.data() + bi * m * k;
                    // dA = G * B^T
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                            const double gv = G[i * n + j];
                            if (gv == 0.0) continue;
                            const double* Brow = B + j;  // column j of B
                            for (std::size_t kk = 0; kk < k; ++kk)
                                dA[i * k + kk] += gv * Brow[kk * n];
                        }
                    }
                }
                if (pb.requires_grad) {
                    double* dB = shared_b ? pb.grad.data() : pb.grad.data() + bi * k * n;
                    // dB += A^T * G
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const double av = A[i * k + kk];
                            if (av == 0.0) continue;
                            const double* Grow = G + i * n;
                            double* dBrow = dB + kk * n;
                            for (std::size_t j = 0; j < n; ++j) dBrow[j] += av * Grow[j];
                        }
                    }
                }
            }
        });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    const std::size_t n = x.shape()[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];

    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * n * inner + j;
            double mx = px[base];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
            double denom = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(px[base + i * inner] - mx);
                out[base + i * inner] = e;
                denom += e;
            }
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= denom;
        }
    }
    return make_op("softmax", x.shape(), std::move(out), {x},
                   [outer, n, inner](TapeNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t j = 0; j < inner; ++j) {
                               const std::size_t base = o * n * inner + j;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < n; ++i) {
                                   const std::size_t ix = base + i * inner;
                                   dot += node.grad[ix] * node.data[ix];
                               }
                               for (std::size_t i = 0; i < n; ++i) {
                                   const std::size_t ix = base + i * inner;
                                   p.grad[ix] += node.data[ix] * (node.grad[ix] - dot);
                               }
                           }
                       }
                   });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = px[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v)));
    }
    return make_op("gelu", x.shape(), std::move(out), {x}, [](TapeNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        constexpr double c = 0.7978845608028654;
        constexpr double a = 0.044715;
        for (std::size_t i = 0; i < node.size(); ++i) {
            const double v = p.data[i];
            const double t = std::tanh(c * (v + a * v * v * v));
            const double du = c * (1.0 + 3.0 * a * v * v);
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            p.grad[i] += node.grad[i] * d;
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1 ||
        gamma.shape()[0] != x.shape().back() || beta.shape()[0] != x.shape().back()) {
        throw ShapeError("layer_norm: feature extents do not match");
    }
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = pg[j] * h + pb[j];
        }
    }
    return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                   [rows, d, xhat, inv_std](TapeNode& node) {
                       auto& px = *node.parents[0];
                       auto& pg = *node.parents[1];
                       auto& pb = *node.parents[2];
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* g = node.grad.data() + r * d;
                           const double* h = xhat->data() + r * d;
                           if (pg.requires_grad) {
                               for (std::size_t j = 0; j < d; ++j) pg.grad[j] += g[j] * h[j];
                           }
                           if (pb.requires_grad) {
                               for (std::size_t j = 0; j < d; ++j) pb.grad[j] += g[j];
                           }
                           if (px.requires_grad) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double gl = g[j] * pg.data[j];
                                   m1 += gl;
                                   m2 += gl * h[j];
                               }
                               m1 /= static_cast<double>(d);
                               m2 /= static_cast<double>(d);
                               const double is = (*inv_std)[r];
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double gl = g[j] * pg.data[j];
                                   px.grad[r * d + j] += is * (gl - m1 - h[j] * m2);
                               }
                           }
                       }
                   });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
    return make_op("sum", {}, {s}, {x}, [](TapeNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += node.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    double s = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
    const double inv = 1.0 / static_cast<double>(x.size());
    return make_op("mean", {}, {s * inv}, {x}, [inv](TapeNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += node.grad[0] * inv;
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    double s = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = pa[i] - pb[i];
        s += d * d;
    }
    const double inv = 1.0 / static_cast<double>(a.size());
    return make_op("mse", {}, {s * inv}, {a, b}, [inv](TapeNode& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const double g = node.grad[0];
        for (std::size_t i = 0; i < pa.data.size(); ++i) {
            const double d = 2.0 * (pa.data[i] - pb.data[i]) * inv * g;
            if (pa.requires_grad) pa.grad[i] += d;
            if (pb.requires_grad) pb.grad[i] -= d;
        }
    });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids, std::size_t batch,
                 std::size_t seq) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be [V,D]");
    if (ids.size() != batch * seq) throw ShapeError("embedding: id count mismatch");
    const std::size_t vocab = table.shape()[0];
    const std::size_t d = table.shape()[1];
    std::vector<double> out(batch * seq * d);
    const double* pt = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw IndexError("embedding: token id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(vocab));
        }
        std::copy(pt + static_cast<std::size_t>(id) * d, pt + (static_cast<std::size_t>(id) + 1) * d,
                  out.begin() + i * d);
    }
    return make_op("embedding", {batch, seq, d}, std::move(out), {table},
                   [ids, d](TapeNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                           const std::size_t row = static_cast<std::size_t>(ids[i]);
                           for (std::size_t j = 0; j < d; ++j)
                               p.grad[row * d + j] += node.grad[i * d + j];
                       }
                   });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& mask) {
    if (logits.rank() < 2) throw ShapeError("cross_entropy: logits must be [..,V]");
    const std::size_t v = logits.shape().back();
    const std::size_t rows = logits.size() / v;
    if (targets.size() != rows || mask.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(rows) + " positions vs " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
    }
    double mask_total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (mask[r] != 0.0) {
            if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
                throw IndexError("cross_entropy: target id " + std::to_string(targets[r]) +
                                 " outside vocabulary of size " + std::to_string(v));
            }
            mask_total += mask[r];
        }
    }
    // Empty mask: loss is the constant 0 with no gradient, so degenerate
    // batches cannot poison training.
    if (mask_total == 0.0) return Tensor::scalar(0.0);

    const double* pl = logits.data();
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (mask[r] == 0.0) continue;
        const double* row = pl + r * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        const double lse = mx + std::log(denom);
        loss += mask[r] * (lse - row[static_cast<std::size_t>(targets[r])]);
    }
    loss /= mask_total;
    return make_op("cross_entropy", {}, {loss}, {logits},
                   [targets, mask, mask_total, rows, v](TapeNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       const double g = node.grad[0];
                       for (std::size_t r = 0; r < rows; ++r) {
                           if (mask[r] == 0.0) continue;
                           const double* row = p.data.data() + r * v;
                           double mx = row[0];
                           for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                           double denom = 0.0;
                           for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
                           const double w = g * mask[r] / mask_total;
                           for (std::size_t j = 0; j < v; ++j) {
                               double soft = std::exp(row[j] - mx) / denom;
                               if (j == static_cast<std::size_t>(targets[r])) soft -= 1.0;
                               p.grad[r * v + j] += w * soft;
                           }
                       }
                   });
}

Tensor stop_gradient(const Tensor& x) {
    std::vector<double> copy(x.data(), x.data() + x.size());
    auto node = new_node(x.shape(), std::move(copy), false, "stop_gradient");
    return Tensor(node);
}

Tensor masked_mean_pool(const Tensor& x, const std::vector<double>& mask) {
    if (x.rank() != 3) throw ShapeError("masked_mean_pool: expected [B,T,D]");
    const std::size_t b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
    if (mask.size() != b * t) throw ShapeError("masked_mean_pool: mask size mismatch");
    std::vector<double> out(b * d, 0.0);
    std::vector<double> totals(b, 0.0);
    const double* px = x.data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
            const double m = mask[i * t + j];
            if (m == 0.0) continue;
            totals[i] += m;
            const double* row = px + (i * t + j) * d;
            for (std::size_t k = 0; k < d; ++k) out[i * d + k] += m * row[k];
        }
        if (totals[i] == 0.0) {
            throw DegenerateInputError("masked_mean_pool: input " + std::to_string(i) +
                                       " has no unmasked positions");
        }
        for (std::size_t k = 0; k < d; ++k) out[i * d + k] /= totals[i];
    }
    return make_op("masked_mean_pool", {b, d}, std::move(out), {x},
                   [mask, totals, b, t, d](TapeNode& node) {
                       auto& p = *node.parents[0];
                       if (!p.requires_grad) return;
                       for (std::size_t i = 0; i < b; ++i) {
                           for (std::size_t j = 0; j < t; ++j) {
                               const double m = mask[i * t + j];
                               if (m == 0.0) continue;
                               const double w = m / totals[i];
                               for (std::size_t k = 0; k < d; ++k)
                                   p.grad[(i * t + j) * d + k] += w * node.grad[i * d + k];
                           }
                       }
                   });
}

Tensor weighted_combine(const std::vector<Tensor>& xs, const Tensor& weights) {
    if (xs.empty()) throw ShapeError("weighted_combine: empty module list");
    const std::size_t n = xs.size();
    if (weights.rank() != 2 || weights.shape()[1] != n) {
        throw ShapeError("weighted_combine: weights must be [B," + std::to_string(n) + "]");
    }
    const std::size_t b = weights.shape()[0];
    for (const auto& x : xs) {
        if (x.shape() != xs[0].shape() || x.shape()[0] != b) {
            throw ShapeError("weighted_combine: incompatible module state shapes");
        }
    }
    const std::size_t stride = xs[0].size() / b;
    std::vector<double> out(xs[0].size(), 0.0);
    const double* pw = weights.data();
    for (std::size_t k = 0; k < n; ++k) {
        const double* px = xs[k].data();
        for (std::size_t i = 0; i < b; ++i) {
            const double w = pw[i * n + k];
            if (w == 0.0) continue;
            for (std::size_t j = 0; j < stride; ++j)
                out[i * stride + j] += w * px[i * stride + j];
        }
    }
    std::vector<Tensor> parents = xs;
    parents.push_back(weights);
    return make_op("weighted_combine", xs[0].shape(), std::move(out), std::move(parents),
                   [n, b, stride](TapeNode& node) {
                       auto& pw = *node.parents[n];
                       for (std::size_t k = 0; k < n; ++k) {
                           auto& px = *node.parents[k];
                           for (std::size_t i = 0; i < b; ++i) {
                               const double w = pw.data[i * n + k];
                               if (px.requires_grad && w != 0.0) {
                                   for (std::size_t j = 0; j < stride; ++j)
                                       px.grad[i * stride + j] +=
                                           w * node.grad[i * stride + j];
                               }
                               if (pw.requires_grad) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < stride; ++j)
                                       dot += px.data[i * stride + j] *
                                              node.grad[i * stride + j];
                                   pw.grad[i * n + k] += dot;
                               }
                           }
                       }
                   });
}

Tensor pairwise_euclidean(const Tensor& points, const Tensor& centers) {
    if (points.rank() != 2 || centers.rank() != 2 ||
        points.shape()[1] != centers.shape()[1]) {
        throw ShapeError("pairwise_euclidean: " + shape_str(points.shape()) + " vs " +
                         shape_str(centers.shape()));
    }
    const std::size_t b = points.shape()[0], n = centers.shape()[0], d = points.shape()[1];
    std::vector<double> out(b * n);
    const double* pp = points.data();
    const double* pc = centers.data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            double ssq = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = pp[i * d + j] - pc[k * d + j];
                ssq += diff * diff;
            }
            out[i * n + k] = std::sqrt(std::max(ssq, 1e-24));
        }
    }
    return make_op("pairwise_euclidean", {b, n}, std::move(out), {points, centers},
                   [b, n, d](TapeNode& node) {
                       auto& pp = *node.parents[0];
                       auto& pc = *node.parents[1];
                       for (std::size_t i = 0; i < b; ++i) {
                           for (std::size_t k = 0; k < n; ++k) {
                               const double g = node.grad[i * n + k];
                               if (g == 0.0) continue;
                               const double dist = node.data[i * n + k];
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double diff =
                                       (pp.data[i * d + j] - pc.data[k * d + j]) / dist;
                                   if (pp.requires_grad) pp.grad[i * d + j] += g * diff;
                                   if (pc.requires_grad) pc.grad[k * d + j] -= g * diff;
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------- mutual information

namespace {
constexpr double kProbFloor = 1e-12;
inline double safe_log(double v) { return std::log(std::max(v, kProbFloor)); }
}  // namespace

Tensor mi_kl(const Tensor& p, const Tensor& q) {
    if (p.rank() != 2 || q.rank() != 2 || p.shape()[0] != q.shape()[0]) {
        throw ShapeError("mi_kl: paired distributions required, got " + shape_str(p.shape()) +
                         " and " + shape_str(q.shape()));
    }
    const std::size_t b = p.shape()[0];
    const std::size_t kp = p.shape()[1];
    const std::size_t kq = q.shape()[1];
    const double invb = 1.0 / static_cast<double>(b);

    std::vector<double> joint(kp * kq, 0.0);
    std::vector<double> mp(kp, 0.0), mq(kq, 0.0);
    const double* dp = p.data();
    const double* dq = q.data();
    for (std::size_t c = 0; c < b; ++c) {
        for (std::size_t k = 0; k < kp; ++k) {
            const double pv = dp[c * kp + k];
            mp[k] += pv * invb;
            if (pv == 0.0) continue;
            for (std::size_t l = 0; l < kq; ++l)
                joint[k * kq + l] += pv * dq[c * kq + l] * invb;
        }
        for (std::size_t l = 0; l < kq; ++l) mq[l] += dq[c * kq + l] * invb;
    }
    double mi = 0.0;
    for (std::size_t k = 0; k < kp; ++k) {
        for (std::size_t l = 0; l < kq; ++l) {
            const double j = joint[k * kq + l];
            if (j > 0.0) mi += j * (safe_log(j) - safe_log(mp[k]) - safe_log(mq[l]));
        }
    }
    return make_op(
        "mi_kl", {}, {mi}, {p, q},
        [b, kp, kq, invb, joint = std::move(joint), mp = std::move(mp),
         mq = std::move(mq)](TapeNode& node) {
            auto& pp = *node.parents[0];
            auto& pq = *node.parents[1];
            const double g = node.grad[0];
            std::vector<double> logj(kp * kq);
            for (std::size_t i = 0; i < logj.size(); ++i) logj[i] = safe_log(joint[i]);
            std::vector<double> row_sum(kp, 0.0), col_sum(kq, 0.0);
            for (std::size_t k = 0; k < kp; ++k)
                for (std::size_t l = 0; l < kq; ++l) {
                    row_sum[k] += joint[k * kq + l];
                    col_sum[l] += joint[k * kq + l];
                }
            if (pp.requires_grad) {
                for (std::size_t c = 0; c < b; ++c) {
                    for (std::size_t k = 0; k < kp; ++k) {
                        double acc = 0.0, qsum = 0.0;
                        for (std::size_t l = 0; l < kq; ++l) {
                            const double qv = pq.data[c * kq + l];
                            qsum += qv;
                            acc += qv * (logj[k * kq + l] - safe_log(mp[k]) - safe_log(mq[l]));
                        }
                        acc += qsum - row_sum[k] / std::max(mp[k], kProbFloor);
                        pp.grad[c * kp + k] += g * invb * acc;
                    }
                }
            }
            if (pq.requires_grad) {
                for (std::size_t c = 0; c < b; ++c) {
                    for (std::size_t l = 0; l < kq; ++l) {
                        double acc = 0.0, psum = 0.0;
                        for (std::size_t k = 0; k < kp; ++k) {
                            const double pv = pp.data[c * kp + k];
                            psum += pv;
                            acc += pv * (logj[k * kq + l] - safe_log(mp[k]) - safe_log(mq[l]));
                        }
                        acc += psum - col_sum[l] / std::max(mq[l], kProbFloor);
                        pq.grad[c * kq + l] += g * invb * acc;
                    }
                }
            }
        });
}

double mi_kl_value(const std::vector<std::vector<double>>& p,
                   const std::vector<std::vector<double>>& q) {
    if (p.size() != q.size()) throw ShapeError("mi_kl_value: pairing error, unequal lengths");
    if (p.empty()) throw ShapeError("mi_kl_value: empty batch");
    const std::size_t b = p.size();
    const std::size_t kp = p[0].size();
    const std::size_t kq = q[0].size();
    const double invb = 1.0 / static_cast<double>(b);
    std::vector<double> joint(kp * kq, 0.0), mp(kp, 0.0), mq(kq, 0.0);
    for (std::size_t c = 0; c < b; ++c) {
        if (p[c].size() != kp || q[c].size() != kq) {
            throw ShapeError("mi_kl_value: ragged distribution list");
        }
        for (std::size_t k = 0; k < kp; ++k) {
            mp[k] += p[c][k] * invb;
            for (std::size_t l = 0; l < kq; ++l) joint[k * kq + l] += p[c][k] * q[c][l] * invb;
        }
        for (std::size_t l = 0; l < kq; ++l) mq[l] += q[c][l] * invb;
    }
    double mi = 0.0;
    for (std::size_t k = 0; k < kp; ++k)
        for (std::size_t l = 0; l < kq; ++l) {
            const double j = joint[k * kq + l];
            if (j > 0.0) mi += j * (safe_log(j) - safe_log(mp[k]) - safe_log(mq[l]));
        }
    return mi;
}

// ------------------------------------------------------------------ batchnorm

BatchNormParams BatchNormParams::make(std::size_t features) {
    BatchNormParams bn;
    bn.gamma = Tensor::full({features}, 1.0, true);
    bn.beta = Tensor::zeros({features}, true);
    bn.running_mean = Tensor::zeros({features}, false);
    bn.running_var = Tensor::full({features}, 1.0, false);
    return bn;
}

namespace {

Tensor batch_norm_core(const Tensor& x2d, BatchNormParams& bn, bool training) {
    const std::size_t s = x2d.shape()[0];
    const std::size_t d = x2d.shape()[1];
    if (training && s < 2) {
        throw DegenerateInputError(
            "shared_batch_norm: got a single sample in total; variance is undefined");
    }
    const double* px = x2d.data();
    std::vector<double> out(x2d.size());

    if (!training) {
        std::vector<double> inv(d);
        for (std::size_t j = 0; j < d; ++j)
            inv[j] = 1.0 / std::sqrt(bn.running_var.data()[j] + bn.eps);
        const double* pg = bn.gamma.data();
        const double* pb = bn.beta.data();
        std::vector<double> rm(bn.running_mean.data(), bn.running_mean.data() + d);
        for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = 0; j < d; ++j)
                out[i * d + j] = pg[j] * (px[i * d + j] - rm[j]) * inv[j] + pb[j];
        return make_op("batch_norm_eval", x2d.shape(), std::move(out),
                       {x2d, bn.gamma, bn.beta},
                       [s, d, inv = std::move(inv), rm = std::move(rm)](TapeNode& node) {
                           auto& px = *node.parents[0];
                           auto& pg = *node.parents[1];
                           auto& pb = *node.parents[2];
                           for (std::size_t i = 0; i < s; ++i) {
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double g = node.grad[i * d + j];
                                   const double xh = (px.data[i * d + j] - rm[j]) * inv[j];
                                   if (px.requires_grad)
                                       px.grad[i * d + j] += g * pg.data[j] * inv[j];
                                   if (pg.requires_grad) pg.grad[j] += g * xh;
                                   if (pb.requires_grad) pb.grad[j] += g;
                               }
                           }
                       });
    }

    std::vector<double> mu(d, 0.0), var(d, 0.0);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < d; ++j) mu[j] += px[i * d + j];
    for (std::size_t j = 0; j < d; ++j) mu[j] /= static_cast<double>(s);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = px[i * d + j] - mu[j];
            var[j] += c * c;
        }
    for (std::size_t j = 0; j < d; ++j) var[j] /= static_cast<double>(s);

    auto xhat = std::make_shared<std::vector<double>>(x2d.size());
    std::vector<double> inv(d);
    for (std::size_t j = 0; j < d; ++j) inv[j] = 1.0 / std::sqrt(var[j] + bn.eps);
    const double* pg = bn.gamma.data();
    const double* pb = bn.beta.data();
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (px[i * d + j] - mu[j]) * inv[j];
            (*xhat)[i * d + j] = h;
            out[i * d + j] = pg[j] * h + pb[j];
        }
    }
    // Running statistics track the unbiased batch variance.
    const double unbias = static_cast<double>(s) / static_cast<double>(s - 1);
    for (std::size_t j = 0; j < d; ++j) {
        bn.running_mean.data()[j] =
            (1.0 - bn.momentum) * bn.running_mean.data()[j] + bn.momentum * mu[j];
        bn.running_var.data()[j] =
            (1.0 - bn.momentum) * bn.running_var.data()[j] + bn.momentum * var[j] * unbias;
    }
    bn.steps++;

    return make_op("batch_norm", x2d.shape(), std::move(out), {x2d, bn.gamma, bn.beta},
                   [s, d, xhat, inv = std::move(inv)](TapeNode& node) {
                       auto& px = *node.parents[0];
                       auto& pg = *node.parents[1];
                       auto& pb = *node.parents[2];
                       std::vector<double> sum_gl(d, 0.0), sum_gl_xh(d, 0.0);
                       for (std::size_t i = 0; i < s; ++i) {
                           for (std::size_t j = 0; j < d; ++j) {
                               const double gl = node.grad[i * d + j] * pg.data[j];
                               sum_gl[j] += gl;
                               sum_gl_xh[j] += gl * (*xhat)[i * d + j];
                           }
                       }
                       if (pg.requires_grad || pb.requires_grad) {
                           for (std::size_t i = 0; i < s; ++i) {
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double g = node.grad[i * d + j];
                                   if (pg.requires_grad) pg.grad[j] += g * (*xhat)[i * d + j];
                                   if (pb.requires_grad) pb.grad[j] += g;
                               }
                           }
                       }
                       if (px.requires_grad) {
                           const double invs = 1.0 / static_cast<double>(s);
                           for (std::size_t i = 0; i < s; ++i) {
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double gl = node.grad[i * d + j] * pg.data[j];
                                   px.grad[i * d + j] +=
                                       inv[j] * (gl - sum_gl[j] * invs -
                                                 (*xhat)[i * d + j] * sum_gl_xh[j] * invs);
                               }
                           }
                       }
                   });
}

}  // namespace

std::vector<Tensor> shared_batch_norm(const std::vector<Tensor>& states, BatchNormParams& bn,
                                      bool training) {
    if (states.empty()) throw ShapeError("shared_batch_norm: empty state list");
    const std::size_t d = states[0].shape().back();
    if (bn.gamma.size() != d) {
        throw ShapeError("shared_batch_norm: parameter width " +
                         std::to_string(bn.gamma.size()) + " vs feature width " +
                         std::to_string(d));
    }
    std::vector<Tensor> flat;
    std::vector<std::size_t> counts;
    for (const auto& s : states) {
        if (s.shape().back() != d) {
            throw ShapeError("shared_batch_norm: states disagree on feature width");
        }
        const std::size_t samples = s.size() / d;
        counts.push_back(samples);
        flat.push_back(reshape(s, {samples, d}));
    }
    Tensor joint = flat.size() == 1 ? flat[0] : concat_axis0(flat);
    Tensor normalized = batch_norm_core(joint, bn, training);
    std::vector<Tensor> outputs;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < states.size(); ++i) {
        Tensor piece = slice_axis0(normalized, offset, counts[i]);
        outputs.push_back(reshape(piece, states[i].shape()));
        offset += counts[i];
    }
    return outputs;
}

// ------------------------------------------------------------------- backward

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward: loss has shape " + shape_str(loss.shape()) +
                         ", expected a scalar");
    }
    TapeNode* root = loss.raw();
    if (!root->requires_grad) return;  // fully detached; nothing reachable

    static int generation = 0;
    const int gen = ++generation;

    std::vector<TapeNode*> order;
    std::vector<std::pair<TapeNode*, std::size_t>> stack;
    root->visit_mark = gen;
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TapeNode* parent = node->parents[next].get();
            ++next;
            if (parent->requires_grad && parent->visit_mark != gen) {
                parent->visit_mark = gen;
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TapeNode* node : order) {
        node->ensure_grad();
        std::fill(node->grad.begin(), node->grad.end(), 0.0);
    }
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TapeNode* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

}  // namespace iclm
