#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace iclm {

// One record on the reverse-mode tape. Holds the forward value, the
// gradient buffer, parent references and the backward rule. The tape is
// acyclic by construction; backward() replays it once in reverse
// topological order.
struct TapeNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TapeNode>> parents;
    std::function<void(TapeNode&)> backward_fn;
    int visit_mark = 0;  // scratch used by backward()

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Dense row-major float64 tensor participating in the autodiff tape.
// Copying a Tensor aliases the same storage (shared node); values are
// immutable once created except for gradient accumulation and explicit
// in-place parameter updates between steps.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TapeNode> node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rank() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    double* data() { return node_->data.data(); }
    const double* data() const { return node_->data.data(); }
    std::vector<double>& data_vec() { return node_->data; }
    const std::vector<double>& data_vec() const { return node_->data; }

    double* grad() { return node_->grad.data(); }
    const std::vector<double>& grad_vec() const { return node_->grad; }
    void ensure_grad() { node_->ensure_grad(); }
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    double item() const;  // scalar access, throws ShapeError otherwise
    double at(std::initializer_list<std::size_t> idx) const;

    std::shared_ptr<TapeNode> node() const { return node_; }
    TapeNode* raw() const { return node_.get(); }

    // Deep copy of values only; result is a detached leaf.
    Tensor clone_detached() const;

private:
    std::shared_ptr<TapeNode> node_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Factory for custom differentiable ops. The node requires grad iff any
// parent does; backward_fn must accumulate into parents that require grad.
Tensor make_op(const char* op, std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<Tensor> parents, std::function<void(TapeNode&)> backward_fn);

// ---- elementwise and structural ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // bias broadcast over last axis
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose_last2(const Tensor& x);
Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor concat_axis0(const std::vector<Tensor>& xs);
Tensor slice_axis0(const Tensor& x, std::size_t offset, std::size_t count);
Tensor rows_gather(const Tensor& x, const std::vector<std::size_t>& rows);
Tensor rows_scatter(const std::vector<Tensor>& pieces,
                    const std::vector<std::vector<std::size_t>>& rows,
                    std::size_t batch);

Tensor elem_log(const Tensor& x);        // natural log, elementwise
Tensor add_const(const Tensor& x, double c);
Tensor expand_rows(const Tensor& x, std::vector<std::size_t> shape);  // [B] -> [B,...]

// ---- numeric ops ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);  // mean over all elements
Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                 std::size_t batch, std::size_t seq);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& mask);
Tensor stop_gradient(const Tensor& x);
Tensor masked_mean_pool(const Tensor& x, const std::vector<double>& mask);  // [B,T,D] -> [B,D]
Tensor weighted_combine(const std::vector<Tensor>& xs, const Tensor& weights);  // weights [B,N]
Tensor pairwise_euclidean(const Tensor& points, const Tensor& centers);  // [B,D],[N,D] -> [B,N]

// Batch-level mutual information between paired per-context feature
// distributions p, q (each [B,K], rows nonnegative). Per context the
// joint is the outer product p_c (x) q_c; contexts are mixed uniformly
// at batch level and the result is KL(J || m_p (x) m_q) in nats.
Tensor mi_kl(const Tensor& p, const Tensor& q);

// Non-tape twin of mi_kl used for traces and reports.
double mi_kl_value(const std::vector<std::vector<double>>& p,
                   const std::vector<std::vector<double>>& q);

// ---- shared batch normalization ----
struct BatchNormParams {
    Tensor gamma;         // [D], learned
    Tensor beta;          // [D], learned
    Tensor running_mean;  // [D], tracked with momentum, used in eval mode
    Tensor running_var;   // [D], unbiased
    double eps = 1e-5;
    double momentum = 0.1;
    long steps = 0;

    static BatchNormParams make(std::size_t features);
};

// Joint normalization over the concatenation of all inputs along the
// sample axis (every axis except the last is a sample axis). Outputs are
// split back to the input shapes. Training mode uses batch statistics and
// updates the running ones; eval mode applies the running statistics.
std::vector<Tensor> shared_batch_norm(const std::vector<Tensor>& states, BatchNormParams& bn,
                                      bool training);

// Reverse-mode sweep from a scalar loss. Grads of visited nodes are reset
// first, so repeated calls on the same tape are reproducible.
void backward(const Tensor& loss);

}  // namespace iclm
