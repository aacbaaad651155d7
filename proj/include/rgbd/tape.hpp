#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "rgbd/tensor.hpp"

namespace rgbd {

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; only valid while the
// owning tape is alive.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const std::vector<int>& shape() const;
    size_t numel() const { return value().numel(); }
};

// Reverse-mode tape. Records primitive applications in topological order
// (inputs always precede outputs); backward replays them in reverse.
// Single-owner: record and backward happen on one logical thread. Recorded
// values are immutable.
class Tape {
public:
    using BackFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor t);

    // Records a primitive application. `inputs` are node ids on this tape;
    // `back` receives the output gradient and accumulates into the inputs.
    Var record(Tensor out, const std::vector<int>& inputs, BackFn back);

    const Tensor& value(int id) const;
    bool needs_grad(int id) const;
    int next_id() const { return static_cast<int>(nodes_.size()); }
    size_t node_count() const { return nodes_.size(); }
    const std::vector<int>& node_inputs(int id) const;

    // Seeds d(out)/d(out) = 1 and replays all records in reverse topological
    // order. `out` must be scalar. Gradients of untouched leaves are zero.
    void backward(Var out);

    // Gradient of the node; zeros(shape) if backward never reached it.
    Tensor grad(int id) const;
    Tensor grad(Var v) const { return grad(v.id); }

    void accumulate_grad(int id, const Tensor& g);

private:
    struct Node {
        Tensor value;
        std::vector<int> inputs;
        BackFn back;
        bool needs_grad = false;
    };
    // deque: recording more nodes never invalidates value() references
    std::deque<Node> nodes_;
    std::vector<Tensor> grads_;
};

// ---- primitive operations -------------------------------------------------

Var matmul(Var a, Var b);
Var conv1x1(Var f, Var w, Var bias);
Var conv3x3(Var f, Var w, Var bias, int stride, int pad);
Var relu(Var x);
Var sigmoid(Var x);
Var softmax_rows(Var m, double scale);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(Var x, int axis, int start, int len);
Var transpose2(Var x);
Var reshape(Var x, std::vector<int> shape);
Var global_avg_pool(Var f);
Var upsample_nearest2x(Var f);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
Var affine(Var x, double mul, double shift);
Var mul_channels(Var f, Var w);
Var sum_all(Var x);
Var mean_all(Var x);
Var softmax_xent(Var logits, std::vector<int> targets, std::vector<double> row_weights);
Var bce_with_logits(Var logits, Tensor targets);
Var emin_const(Var x, Tensor c);
Var emax_const(Var x, Tensor c);
Var l1_to_target(Var x, Tensor t);

// ---- compositions ----------------------------------------------------------

inline Var scale(Var x, double s) { return affine(x, s, 0.0); }
inline Var sub(Var a, Var b) { return add(a, affine(b, -1.0, 0.0)); }
// x: n x d, w: d x e, bias: e  ->  n x e
Var linear(Var x, Var w, Var bias);

// ---- value-level kernels (shared by forward and backward paths) ------------

// c (m x n) += a (m x k) * b (k x n); per-element accumulation is k-ascending.
void matmul_accum(const double* a, const double* b, double* c, int m, int k, int n);
Tensor mat_mul(const Tensor& a, const Tensor& b);
Tensor mat_transpose(const Tensor& a);

} // namespace rgbd
