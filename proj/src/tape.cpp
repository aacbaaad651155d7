#include "rgbd/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>

#include "rgbd/errors.hpp"

namespace rgbd {

const Tensor& Var::value() const { return tape->value(id); }
const std::vector<int>& Var::shape() const { return tape->value(id).shape; }

Var Tape::leaf(Tensor t) {
    bool rg = t.requires_grad;
    nodes_.push_back(Node{std::move(t), {}, nullptr, rg});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor out, const std::vector<int>& inputs, BackFn back) {
    int id = static_cast<int>(nodes_.size());
    bool rg = false;
    for (int in : inputs) {
        if (in < 0 || in >= id)
            throw ContractError("tape record: input id " + std::to_string(in) +
                                " out of order for node " + std::to_string(id));
        rg = rg || nodes_[in].needs_grad;
    }
    nodes_.push_back(Node{std::move(out), inputs, std::move(back), rg});
    return Var{this, id};
}

const Tensor& Tape::value(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
        throw ContractError("tape: invalid node id " + std::to_string(id));
    return nodes_[id].value;
}

bool Tape::needs_grad(int id) const { return nodes_.at(id).needs_grad; }

const std::vector<int>& Tape::node_inputs(int id) const { return nodes_.at(id).inputs; }

void Tape::accumulate_grad(int id, const Tensor& g) {
    if (!nodes_[id].needs_grad) return;
    Tensor& slot = grads_[id];
    if (slot.data.empty()) {
        slot = g;
        return;
    }
    if (slot.data.size() != g.data.size())
        throw DimensionError("gradient accumulation shape mismatch: " + slot.shape_str() +
                             " vs " + g.shape_str());
    for (size_t i = 0; i < g.data.size(); ++i) slot.data[i] += g.data[i];
}

void Tape::backward(Var out) {
    if (out.tape != this) throw ContractError("backward: var from a different tape");
    const Tensor& v = value(out.id);
    if (v.numel() != 1)
        throw ContractError("backward requires a scalar output, got shape " + v.shape_str());
    grads_.assign(nodes_.size(), Tensor{});
    if (!nodes_[out.id].needs_grad) return;
    grads_[out.id] = Tensor::full(v.shape, 1.0);
    for (int i = out.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.back || grads_[i].data.empty()) continue;
        n.back(*this, grads_[i]);
    }
}

Tensor Tape::grad(int id) const {
    const Tensor& v = value(id);
    if (id < static_cast<int>(grads_.size()) && !grads_[id].data.empty()) return grads_[id];
    return Tensor::zeros(v.shape);
}

// ---- helpers ----------------------------------------------------------------

namespace {

void check_same_tape(Var a, Var b, const char* op) {
    if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape)
        throw ContractError(std::string(op) + ": operands must live on one tape");
}

void check_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + t.shape_str());
}

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite())
        throw NumericError(std::string(op) + ": non-finite input");
}

} // namespace

void matmul_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    // ikj order: each c[i*n+j] accumulates a[i][t]*b[t][j] with t ascending,
    // matching the naive triple loop sum order exactly.
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int t = 0; t < k; ++t) {
            const double av = arow[t];
            const double* brow = b + static_cast<size_t>(t) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

Tensor mat_mul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw DimensionError("matmul: incompatible shapes " + a.shape_str() + " and " +
                             b.shape_str());
    Tensor c = Tensor::zeros({a.shape[0], b.shape[1]});
    matmul_accum(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1],
                 b.shape[1]);
    return c;
}

Tensor mat_transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + a.shape_str());
    const int r = a.shape[0], c = a.shape[1];
    Tensor t = Tensor::zeros({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) t.data[static_cast<size_t>(j) * r + i] = a.at(i, j);
    return t;
}

// ---- primitives ---------------------------------------------------------------

Var matmul(Var a, Var b) {
    check_same_tape(a, b, "matmul");
    Tensor out = mat_mul(a.value(), b.value());
    int aid = a.id, bid = b.id;
    return a.tape->record(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        if (t.needs_grad(aid)) t.accumulate_grad(aid, mat_mul(g, mat_transpose(bv)));
        if (t.needs_grad(bid)) t.accumulate_grad(bid, mat_mul(mat_transpose(av), g));
    });
}

Var conv1x1(Var f, Var w, Var bias) {
    check_same_tape(f, w, "conv1x1");
    check_same_tape(f, bias, "conv1x1");
    const Tensor& fv = f.value();
    const Tensor& wv = w.value();
    const Tensor& bv = bias.value();
    check_rank(fv, 2, "conv1x1 input");
    check_rank(wv, 2, "conv1x1 weight");
    check_rank(bv, 1, "conv1x1 bias");
    if (wv.shape[1] != fv.shape[0])
        throw DimensionError("conv1x1: weight " + wv.shape_str() + " does not match input " +
                             fv.shape_str());
    if (bv.shape[0] != wv.shape[0])
        throw DimensionError("conv1x1: bias " + bv.shape_str() + " does not match weight " +
                             wv.shape_str());
    Tensor out = mat_mul(wv, fv); // shared kernel: conv1x1 == matmul + bias
    const int co = out.shape[0], l = out.shape[1];
    for (int o = 0; o < co; ++o)
        for (int j = 0; j < l; ++j) out.data[static_cast<size_t>(o) * l + j] += bv.data[o];
    int fid = f.id, wid = w.id, bid = bias.id;
    return f.tape->record(std::move(out), {fid, wid, bid},
                          [fid, wid, bid](Tape& t, const Tensor& g) {
        const Tensor& fv2 = t.value(fid);
        const Tensor& wv2 = t.value(wid);
        if (t.needs_grad(wid)) t.accumulate_grad(wid, mat_mul(g, mat_transpose(fv2)));
        if (t.needs_grad(fid)) t.accumulate_grad(fid, mat_mul(mat_transpose(wv2), g));
        if (t.needs_grad(bid)) {
            Tensor db = Tensor::zeros({g.shape[0]});
            for (int o = 0; o < g.shape[0]; ++o)
                for (int j = 0; j < g.shape[1]; ++j)
                    db.data[o] += g.data[static_cast<size_t>(o) * g.shape[1] + j];
            t.accumulate_grad(bid, db);
        }
    });
}

namespace {

// Unrolls 3x3 patches of f (C x H x W) into P ((C*9) x (Ho*Wo)), zero padding.
Tensor im2col3x3(const Tensor& f, int stride, int pad, int ho, int wo) {
    const int c = f.shape[0], h = f.shape[1], w = f.shape[2];
    Tensor p = Tensor::zeros({c * 9, ho * wo});
    const int l = ho * wo;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                double* prow = p.data.data() + static_cast<size_t>((ch * 9 + ky * 3 + kx)) * l;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    const double* frow =
                        f.data.data() + (static_cast<size_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) prow[oy * wo + ox] = frow[ix];
                    }
                }
            }
    return p;
}

// Scatter-adds dP back into df, the adjoint of im2col3x3.
void col2im3x3(const Tensor& dp, int stride, int pad, int ho, int wo, Tensor& df) {
    const int c = df.shape[0], h = df.shape[1], w = df.shape[2];
    const int l = ho * wo;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const double* prow =
                    dp.data.data() + static_cast<size_t>((ch * 9 + ky * 3 + kx)) * l;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    double* frow = df.data.data() + (static_cast<size_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) frow[ix] += prow[oy * wo + ox];
                    }
                }
            }
}

} // namespace

Var conv3x3(Var f, Var w, Var bias, int stride, int pad) {
    check_same_tape(f, w, "conv3x3");
    check_same_tape(f, bias, "conv3x3");
    const Tensor& fv = f.value();
    const Tensor& wv = w.value();
    const Tensor& bv = bias.value();
    check_rank(fv, 3, "conv3x3 input");
    check_rank(bv, 1, "conv3x3 bias");
    if (wv.rank() != 4 || wv.shape[2] != 3 || wv.shape[3] != 3)
        throw DimensionError("conv3x3: weight must be [out,in,3,3], got " + wv.shape_str());
    if (wv.shape[1] != fv.shape[0])
        throw DimensionError("conv3x3: weight " + wv.shape_str() + " does not match input " +
                             fv.shape_str());
    if (bv.shape[0] != wv.shape[0])
        throw DimensionError("conv3x3: bias " + bv.shape_str() + " does not match weight " +
                             wv.shape_str());
    if (stride < 1 || pad < 0) throw ContractError("conv3x3: stride must be >=1 and pad >=0");
    const int h = fv.shape[1], wdt = fv.shape[2];
    const int ho = (h + 2 * pad - 3) / stride + 1;
    const int wo = (wdt + 2 * pad - 3) / stride + 1;
    if (h + 2 * pad < 3 || wdt + 2 * pad < 3)
        throw DimensionError("conv3x3: input " + fv.shape_str() + " smaller than kernel");
    const int cin = fv.shape[0], cout = wv.shape[0];

    Tensor patches = im2col3x3(fv, stride, pad, ho, wo);
    Tensor wflat(std::vector<int>{cout, cin * 9}, wv.data);
    Tensor flat = mat_mul(wflat, patches);
    const int l = ho * wo;
    for (int o = 0; o < cout; ++o)
        for (int j = 0; j < l; ++j) flat.data[static_cast<size_t>(o) * l + j] += bv.data[o];
    Tensor out(std::vector<int>{cout, ho, wo}, std::move(flat.data));

    int fid = f.id, wid = w.id, bid = bias.id;
    auto cache = std::make_shared<Tensor>(std::move(patches));
    return f.tape->record(
        std::move(out), {fid, wid, bid},
        [fid, wid, bid, stride, pad, ho, wo, cin, cout, l, cache](Tape& t, const Tensor& g) {
            Tensor gflat(std::vector<int>{cout, l}, g.data);
            if (t.needs_grad(wid)) {
                Tensor dwflat = mat_mul(gflat, mat_transpose(*cache));
                t.accumulate_grad(wid,
                                  Tensor(std::vector<int>{cout, cin, 3, 3},
                                         std::move(dwflat.data)));
            }
            if (t.needs_grad(fid)) {
                const Tensor& wv2 = t.value(wid);
                Tensor wflat2(std::vector<int>{cout, cin * 9}, wv2.data);
                Tensor dp = mat_mul(mat_transpose(wflat2), gflat);
                Tensor df = Tensor::zeros(t.value(fid).shape);
                col2im3x3(dp, stride, pad, ho, wo, df);
                t.accumulate_grad(fid, df);
            }
            if (t.needs_grad(bid)) {
                Tensor db = Tensor::zeros({cout});
                for (int o = 0; o < cout; ++o)
                    for (int j = 0; j < l; ++j)
                        db.data[o] += g.data[static_cast<size_t>(o) * l + j];
                t.accumulate_grad(bid, db);
            }
        });
}

Var relu(Var x) {
    Tensor out = x.value();
    // NaN passes through so upstream numeric faults stay visible
    for (double& v : out.data) v = v > 0.0 || std::isnan(v) ? v : 0.0;
    int xid = x.id;
    return x.tape->record(std::move(out), {xid}, [xid](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(xid);
        Tensor dx = Tensor::zeros(xv.shape);
        for (size_t i = 0; i < xv.data.size(); ++i)
            dx.data[i] = xv.data[i] > 0.0 ? g.data[i] : 0.0;
        t.accumulate_grad(xid, dx);
    });
}

Var sigmoid(Var x) {
    Tensor out = x.value();
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    int xid = x.id;
    int oid = x.tape->next_id();
    return x.tape->record(std::move(out), {xid}, [xid, oid](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(oid);
        Tensor dx = Tensor::zeros(y.shape);
        for (size_t i = 0; i < y.data.size(); ++i)
            dx.data[i] = g.data[i] * y.data[i] * (1.0 - y.data[i]);
        t.accumulate_grad(xid, dx);
    });
}

Var softmax_rows(Var m, double scale) {
    const Tensor& mv = m.value();
    check_rank(mv, 2, "softmax_rows");
    check_finite(mv, "softmax_rows");
    if (!(scale > 0.0)) throw ContractError("softmax_rows: scale must be positive");
    const int r = mv.shape[0], c = mv.shape[1];
    Tensor out = Tensor::zeros({r, c});
    for (int i = 0; i < r; ++i) {
        const double* row = mv.data.data() + static_cast<size_t>(i) * c;
        double mx = row[0] * scale;
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j] * scale);
        double sum = 0.0;
        double* orow = out.data.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] * scale - mx);
            sum += orow[j];
        }
        for (int j = 0; j < c; ++j) orow[j] /= sum;
    }
    int mid = m.id;
    int oid = m.tape->next_id();
    return m.tape->record(std::move(out), {mid}, [mid, oid, scale](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(oid);
        const int r2 = y.shape[0], c2 = y.shape[1];
        Tensor dm = Tensor::zeros(y.shape);
        for (int i = 0; i < r2; ++i) {
            const double* yrow = y.data.data() + static_cast<size_t>(i) * c2;
            const double* grow = g.data.data() + static_cast<size_t>(i) * c2;
            double dot = 0.0;
            for (int j = 0; j < c2; ++j) dot += grow[j] * yrow[j];
            double* drow = dm.data.data() + static_cast<size_t>(i) * c2;
            for (int j = 0; j < c2; ++j) drow[j] = scale * yrow[j] * (grow[j] - dot);
        }
        t.accumulate_grad(mid, dm);
    });
}

namespace {

// outer/inner extents around `axis` for block copies.
void axis_extents(const std::vector<int>& shape, int axis, int& outer, int& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) inner *= shape[i];
}

} // namespace

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw ContractError("concat: no inputs");
    Tape* tape = xs[0].tape;
    const int rank = xs[0].value().rank();
    if (axis < 0 || axis >= rank)
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    int total = 0;
    for (const Var& x : xs) {
        check_same_tape(xs[0], x, "concat");
        const Tensor& v = x.value();
        if (v.rank() != rank)
            throw DimensionError("concat: rank mismatch " + v.shape_str() + " vs " +
                                 xs[0].value().shape_str());
        for (int d = 0; d < rank; ++d)
            if (d != axis && v.shape[d] != xs[0].value().shape[d])
                throw DimensionError("concat: shape mismatch " + v.shape_str() + " vs " +
                                     xs[0].value().shape_str());
        total += v.shape[axis];
    }
    std::vector<int> oshape = xs[0].value().shape;
    oshape[axis] = total;
    Tensor out = Tensor::zeros(oshape);
    int outer, inner;
    axis_extents(oshape, axis, outer, inner);
    std::vector<int> ids;
    std::vector<int> extents;
    size_t off = 0;
    for (const Var& x : xs) {
        ids.push_back(x.id);
        extents.push_back(x.value().shape[axis]);
    }
    for (int o = 0; o < outer; ++o) {
        for (const Var& x : xs) {
            const Tensor& v = x.value();
            const size_t block = static_cast<size_t>(v.shape[axis]) * inner;
            std::copy_n(v.data.data() + static_cast<size_t>(o) * block, block,
                        out.data.data() + off);
            off += block;
        }
    }
    return tape->record(std::move(out), ids,
                        [ids, extents, outer, inner](Tape& t, const Tensor& g) {
        std::vector<Tensor> parts;
        parts.reserve(ids.size());
        std::vector<size_t> blocks;
        for (size_t k = 0; k < ids.size(); ++k) {
            parts.push_back(Tensor::zeros(t.value(ids[k]).shape));
            blocks.push_back(static_cast<size_t>(extents[k]) * inner);
        }
        size_t off2 = 0;
        for (int o = 0; o < outer; ++o)
            for (size_t k = 0; k < ids.size(); ++k) {
                std::copy_n(g.data.data() + off2, blocks[k],
                            parts[k].data.data() + static_cast<size_t>(o) * blocks[k]);
                off2 += blocks[k];
            }
        for (size_t k = 0; k < ids.size(); ++k)
            if (t.needs_grad(ids[k])) t.accumulate_grad(ids[k], parts[k]);
    });
}

Var slice(Var x, int axis, int start, int len) {
    const Tensor& v = x.value();
    const int rank = v.rank();
    if (axis < 0 || axis >= rank)
        throw DimensionError("slice: axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    if (start < 0 || len <= 0 || start + len > v.shape[axis])
        throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") exceeds extent " +
                             std::to_string(v.shape[axis]));
    std::vector<int> oshape = v.shape;
    oshape[axis] = len;
    Tensor out = Tensor::zeros(oshape);
    int outer, inner;
    axis_extents(v.shape, axis, outer, inner);
    const size_t src_block = static_cast<size_t>(v.shape[axis]) * inner;
    const size_t dst_block = static_cast<size_t>(len) * inner;
    for (int o = 0; o < outer; ++o)
        std::copy_n(v.data.data() + o * src_block + static_cast<size_t>(start) * inner,
                    dst_block, out.data.data() + o * dst_block);
    int xid = x.id;
    return x.tape->record(std::move(out), {xid},
                          [xid, start, inner, outer, src_block, dst_block](Tape& t,
                                                                            const Tensor& g) {
        Tensor dx = Tensor::zeros(t.value(xid).shape);
        for (int o = 0; o < outer; ++o)
            std::copy_n(g.data.data() + o * dst_block, dst_block,
                        dx.data.data() + o * src_block + static_cast<size_t>(start) * inner);
        t.accumulate_grad(xid, dx);
    });
}

Var transpose2(Var x) {
    Tensor out = mat_transpose(x.value());
    int xid = x.id;
    return x.tape->record(std::move(out), {xid}, [xid](Tape& t, const Tensor& g) {
        t.accumulate_grad(xid, mat_transpose(g));
    });
}

Var reshape(Var x, std::vector<int> shape) {
    const Tensor& v = x.value();
    if (shape_numel(shape) != v.numel())
        throw DimensionError("reshape: cannot view " + v.shape_str() + " as " +
                             shape_to_string(shape));
    Tensor out(shape, v.data);
    int xid = x.id;
    return x.tape->record(std::move(out), {xid}, [xid](Tape& t, const Tensor& g) {
        t.accumulate_grad(xid, Tensor(t.value(xid).shape, g.data));
    });
}

Var global_avg_pool(Var f) {
    const Tensor& v = f.value();
    check_rank(v, 2, "global_avg_pool");
    const int c = v.shape[0], l = v.shape[1];
    if (l < 1) throw DimensionError("global_avg_pool: empty input");
    Tensor out = Tensor::zeros({c});
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int j = 0; j < l; ++j) s += v.data[static_cast<size_t>(ch) * l + j];
        out.data[ch] = s / l;
    }
    int fid = f.id;
    return f.tape->record(std::move(out), {fid}, [fid, c, l](Tape& t, const Tensor& g) {
        Tensor df = Tensor::zeros(t.value(fid).shape);
        for (int ch = 0; ch < c; ++ch) {
            const double gv = g.data[ch] / l;
            for (int j = 0; j < l; ++j) df.data[static_cast<size_t>(ch) * l + j] = gv;
        }
        t.accumulate_grad(fid, df);
    });
}

Var upsample_nearest2x(Var f) {
    const Tensor& v = f.value();
    check_rank(v, 3, "upsample_nearest2x");
    const int c = v.shape[0], h = v.shape[1], w = v.shape[2];
    Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int x = 0; x < 2 * w; ++x)
                out.data[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + x] =
                    v.data[(static_cast<size_t>(ch) * h + y / 2) * w + x / 2];
    int fid = f.id;
    return f.tape->record(std::move(out), {fid}, [fid, c, h, w](Tape& t, const Tensor& g) {
        Tensor df = Tensor::zeros(t.value(fid).shape);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int x = 0; x < 2 * w; ++x)
                    df.data[(static_cast<size_t>(ch) * h + y / 2) * w + x / 2] +=
                        g.data[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + x];
        t.accumulate_grad(fid, df);
    });
}

Var add(Var a, Var b) {
    check_same_tape(a, b, "add");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        throw DimensionError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    int aid = a.id, bid = b.id;
    return a.tape->record(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Tensor& g) {
        t.accumulate_grad(aid, g);
        t.accumulate_grad(bid, g);
    });
}

Var mul(Var a, Var b) {
    check_same_tape(a, b, "mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        throw DimensionError("mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    int aid = a.id, bid = b.id;
    return a.tape->record(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Tensor& g) {
        const Tensor& av2 = t.value(aid);
        const Tensor& bv2 = t.value(bid);
        if (t.needs_grad(aid)) {
            Tensor da = g;
            for (size_t i = 0; i < da.data.size(); ++i) da.data[i] *= bv2.data[i];
            t.accumulate_grad(aid, da);
        }
        if (t.needs_grad(bid)) {
            Tensor db = g;
            for (size_t i = 0; i < db.data.size(); ++i) db.data[i] *= av2.data[i];
            t.accumulate_grad(bid, db);
        }
    });
}

Var divide(Var a, Var b) {
    check_same_tape(a, b, "divide");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        throw DimensionError("divide: shape mismatch " + av.shape_str() + " vs " +
                             bv.shape_str());
    for (double d : bv.data)
        if (d == 0.0) throw NumericError("divide: zero denominator");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= bv.data[i];
    int aid = a.id, bid = b.id;
    return a.tape->record(std::move(out), {aid, bid}, [aid, bid](Tape& t, const Tensor& g) {
        const Tensor& av2 = t.value(aid);
        const Tensor& bv2 = t.value(bid);
        if (t.needs_grad(aid)) {
            Tensor da = g;
            for (size_t i = 0; i < da.data.size(); ++i) da.data[i] /= bv2.data[i];
            t.accumulate_grad(aid, da);
        }
        if (t.needs_grad(bid)) {
            Tensor db = g;
            for (size_t i = 0; i < db.data.size(); ++i)
                db.data[i] *= -av2.data[i] / (bv2.data[i] * bv2.data[i]);
            t.accumulate_grad(bid, db);
        }
    });
}

Var affine(Var x, double mul_, double shift) {
    Tensor out = x.value();
    for (double& v : out.data) v = mul_ * v + shift;
    int xid = x.id;
    return x.tape->record(std::move(out), {xid}, [xid, mul_](Tape& t, const Tensor& g) {
        Tensor dx = g;
        for (double& v : dx.data) v *= mul_;
        t.accumulate_grad(xid, dx);
    });
}

Var mul_channels(Var f, Var w) {
    check_same_tape(f, w, "mul_channels");
    const Tensor& fv = f.value();
    const Tensor& wv = w.value();
    check_rank(fv, 2, "mul_channels input");
    check_rank(wv, 1, "mul_channels weights");
    if (wv.shape[0] != fv.shape[0])
        throw DimensionError("mul_channels: weights " + wv.shape_str() +
                             " do not match input " + fv.shape_str());
    const int c = fv.shape[0], l = fv.shape[1];
    Tensor out = fv;
    for (int ch = 0; ch < c; ++ch)
        for (int j = 0; j < l; ++j) out.data[static_cast<size_t>(ch) * l + j] *= wv.data[ch];
    int fid = f.id, wid = w.id;
    return f.tape->record(std::move(out), {fid, wid},
                          [fid, wid, c, l](Tape& t, const Tensor& g) {
        const Tensor& fv2 = t.value(fid);
        const Tensor& wv2 = t.value(wid);
        if (t.needs_grad(fid)) {
            Tensor df = g;
            for (int ch = 0; ch < c; ++ch)
                for (int j = 0; j < l; ++j)
                    df.data[static_cast<size_t>(ch) * l + j] *= wv2.data[ch];
            t.accumulate_grad(fid, df);
        }
        if (t.needs_grad(wid)) {
            Tensor dw = Tensor::zeros({c});
            for (int ch = 0; ch < c; ++ch)
                for (int j = 0; j < l; ++j)
                    dw.data[ch] += g.data[static_cast<size_t>(ch) * l + j] *
                                   fv2.data[static_cast<size_t>(ch) * l + j];
            t.accumulate_grad(wid, dw);
        }
    });
}

Var sum_all(Var x) {
    double s = 0.0;
    for (double v : x.value().data) s += v;
    int xid = x.id;
    return x.tape->record(Tensor(std::vector<int>{1}, {s}), {xid},
                          [xid](Tape& t, const Tensor& g) {
        t.accumulate_grad(xid, Tensor::full(t.value(xid).shape, g.data[0]));
    });
}

Var mean_all(Var x) {
    const size_t n = x.value().numel();
    double s = 0.0;
    for (double v : x.value().data) s += v;
    int xid = x.id;
    return x.tape->record(Tensor(std::vector<int>{1}, {s / static_cast<double>(n)}), {xid},
                          [xid, n](Tape& t, const Tensor& g) {
        t.accumulate_grad(xid,
                          Tensor::full(t.value(xid).shape, g.data[0] / static_cast<double>(n)));
    });
}

Var softmax_xent(Var logits, std::vector<int> targets, std::vector<double> row_weights) {
    const Tensor& lv = logits.value();
    check_rank(lv, 2, "softmax_xent");
    const int n = lv.shape[0], k = lv.shape[1];
    if (static_cast<int>(targets.size()) != n || static_cast<int>(row_weights.size()) != n)
        throw DimensionError("softmax_xent: expected " + std::to_string(n) +
                             " targets and weights");
    double wsum = 0.0;
    for (int i = 0; i < n; ++i) {
        if (targets[i] < 0 || targets[i] >= k)
            throw ContractError("softmax_xent: target " + std::to_string(targets[i]) +
                                " outside [0, " + std::to_string(k) + ")");
        if (row_weights[i] < 0.0) throw ContractError("softmax_xent: negative row weight");
        wsum += row_weights[i];
    }
    if (wsum <= 0.0) throw ContractError("softmax_xent: weights sum to zero");

    // probs cached for backward
    auto probs = std::make_shared<Tensor>(Tensor::zeros({n, k}));
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = lv.data.data() + static_cast<size_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        loss += row_weights[i] * (lse - row[targets[i]]);
        double* prow = probs->data.data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) prow[j] = std::exp(row[j] - lse);
    }
    loss /= wsum;
    int lid = logits.id;
    return logits.tape->record(
        Tensor(std::vector<int>{1}, {loss}), {lid},
        [lid, targets = std::move(targets), row_weights = std::move(row_weights), wsum, probs,
         n, k](Tape& t, const Tensor& g) {
            Tensor dl = Tensor::zeros({n, k});
            for (int i = 0; i < n; ++i) {
                const double c = g.data[0] * row_weights[i] / wsum;
                const double* prow = probs->data.data() + static_cast<size_t>(i) * k;
                double* drow = dl.data.data() + static_cast<size_t>(i) * k;
                for (int j = 0; j < k; ++j)
                    drow[j] = c * (prow[j] - (j == targets[i] ? 1.0 : 0.0));
            }
            t.accumulate_grad(lid, dl);
        });
}

Var bce_with_logits(Var logits, Tensor targets) {
    const Tensor& lv = logits.value();
    if (!lv.same_shape(targets))
        throw DimensionError("bce_with_logits: shape mismatch " + lv.shape_str() + " vs " +
                             targets.shape_str());
    for (double tv : targets.data)
        if (tv < 0.0 || tv > 1.0)
            throw ContractError("bce_with_logits: targets must lie in [0, 1]");
    const size_t n = lv.numel();
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double x = lv.data[i], tv = targets.data[i];
        // max(x,0) - x*t + log(1 + exp(-|x|)): stable for large |x|
        loss += std::max(x, 0.0) - x * tv + std::log1p(std::exp(-std::abs(x)));
    }
    loss /= static_cast<double>(n);
    int lid = logits.id;
    auto tgt = std::make_shared<Tensor>(std::move(targets));
    return logits.tape->record(Tensor(std::vector<int>{1}, {loss}), {lid},
                               [lid, tgt, n](Tape& t, const Tensor& g) {
        const Tensor& lv2 = t.value(lid);
        Tensor dx = Tensor::zeros(lv2.shape);
        const double c = g.data[0] / static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
            const double s = 1.0 / (1.0 + std::exp(-lv2.data[i]));
            dx.data[i] = c * (s - tgt->data[i]);
        }
        t.accumulate_grad(lid, dx);
    });
}

namespace {

Var eminmax_const(Var x, Tensor c, bool take_min) {
    const Tensor& xv = x.value();
    if (!xv.same_shape(c))
        throw DimensionError("elementwise min/max: shape mismatch " + xv.shape_str() + " vs " +
                             c.shape_str());
    Tensor out = xv;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = take_min ? std::min(out.data[i], c.data[i])
                               : std::max(out.data[i], c.data[i]);
    int xid = x.id;
    auto cp = std::make_shared<Tensor>(std::move(c));
    return x.tape->record(std::move(out), {xid},
                          [xid, cp, take_min](Tape& t, const Tensor& g) {
        const Tensor& xv2 = t.value(xid);
        Tensor dx = Tensor::zeros(xv2.shape);
        for (size_t i = 0; i < dx.data.size(); ++i) {
            // subgradient: ties route to x
            const bool x_wins = take_min ? xv2.data[i] <= cp->data[i]
                                         : xv2.data[i] >= cp->data[i];
            dx.data[i] = x_wins ? g.data[i] : 0.0;
        }
        t.accumulate_grad(xid, dx);
    });
}

} // namespace

Var emin_const(Var x, Tensor c) { return eminmax_const(x, std::move(c), true); }
Var emax_const(Var x, Tensor c) { return eminmax_const(x, std::move(c), false); }

Var l1_to_target(Var x, Tensor t) {
    const Tensor& xv = x.value();
    if (!xv.same_shape(t))
        throw DimensionError("l1_to_target: shape mismatch " + xv.shape_str() + " vs " +
                             t.shape_str());
    double s = 0.0;
    for (size_t i = 0; i < xv.data.size(); ++i) s += std::abs(xv.data[i] - t.data[i]);
    int xid = x.id;
    auto tgt = std::make_shared<Tensor>(std::move(t));
    return x.tape->record(Tensor(std::vector<int>{1}, {s}), {xid},
                          [xid, tgt](Tape& tp, const Tensor& g) {
        const Tensor& xv2 = tp.value(xid);
        Tensor dx = Tensor::zeros(xv2.shape);
        for (size_t i = 0; i < dx.data.size(); ++i) {
            const double d = xv2.data[i] - tgt->data[i];
            dx.data[i] = d > 0.0 ? g.data[0] : (d < 0.0 ? -g.data[0] : 0.0);
        }
        tp.accumulate_grad(xid, dx);
    });
}

Var linear(Var x, Var w, Var bias) {
    // x: n x d, w: d x e -> n x e with bias per output column
    Var xt = transpose2(x);               // d x n
    Var wt = transpose2(w);               // e x d
    Var out = conv1x1(xt, wt, bias);      // e x n
    return transpose2(out);               // n x e
}

} // namespace rgbd
