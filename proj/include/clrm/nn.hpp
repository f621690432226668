#pragma once

// Small tensor engine with tape-based reverse-mode differentiation, sized for
// the CNN-RNN proxy: dense, 3D convolution, batch normalization, max pooling,
// LSTM building blocks and an Adam optimizer. All arithmetic is float64 with a
// fixed, sequential reduction order.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "clrm/common.hpp"

namespace clrm::nn {

inline std::size_t numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + ")";
}

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;  // row-major

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        CLRM_REQUIRE(data.size() == numel(shape), ShapeError,
                     "tensor data size " << data.size() << " does not match shape " << shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[i < 0 ? shape.size() + i : i]; }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline MatMap as_matrix(Tensor& t, int rows, int cols) { return MatMap(t.data.data(), rows, cols); }
inline ConstMatMap as_matrix(const Tensor& t, int rows, int cols) { return ConstMatMap(t.data.data(), rows, cols); }

// ---------------------------------------------------------------------------
// Parameters and buffers
// ---------------------------------------------------------------------------

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

struct Buffer {
    std::string name;
    Tensor value;
};

class ParameterStore {
public:
    int add(const std::string& name, std::vector<int> shape) {
        CLRM_REQUIRE(find(name) < 0, ConfigError, "duplicate parameter " << name);
        params_.push_back({name, Tensor(shape), Tensor(shape)});
        return static_cast<int>(params_.size()) - 1;
    }
    int add_buffer(const std::string& name, std::vector<int> shape, double fill) {
        buffers_.push_back({name, Tensor(std::move(shape), fill)});
        return static_cast<int>(buffers_.size()) - 1;
    }

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return static_cast<int>(i);
        return -1;
    }

    Parameter& operator[](int i) { return params_[i]; }
    const Parameter& operator[](int i) const { return params_[i]; }
    Buffer& buffer(int i) { return buffers_[i]; }
    const Buffer& buffer(int i) const { return buffers_[i]; }
    int size() const { return static_cast<int>(params_.size()); }
    int buffer_count() const { return static_cast<int>(buffers_.size()); }
    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }
    std::vector<Buffer>& buffers() { return buffers_; }
    const std::vector<Buffer>& buffers() const { return buffers_; }

    std::size_t total_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }
    void zero_grad() {
        for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
    }

private:
    std::vector<Parameter> params_;
    std::vector<Buffer> buffers_;
};

// Glorot-uniform fill with limit sqrt(6 / (fan_in + fan_out)).
inline void glorot_uniform(Tensor& t, double fan_in, double fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t.data) v = (2.0 * uniform01(rng) - 1.0) * limit;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct Var {
    int id = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, int self)>;

    explicit Tape(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    Var constant(Tensor v) { return emplace(std::move(v), nullptr, false); }

    Var param(ParameterStore& store, int index) {
        Var v = emplace(store[index].value, nullptr, record_);
        nodes_[v.id].store = &store;
        nodes_[v.id].param_index = index;
        return v;
    }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    Tensor& value_mut(Var v) { return nodes_[v.id].value; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

    // Gradient slot of a node, allocated on first use.
    Tensor& grad(int id) {
        auto& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }
    const Tensor& value(int id) const { return nodes_[id].value; }

    // Appends an op result; it needs a gradient if any input does.
    Var push(Tensor value, const std::vector<int>& inputs, Backward back) {
        bool ng = false;
        for (int i : inputs) ng = ng || nodes_[i].needs_grad;
        return emplace(std::move(value), std::move(back), record_ && ng);
    }

    // Reverse sweep from a scalar node; parameter gradients are accumulated
    // into their stores.
    void backward(Var loss) {
        CLRM_REQUIRE(record_, ConfigError, "backward on a tape recorded without gradients");
        CLRM_REQUIRE(value(loss).size() == 1, ShapeError,
                     "backward needs a scalar loss, got " << shape_str(value(loss).shape));
        grad(loss.id).data[0] = 1.0;
        for (int id = loss.id; id >= 0; --id) {
            auto& n = nodes_[id];
            if (!n.needs_grad || n.grad.data.empty()) continue;
            if (n.back) n.back(*this, id);
            if (n.store) {
                auto& g = (*n.store)[n.param_index].grad.data;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
            }
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        Backward back;
        bool needs_grad = false;
        ParameterStore* store = nullptr;
        int param_index = -1;
    };

    Var emplace(Tensor value, Backward back, bool needs_grad) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    bool record_;
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and dense ops
// ---------------------------------------------------------------------------

inline Var add(Tape& tp, Var a, Var b) {
    const auto& va = tp.value(a);
    const auto& vb = tp.value(b);
    CLRM_REQUIRE(va.shape == vb.shape, ShapeError, "add: " << shape_str(va.shape) << " vs " << shape_str(vb.shape));
    Tensor out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return tp.push(std::move(out), {a.id, b.id}, [a, b](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        for (Var v : {a, b})
            if (t.needs_grad(v)) {
                auto& gv = t.grad(v.id).data;
                for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
            }
    });
}

inline Var mul(Tape& tp, Var a, Var b) {
    const auto& va = tp.value(a);
    const auto& vb = tp.value(b);
    CLRM_REQUIRE(va.shape == vb.shape, ShapeError, "mul: " << shape_str(va.shape) << " vs " << shape_str(vb.shape));
    Tensor out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return tp.push(std::move(out), {a.id, b.id}, [a, b](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        if (t.needs_grad(a)) {
            auto& ga = t.grad(a.id).data;
            const auto& vb = t.value(b).data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.needs_grad(b)) {
            auto& gb = t.grad(b.id).data;
            const auto& va = t.value(a).data;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

namespace detail {

template <class F, class DF>
Var unary(Tape& tp, Var x, F f, DF df_from_output) {
    Tensor out = tp.value(x);
    for (auto& v : out.data) v = f(v);
    return tp.push(std::move(out), {x.id}, [x, df_from_output](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& y = t.value(self).data;
        const auto& xv = t.value(x).data;
        auto& gx = t.grad(x.id).data;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df_from_output(y[i], xv[i]);
    });
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace detail

inline Var sigmoid(Tape& tp, Var x) {
    return detail::unary(tp, x, detail::sigmoid, [](double y, double) { return y * (1.0 - y); });
}

inline Var relu(Tape& tp, Var x) {
    return detail::unary(tp, x, [](double v) { return v > 0 ? v : 0.0; }, [](double, double v) { return v > 0 ? 1.0 : 0.0; });
}

inline Var tanh(Tape& tp, Var x) {
    return detail::unary(tp, x, [](double v) { return std::tanh(v); }, [](double y, double) { return 1.0 - y * y; });
}

// (M,K) x (K,N) -> (M,N)
inline Var matmul(Tape& tp, Var a, Var b) {
    const auto& va = tp.value(a);
    const auto& vb = tp.value(b);
    CLRM_REQUIRE(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0), ShapeError,
                 "matmul: " << shape_str(va.shape) << " x " << shape_str(vb.shape));
    const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor out({m, n});
    as_matrix(out, m, n).noalias() = as_matrix(va, m, k) * as_matrix(vb, k, n);
    return tp.push(std::move(out), {a.id, b.id}, [a, b, m, k, n](Tape& t, int self) {
        const auto g = as_matrix(t.grad(self), m, n);
        if (t.needs_grad(a)) as_matrix(t.grad(a.id), m, k).noalias() += g * as_matrix(t.value(b), k, n).transpose();
        if (t.needs_grad(b)) as_matrix(t.grad(b.id), k, n).noalias() += as_matrix(t.value(a), m, k).transpose() * g;
    });
}

// Adds a per-channel bias along the last dimension.
inline Var add_bias(Tape& tp, Var x, Var b) {
    const auto& vx = tp.value(x);
    const auto& vb = tp.value(b);
    const int c = vx.dim(-1);
    CLRM_REQUIRE(vb.rank() == 1 && vb.dim(0) == c, ShapeError,
                 "add_bias: " << shape_str(vx.shape) << " + " << shape_str(vb.shape));
    Tensor out = vx;
    const std::size_t rows = out.size() / c;
    for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) out[r * c + j] += vb[j];
    return tp.push(std::move(out), {x.id, b.id}, [x, b, c, rows](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        if (t.needs_grad(x)) {
            auto& gx = t.grad(x.id).data;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.needs_grad(b)) {
            auto& gb = t.grad(b.id).data;
            for (std::size_t r = 0; r < rows; ++r)
                for (int j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
    });
}

// x (B,K) W (K,N) b (N): x W + b.
inline Var dense(Tape& tp, Var x, Var w, Var b) { return add_bias(tp, matmul(tp, x, w), b); }

// Multiplies the last dimension by fixed per-channel factors.
inline Var scale_last(Tape& tp, Var x, const std::vector<double>& s) {
    const auto& vx = tp.value(x);
    const int c = vx.dim(-1);
    CLRM_REQUIRE(static_cast<int>(s.size()) == c, ShapeError, "scale_last: " << s.size() << " factors for " << c);
    Tensor out = vx;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s[i % c];
    return tp.push(std::move(out), {x.id}, [x, s, c](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        auto& gx = t.grad(x.id).data;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i % c];
    });
}

// Columns [start, start+count) of a (M,N) tensor.
inline Var slice_cols(Tape& tp, Var x, int start, int count) {
    const auto& vx = tp.value(x);
    CLRM_REQUIRE(vx.rank() == 2 && start >= 0 && start + count <= vx.dim(1), ShapeError,
                 "slice_cols: [" << start << "," << start + count << ") of " << shape_str(vx.shape));
    const int m = vx.dim(0), n = vx.dim(1);
    Tensor out({m, count});
    for (int r = 0; r < m; ++r)
        for (int j = 0; j < count; ++j) out[static_cast<std::size_t>(r) * count + j] = vx[static_cast<std::size_t>(r) * n + start + j];
    return tp.push(std::move(out), {x.id}, [x, m, n, start, count](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        auto& gx = t.grad(x.id).data;
        for (int r = 0; r < m; ++r)
            for (int j = 0; j < count; ++j)
                gx[static_cast<std::size_t>(r) * n + start + j] += g[static_cast<std::size_t>(r) * count + j];
    });
}

inline Var reshape(Tape& tp, Var x, std::vector<int> shape) {
    Tensor out = tp.value(x);
    CLRM_REQUIRE(numel(shape) == out.size(), ShapeError,
                 "reshape " << shape_str(out.shape) << " -> " << shape_str(shape));
    out.shape = std::move(shape);
    return tp.push(std::move(out), {x.id}, [x](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        auto& gx = t.grad(x.id).data;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

// Stacks T tensors of shape (B,N) into (B,T,N).
inline Var stack_time(Tape& tp, const std::vector<Var>& xs) {
    CLRM_REQUIRE(!xs.empty(), ShapeError, "stack_time of nothing");
    const auto s0 = tp.value(xs[0]).shape;
    CLRM_REQUIRE(s0.size() == 2, ShapeError, "stack_time needs (B,N) inputs");
    const int b = s0[0], n = s0[1], tn = static_cast<int>(xs.size());
    Tensor out({b, tn, n});
    std::vector<int> ids;
    for (int t = 0; t < tn; ++t) {
        const auto& v = tp.value(xs[t]);
        CLRM_REQUIRE(v.shape == s0, ShapeError, "stack_time: mixed shapes");
        for (int r = 0; r < b; ++r)
            std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(r) * n, n,
                        out.data.begin() + (static_cast<std::ptrdiff_t>(r) * tn + t) * n);
        ids.push_back(xs[t].id);
    }
    return tp.push(std::move(out), ids, [ids, b, n, tn](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        for (int s = 0; s < tn; ++s) {
            if (!t.needs_grad(ids[s])) continue;
            auto& gx = t.grad(ids[s]).data;
            for (int r = 0; r < b; ++r)
                for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(r) * n + j] += g[(static_cast<std::size_t>(r) * tn + s) * n + j];
        }
    });
}

// Row r of the result is row idx[r] of x (M,N); gradients scatter-add back.
inline Var gather_rows(Tape& tp, Var x, const std::vector<int>& idx) {
    const auto& vx = tp.value(x);
    CLRM_REQUIRE(vx.rank() == 2, ShapeError, "gather_rows needs a matrix");
    const int m = vx.dim(0), n = vx.dim(1);
    Tensor out({static_cast<int>(idx.size()), n});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        CLRM_REQUIRE(idx[r] >= 0 && idx[r] < m, ShapeError, "gather_rows index " << idx[r] << " out of range");
        std::copy_n(vx.data.begin() + static_cast<std::ptrdiff_t>(idx[r]) * n, n,
                    out.data.begin() + static_cast<std::ptrdiff_t>(r) * n);
    }
    return tp.push(std::move(out), {x.id}, [x, idx, n](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        auto& gx = t.grad(x.id).data;
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(idx[r]) * n + j] += g[r * n + j];
    });
}

inline Var sum(Tape& tp, Var x) {
    double s = 0.0;
    for (double v : tp.value(x).data) s += v;
    return tp.push(Tensor({1}, {s}), {x.id}, [x](Tape& t, int self) {
        const double g = t.grad(self)[0];
        for (auto& v : t.grad(x.id).data) v += g;
    });
}

// sum_i w_i |x_i - target_i| with fixed target and weights.
inline Var weighted_abs_error(Tape& tp, Var x, const Tensor& target, const Tensor& weight) {
    const auto& vx = tp.value(x);
    CLRM_REQUIRE(vx.size() == target.size() && vx.size() == weight.size(), ShapeError,
                 "weighted_abs_error: sizes " << vx.size() << ", " << target.size() << ", " << weight.size());
    double s = 0.0;
    for (std::size_t i = 0; i < vx.size(); ++i) s += weight[i] * std::abs(vx[i] - target[i]);
    return tp.push(Tensor({1}, {s}), {x.id}, [x, target, weight](Tape& t, int self) {
        const double g = t.grad(self)[0];
        const auto& v = t.value(x).data;
        auto& gx = t.grad(x.id).data;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double d = v[i] - target[i];
            gx[i] += g * weight[i] * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution, normalization, pooling. Layout (B, X, Y, Z, C), channels last.
// ---------------------------------------------------------------------------

// 3x3x3 kernel, stride 1, zero "same" padding. w has shape (3,3,3,Cin,Cout).
inline Var conv3d(Tape& tp, Var x, Var w, Var b) {
    const auto& vx = tp.value(x);
    const auto& vw = tp.value(w);
    CLRM_REQUIRE(vx.rank() == 5, ShapeError, "conv3d input must be (B,X,Y,Z,C), got " << shape_str(vx.shape));
    CLRM_REQUIRE(vw.rank() == 5 && vw.dim(0) == 3 && vw.dim(1) == 3 && vw.dim(2) == 3 && vw.dim(3) == vx.dim(4),
                 ShapeError, "conv3d kernel " << shape_str(vw.shape) << " does not match input " << shape_str(vx.shape));
    const int nb = vx.dim(0), nx = vx.dim(1), ny = vx.dim(2), nz = vx.dim(3), ci = vx.dim(4), co = vw.dim(4);
    CLRM_REQUIRE(tp.value(b).shape == std::vector<int>{co}, ShapeError, "conv3d bias must have " << co << " entries");
    auto cell = [=](int bb, int i, int j, int k) { return (((static_cast<std::size_t>(bb) * nx + i) * ny + j) * nz + k); };

    Tensor out({nb, nx, ny, nz, co});
    const auto& vb = tp.value(b);
    for (int bb = 0; bb < nb; ++bb)
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < ny; ++j)
                for (int k = 0; k < nz; ++k) {
                    double* o = &out.data[cell(bb, i, j, k) * co];
                    for (int q = 0; q < co; ++q) o[q] = vb[q];
                    for (int di = 0; di < 3; ++di) {
                        const int ii = i + di - 1;
                        if (ii < 0 || ii >= nx) continue;
                        for (int dj = 0; dj < 3; ++dj) {
                            const int jj = j + dj - 1;
                            if (jj < 0 || jj >= ny) continue;
                            for (int dk = 0; dk < 3; ++dk) {
                                const int kk = k + dk - 1;
                                if (kk < 0 || kk >= nz) continue;
                                const double* in = &vx.data[cell(bb, ii, jj, kk) * ci];
                                const double* wt = &vw.data[static_cast<std::size_t>((di * 3 + dj) * 3 + dk) * ci * co];
                                for (int p = 0; p < ci; ++p) {
                                    const double a = in[p];
                                    const double* wr = wt + static_cast<std::size_t>(p) * co;
                                    for (int q = 0; q < co; ++q) o[q] += a * wr[q];
                                }
                            }
                        }
                    }
                }

    return tp.push(std::move(out), {x.id, w.id, b.id}, [=](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& vx = t.value(x).data;
        const auto& vw = t.value(w).data;
        const bool gx_on = t.needs_grad(x), gw_on = t.needs_grad(w), gb_on = t.needs_grad(b);
        double* gx = gx_on ? t.grad(x.id).data.data() : nullptr;
        double* gw = gw_on ? t.grad(w.id).data.data() : nullptr;
        double* gb = gb_on ? t.grad(b.id).data.data() : nullptr;
        for (int bb = 0; bb < nb; ++bb)
            for (int i = 0; i < nx; ++i)
                for (int j = 0; j < ny; ++j)
                    for (int k = 0; k < nz; ++k) {
                        const double* go = &g[cell(bb, i, j, k) * co];
                        if (gb)
                            for (int q = 0; q < co; ++q) gb[q] += go[q];
                        for (int di = 0; di < 3; ++di) {
                            const int ii = i + di - 1;
                            if (ii < 0 || ii >= nx) continue;
                            for (int dj = 0; dj < 3; ++dj) {
                                const int jj = j + dj - 1;
                                if (jj < 0 || jj >= ny) continue;
                                for (int dk = 0; dk < 3; ++dk) {
                                    const int kk = k + dk - 1;
                                    if (kk < 0 || kk >= nz) continue;
                                    const std::size_t in_off = cell(bb, ii, jj, kk) * ci;
                                    const std::size_t w_off = static_cast<std::size_t>((di * 3 + dj) * 3 + dk) * ci * co;
                                    for (int p = 0; p < ci; ++p) {
                                        const double* wr = &vw[w_off + static_cast<std::size_t>(p) * co];
                                        if (gx) {
                                            double acc = 0.0;
                                            for (int q = 0; q < co; ++q) acc += go[q] * wr[q];
                                            gx[in_off + p] += acc;
                                        }
                                        if (gw) {
                                            const double a = vx[in_off + p];
                                            double* gwr = gw + w_off + static_cast<std::size_t>(p) * co;
                                            for (int q = 0; q < co; ++q) gwr[q] += a * go[q];
                                        }
                                    }
                                }
                            }
                        }
                    }
    });
}

struct BatchNormOptions {
    double momentum = 0.99;
    double eps = 1e-5;
};

// Per-channel (last dimension) batch normalization. In training mode the
// gradient flows through the batch statistics and the running buffers are
// updated as run = momentum * run + (1 - momentum) * batch (biased variance).
inline Var batchnorm(Tape& tp, Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, bool train,
                     const BatchNormOptions& opt = {}) {
    const auto& vx = tp.value(x);
    const int c = vx.dim(-1);
    const std::size_t rows = vx.size() / c;
    CLRM_REQUIRE(tp.value(gamma).shape == std::vector<int>{c} && tp.value(beta).shape == std::vector<int>{c}, ShapeError,
                 "batchnorm parameters must have " << c << " entries");
    CLRM_REQUIRE(running_mean.size() == static_cast<std::size_t>(c) && running_var.size() == static_cast<std::size_t>(c),
                 ShapeError, "batchnorm buffers must have " << c << " entries");
    CLRM_REQUIRE(!train || vx.size() / c >= 2, ShapeError,
                 "batchnorm training needs at least 2 values per channel (got a batch of " << vx.dim(0) << ")");

    std::vector<double> mean(c, 0.0), var(c, 0.0);
    if (train) {
        for (std::size_t r = 0; r < rows; ++r)
            for (int q = 0; q < c; ++q) mean[q] += vx[r * c + q];
        for (auto& m : mean) m /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (int q = 0; q < c; ++q) {
                const double d = vx[r * c + q] - mean[q];
                var[q] += d * d;
            }
        for (auto& v : var) v /= static_cast<double>(rows);
        for (int q = 0; q < c; ++q) {
            running_mean[q] = opt.momentum * running_mean[q] + (1.0 - opt.momentum) * mean[q];
            running_var[q] = opt.momentum * running_var[q] + (1.0 - opt.momentum) * var[q];
        }
    } else {
        mean = running_mean.data;
        var = running_var.data;
    }
    std::vector<double> inv_std(c);
    for (int q = 0; q < c; ++q) inv_std[q] = 1.0 / std::sqrt(var[q] + opt.eps);

    const auto& vg = tp.value(gamma);
    const auto& vbeta = tp.value(beta);
    Tensor xhat(vx.shape), out(vx.shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (int q = 0; q < c; ++q) {
            const std::size_t i = r * c + q;
            xhat[i] = (vx[i] - mean[q]) * inv_std[q];
            out[i] = vg[q] * xhat[i] + vbeta[q];
        }

    return tp.push(std::move(out), {x.id, gamma.id, beta.id},
                   [x, gamma, beta, c, rows, train, inv_std, xhat = std::move(xhat)](Tape& t, int self) {
                       const auto& g = t.grad(self).data;
                       std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                       for (std::size_t r = 0; r < rows; ++r)
                           for (int q = 0; q < c; ++q) {
                               sum_g[q] += g[r * c + q];
                               sum_gx[q] += g[r * c + q] * xhat[r * c + q];
                           }
                       if (t.needs_grad(gamma)) {
                           auto& gg = t.grad(gamma.id).data;
                           for (int q = 0; q < c; ++q) gg[q] += sum_gx[q];
                       }
                       if (t.needs_grad(beta)) {
                           auto& gb = t.grad(beta.id).data;
                           for (int q = 0; q < c; ++q) gb[q] += sum_g[q];
                       }
                       if (t.needs_grad(x)) {
                           const auto& vg = t.value(gamma).data;
                           auto& gx = t.grad(x.id).data;
                           const double n = static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r)
                               for (int q = 0; q < c; ++q) {
                                   const std::size_t i = r * c + q;
                                   if (train)
                                       gx[i] += vg[q] * inv_std[q] * (g[i] - sum_g[q] / n - xhat[i] * sum_gx[q] / n);
                                   else
                                       gx[i] += vg[q] * inv_std[q] * g[i];
                               }
                       }
                   });
}

// 2x2x2 max pooling with stride 2; the first maximal element wins ties.
inline Var maxpool3d(Tape& tp, Var x) {
    const auto& vx = tp.value(x);
    CLRM_REQUIRE(vx.rank() == 5, ShapeError, "maxpool3d input must be (B,X,Y,Z,C)");
    const int nb = vx.dim(0), nx = vx.dim(1), ny = vx.dim(2), nz = vx.dim(3), c = vx.dim(4);
    CLRM_REQUIRE(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0, ShapeError,
                 "maxpool3d needs even extents, got " << shape_str(vx.shape));
    const int ox = nx / 2, oy = ny / 2, oz = nz / 2;
    Tensor out({nb, ox, oy, oz, c});
    std::vector<std::size_t> arg(out.size());
    std::size_t o = 0;
    for (int bb = 0; bb < nb; ++bb)
        for (int i = 0; i < ox; ++i)
            for (int j = 0; j < oy; ++j)
                for (int k = 0; k < oz; ++k)
                    for (int q = 0; q < c; ++q, ++o) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t at = 0;
                        for (int di = 0; di < 2; ++di)
                            for (int dj = 0; dj < 2; ++dj)
                                for (int dk = 0; dk < 2; ++dk) {
                                    const std::size_t idx =
                                        ((((static_cast<std::size_t>(bb) * nx + 2 * i + di) * ny + 2 * j + dj) * nz + 2 * k + dk) * c) + q;
                                    if (vx[idx] > best) {
                                        best = vx[idx];
                                        at = idx;
                                    }
                                }
                        out[o] = best;
                        arg[o] = at;
                    }
    return tp.push(std::move(out), {x.id}, [x, arg = std::move(arg)](Tape& t, int self) {
        const auto& g = t.grad(self).data;
        auto& gx = t.grad(x.id).data;
        for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
    });
}

// ---------------------------------------------------------------------------
// LSTM cell. Fused weights hold the gates in column blocks (f, i, o, g):
// wx (N_in, 4N), wh (N, 4N), b (4N).
// ---------------------------------------------------------------------------

enum class CellActivation { relu, tanh };

struct LstmState {
    Var h, c;
};

inline LstmState lstm_step(Tape& tp, Var x, const LstmState& prev, Var wx, Var wh, Var b,
                           CellActivation act = CellActivation::relu) {
    const int n = tp.value(wh).dim(0);
    Var z = add_bias(tp, add(tp, matmul(tp, x, wx), matmul(tp, prev.h, wh)), b);
    Var f = sigmoid(tp, slice_cols(tp, z, 0, n));
    Var i = sigmoid(tp, slice_cols(tp, z, n, n));
    Var o = sigmoid(tp, slice_cols(tp, z, 2 * n, n));
    Var g = relu(tp, slice_cols(tp, z, 3 * n, n));
    Var c = add(tp, mul(tp, f, prev.c), mul(tp, i, g));
    Var ac = act == CellActivation::relu ? relu(tp, c) : tanh(tp, c);
    return {mul(tp, o, ac), c};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long long t = 0;
    std::vector<std::vector<double>> m, v;

    void step(ParameterStore& store) {
        if (m.empty()) {
            for (const auto& p : store.params()) {
                m.emplace_back(p.value.size(), 0.0);
                v.emplace_back(p.value.size(), 0.0);
            }
        }
        CLRM_REQUIRE(static_cast<int>(m.size()) == store.size(), ShapeError, "Adam state does not match parameters");
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (int k = 0; k < store.size(); ++k) {
            auto& p = store[k];
            auto& mk = m[k];
            auto& vk = v[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                mk[i] = beta1 * mk[i] + (1.0 - beta1) * g;
                vk[i] = beta2 * vk[i] + (1.0 - beta2) * g * g;
                p.value[i] -= lr * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + eps);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, parameter and buffer manifests, raw float64.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'R', 'M', 'N', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_entry(std::ostream& os, const std::string& name, const Tensor& t) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) write_pod<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline std::pair<std::string, Tensor> read_entry(std::istream& is) {
    const auto len = read_pod<std::uint32_t>(is);
    CLRM_REQUIRE(len < 4096, IoError, "corrupt checkpoint entry name");
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = read_pod<std::uint32_t>(is);
    CLRM_REQUIRE(rank <= 8, IoError, "corrupt checkpoint rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) d = read_pod<std::int32_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    CLRM_REQUIRE(is.good(), IoError, "truncated checkpoint");
    return {name, std::move(t)};
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParameterStore& store) {
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_pod(os, kCheckpointVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.buffer_count()));
    for (const auto& p : store.params()) detail::write_entry(os, p.name, p.value);
    for (const auto& b : store.buffers()) detail::write_entry(os, b.name, b.value);
}

// Loads values into a store with an identical manifest.
inline void read_checkpoint(std::istream& is, ParameterStore& store) {
    char magic[8];
    is.read(magic, 8);
    CLRM_REQUIRE(is.good() && std::equal(magic, magic + 8, kCheckpointMagic), IoError, "not a parameter checkpoint");
    const auto version = read_pod<std::uint32_t>(is);
    CLRM_REQUIRE(version == kCheckpointVersion, IoError, "unsupported checkpoint version " << version);
    const auto np = read_pod<std::uint32_t>(is);
    const auto nb = read_pod<std::uint32_t>(is);
    CLRM_REQUIRE(np == static_cast<std::uint32_t>(store.size()) && nb == static_cast<std::uint32_t>(store.buffer_count()),
                 IoError, "checkpoint manifest has " << np << " parameters / " << nb << " buffers, model expects "
                                                     << store.size() << " / " << store.buffer_count());
    for (auto& p : store.params()) {
        auto [name, t] = detail::read_entry(is);
        CLRM_REQUIRE(name == p.name && t.shape == p.value.shape, IoError,
                     "checkpoint entry " << name << shape_str(t.shape) << " does not match " << p.name
                                         << shape_str(p.value.shape));
        p.value = std::move(t);
    }
    for (auto& b : store.buffers()) {
        auto [name, t] = detail::read_entry(is);
        CLRM_REQUIRE(name == b.name && t.shape == b.value.shape, IoError, "checkpoint buffer " << name << " mismatch");
        b.value = std::move(t);
    }
}

inline nlohmann::json checkpoint_manifest(const ParameterStore& store) {
    nlohmann::json j;
    j["format"] = std::string(kCheckpointMagic, 8);
    j["version"] = kCheckpointVersion;
    j["trainable_parameters"] = store.total_count();
    for (const auto& p : store.params())
        j["parameters"].push_back({{"name", p.name}, {"shape", p.value.shape}, {"count", p.value.size()}});
    for (const auto& b : store.buffers())
        j["buffers"].push_back({{"name", b.name}, {"shape", b.value.shape}, {"count", b.value.size()}});
    return j;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store) {
    auto os = open_out(path, true);
    write_checkpoint(os, store);
    CLRM_REQUIRE(os.good(), IoError, "failed writing " << path.string());
    auto js = open_out(std::filesystem::path(path).concat(".json"));
    js << checkpoint_manifest(store).dump(2) << '\n';
}

inline void load_checkpoint(const std::filesystem::path& path, ParameterStore& store) {
    auto is = open_in(path, true);
    read_checkpoint(is, store);
}

}  // namespace clrm::nn
