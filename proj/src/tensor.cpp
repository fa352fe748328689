#include "biss/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "biss/errors.hpp"

namespace biss {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

namespace {

thread_local Tape* g_tape = nullptr;

void ensure_grad(TensorNode* n) {
    if (n->grad.size() != n->data.size()) n->grad.assign(n->data.size(), 0.0);
}

bool tracked(std::initializer_list<const Tensor*> inputs) {
    if (g_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

Tensor make_output(Shape shape, std::vector<double> data, bool track) {
    Tensor out(std::move(shape), std::move(data), track);
    if (track) ensure_grad(out.node());
    return out;
}

std::vector<std::int64_t> strides_of(const Shape& shape) {
    std::vector<std::int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] =
            st[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    }
    return st;
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got shape " + shape_str(shape));
    }
    if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
        throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> d(static_cast<std::size_t>(numel(shape)), 0.0);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> d(static_cast<std::size_t>(numel(shape)), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> d(static_cast<std::size_t>(numel(shape)));
    for (double& v : d) v = dist(rng);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

void Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    if (v) ensure_grad(node_.get());
}

std::vector<double>& Tensor::grad() {
    ensure_grad(node_.get());
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) throw std::runtime_error("tensor has no gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a scalar tensor, got shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::all_finite() const {
    for (double v : node_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tape::record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw std::runtime_error("backward called twice on the same tape without reset");
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward requires a scalar loss");
    }
    if (!loss.requires_grad()) {
        throw std::invalid_argument("loss does not require grad (was the tape active during the forward pass?)");
    }
    ensure_grad(loss.node());
    loss.node()->grad[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    consumed_ = true;
}

void Tape::reset() {
    ops_.clear();
    consumed_ = false;
}

Tape* current_tape() { return g_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = prev_; }

TapePause::TapePause() : prev_(g_tape) { g_tape = nullptr; }
TapePause::~TapePause() { g_tape = prev_; }

Tensor add(const Tensor& a, const Tensor& b) {
    const bool bias = b.rank() == 1 && a.rank() > 1 && b.dim(0) == a.shape().back();
    if (!bias && a.shape() != b.shape()) {
        throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.data().size();
    std::vector<double> out(n);
    if (bias) {
        const std::size_t d = b.data().size();
        for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i % d];
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
    }
    const bool track = tracked({&a, &b});
    Tensor o = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.ptr(), bn = b.ptr(), on = o.ptr();
        g_tape->record([an, bn, on, bias] {
            if (an->requires_grad) {
                ensure_grad(an.get());
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                ensure_grad(bn.get());
                if (bias) {
                    const std::size_t d = bn->data.size();
                    for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i % d] += on->grad[i];
                } else {
                    for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
                }
            }
        });
    }
    return o;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.data().size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    const bool track = tracked({&a, &b});
    Tensor o = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.ptr(), bn = b.ptr(), on = o.ptr();
        g_tape->record([an, bn, on] {
            if (an->requires_grad) {
                ensure_grad(an.get());
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                ensure_grad(bn.get());
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
            }
        });
    }
    return o;
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    const bool track = tracked({&a});
    Tensor o = make_output(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.ptr(), on = o.ptr();
        g_tape->record([an, on, c] {
            if (!an->requires_grad) return;
            ensure_grad(an.get());
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return o;
}

Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    const bool track = tracked({&a});
    Tensor o = make_output({1}, {s}, track);
    if (track) {
        auto an = a.ptr(), on = o.ptr();
        g_tape->record([an, on] {
            if (!an->requires_grad) return;
            ensure_grad(an.get());
            const double g = on->grad[0];
            for (double& v : an->grad) v += g;
        });
    }
    return o;
}

namespace {

// C[m,n] += A[m,k] * B[k,n], contiguous row-major blocks.
void mm_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = A + static_cast<std::ptrdiff_t>(i) * k;
        double* crow = C + static_cast<std::ptrdiff_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = B + static_cast<std::ptrdiff_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where Bt is [n,k].
void mm_acc_bt(const double* A, const double* Bt, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = A + static_cast<std::ptrdiff_t>(i) * k;
        double* crow = C + static_cast<std::ptrdiff_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = Bt + static_cast<std::ptrdiff_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n].
void mm_acc_at(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = A + static_cast<std::ptrdiff_t>(i) * k;
        const double* brow = B + static_cast<std::ptrdiff_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = C + static_cast<std::ptrdiff_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    const bool track = tracked({&a, &b});
    Tensor o = make_output({m, n}, std::move(out), track);
    if (track) {
        auto an = a.ptr(), bn = b.ptr(), on = o.ptr();
        g_tape->record([an, bn, on, m, k, n] {
            if (an->requires_grad) {
                ensure_grad(an.get());
                // dA += dC * B^T
                mm_acc_bt(on->grad.data(), bn->data.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                ensure_grad(bn.get());
                // dB += A^T * dC
                mm_acc_at(an->data.data(), on->grad.data(), bn->grad.data(), m, k, n);
            }
        });
    }
    return o;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw std::invalid_argument("bmm dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(static_cast<std::size_t>(B) * m * n, 0.0);
    for (int bi = 0; bi < B; ++bi) {
        mm_acc(a.data().data() + static_cast<std::ptrdiff_t>(bi) * m * k,
               b.data().data() + static_cast<std::ptrdiff_t>(bi) * k * n,
               out.data() + static_cast<std::ptrdiff_t>(bi) * m * n, m, k, n);
    }
    const bool track = tracked({&a, &b});
    Tensor o = make_output({B, m, n}, std::move(out), track);
    if (track) {
        auto an = a.ptr(), bn = b.ptr(), on = o.ptr();
        g_tape->record([an, bn, on, B, m, k, n] {
            for (int bi = 0; bi < B; ++bi) {
                const double* ga = on->grad.data() + static_cast<std::ptrdiff_t>(bi) * m * n;
                if (an->requires_grad) {
                    ensure_grad(an.get());
                    mm_acc_bt(ga, bn->data.data() + static_cast<std::ptrdiff_t>(bi) * k * n,
                              an->grad.data() + static_cast<std::ptrdiff_t>(bi) * m * k, m, n, k);
                }
                if (bn->requires_grad) {
                    ensure_grad(bn.get());
                    mm_acc_at(an->data.data() + static_cast<std::ptrdiff_t>(bi) * m * k, ga,
                              bn->grad.data() + static_cast<std::ptrdiff_t>(bi) * k * n, m, k, n);
                }
            }
        });
    }
    return o;
}

Tensor softmax(const Tensor& x, int axis) {
    int ax = axis < 0 ? axis + x.rank() : axis;
    if (ax < 0 || ax >= x.rank()) {
        throw std::invalid_argument("softmax axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
    }
    const int n = x.dim(ax);
    std::int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
    for (int i = 0; i < ax; ++i) outer *= x.dim(i);
    std::vector<double> out(x.data().size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double mx = x.data()[static_cast<std::size_t>(base)];
            for (int t = 1; t < n; ++t) mx = std::max(mx, x.data()[static_cast<std::size_t>(base + t * inner)]);
            double z = 0.0;
            for (int t = 0; t < n; ++t) {
                const double e = std::exp(x.data()[static_cast<std::size_t>(base + t * inner)] - mx);
                out[static_cast<std::size_t>(base + t * inner)] = e;
                z += e;
            }
            for (int t = 0; t < n; ++t) out[static_cast<std::size_t>(base + t * inner)] /= z;
        }
    }
    const bool track = tracked({&x});
    Tensor o = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.ptr(), on = o.ptr();
        g_tape->record([xn, on, n, inner, outer] {
            if (!xn->requires_grad) return;
            ensure_grad(xn.get());
            for (std::int64_t ot = 0; ot < outer; ++ot) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = ot * n * inner + in;
                    double dot = 0.0;
                    for (int t = 0; t < n; ++t) {
                        const std::size_t i = static_cast<std::size_t>(base + t * inner);
                        dot += on->grad[i] * on->data[i];
                    }
                    for (int t = 0; t < n; ++t) {
                        const std::size_t i = static_cast<std::size_t>(base + t * inner);
                        xn->grad[i] += on->data[i] * (on->grad[i] - dot);
                    }
                }
            }
        });
    }
    return o;
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    const bool track = tracked({&x});
    Tensor o = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.ptr(), on = o.ptr();
        g_tape->record([xn, on] {
            if (!xn->requires_grad) return;
            ensure_grad(xn.get());
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                if (xn->data[i] > 0.0) xn->grad[i] += on->grad[i];
            }
        });
    }
    return o;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1) throw std::invalid_argument("layer_norm requires rank >= 1");
    const int d = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
        throw std::invalid_argument("layer_norm gain/bias must have shape (" + std::to_string(d) + ")");
    }
    const std::int64_t rows = numel(x.shape()) / d;
    std::vector<double> out(x.data().size());
    auto xhat = std::make_shared<std::vector<double>>(x.data().size());
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = x.data().data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= d;
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(r)] = rs;
        for (int j = 0; j < d; ++j) {
            const std::size_t i = static_cast<std::size_t>(r * d + j);
            (*xhat)[i] = (row[j] - mean) * rs;
            out[i] = (*xhat)[i] * gain.data()[static_cast<std::size_t>(j)] + bias.data()[static_cast<std::size_t>(j)];
        }
    }
    const bool track = tracked({&x, &gain, &bias});
    Tensor o = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.ptr(), gn = gain.ptr(), bn = bias.ptr(), on = o.ptr();
        g_tape->record([xn, gn, bn, on, xhat, rstd, rows, d] {
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gy = on->grad.data() + r * d;
                const double* xh = xhat->data() + r * d;
                if (gn->requires_grad) {
                    ensure_grad(gn.get());
                    for (int j = 0; j < d; ++j) gn->grad[static_cast<std::size_t>(j)] += gy[j] * xh[j];
                }
                if (bn->requires_grad) {
                    ensure_grad(bn.get());
                    for (int j = 0; j < d; ++j) bn->grad[static_cast<std::size_t>(j)] += gy[j];
                }
                if (xn->requires_grad) {
                    ensure_grad(xn.get());
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = gy[j] * gn->data[static_cast<std::size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    const double rs = (*rstd)[static_cast<std::size_t>(r)];
                    for (int j = 0; j < d; ++j) {
                        const double dxh = gy[j] * gn->data[static_cast<std::size_t>(j)];
                        xn->grad[static_cast<std::size_t>(r * d + j)] += rs * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        });
    }
    return o;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, const Shape& ids_shape) {
    if (table.rank() != 2) throw std::invalid_argument("embedding table must be rank 2");
    if (static_cast<std::int64_t>(ids.size()) != numel(ids_shape)) {
        throw std::invalid_argument("ids length does not match ids_shape " + shape_str(ids_shape));
    }
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocab of size " + std::to_string(v));
        }
    }
    Shape out_shape = ids_shape;
    out_shape.push_back(d);
    std::vector<double> out(ids.size() * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* row = table.data().data() + static_cast<std::ptrdiff_t>(ids[i]) * d;
        std::copy(row, row + d, out.begin() + static_cast<std::ptrdiff_t>(i) * d);
    }
    const bool track = tracked({&table});
    Tensor o = make_output(std::move(out_shape), std::move(out), track);
    if (track) {
        auto tn = table.ptr(), on = o.ptr();
        g_tape->record([tn, on, ids, d] {
            if (!tn->requires_grad) return;
            ensure_grad(tn.get());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* dst = tn->grad.data() + static_cast<std::ptrdiff_t>(ids[i]) * d;
                const double* src = on->grad.data() + static_cast<std::ptrdiff_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return o;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool train) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0,1)");
    if (!train || rate == 0.0) return x;
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(x.data().size());
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double m = dist(rng) < rate ? 0.0 : keep_scale;
        (*mask)[i] = m;
        out[i] = x.data()[i] * m;
    }
    const bool track = tracked({&x});
    Tensor o = make_output(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.ptr(), on = o.ptr();
        g_tape->record([xn, on, mask] {
            if (!xn->requires_grad) return;
            ensure_grad(xn.get());
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * (*mask)[i];
        });
    }
    return o;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel(new_shape) != numel(x.shape())) {
        throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) + " changes element count");
    }
    const bool track = tracked({&x});
    Tensor o = make_output(std::move(new_shape), x.data(), track);
    if (track) {
        auto xn = x.ptr(), on = o.ptr();
        g_tape->record([xn, on] {
            if (!xn->requires_grad) return;
            ensure_grad(xn.get());
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return o;
}

namespace {

// out[i] = in[perm_map(i)] index translation shared by permute forward/backward.
std::vector<std::size_t> permute_index_map(const Shape& in_shape, const std::vector<int>& perm) {
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
    const auto in_st = strides_of(in_shape);
    const auto out_st = strides_of(out_shape);
    const std::int64_t n = numel(in_shape);
    std::vector<std::size_t> map(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t rem = i, src = 0;
        for (std::size_t a = 0; a < perm.size(); ++a) {
            const std::int64_t idx = rem / out_st[a];
            rem %= out_st[a];
            src += idx * in_st[static_cast<std::size_t>(perm[a])];
        }
        map[static_cast<std::size_t>(i)] = static_cast<std::size_t>(src);
    }
    return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    if (static_cast<int>(perm.size()) != x.rank()) {
        throw std::invalid_argument("permute order must name every axis of " + shape_str(x.shape()));
    }
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
        if (p < 0 || p >= x.rank() || seen[static_cast<std::size_t>(p)]) {
            throw std::invalid_argument("invalid permutation for shape " + shape_str(x.shape()));
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
    auto map = std::make_shared<std::vector<std::size_t>>(permute_index_map(x.shape(), perm));
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[(*map)[i]];
    const bool track = tracked({&x});
    Tensor o = make_output(std::move(out_shape), std::move(out), track);
    if (track) {
        auto xn = x.ptr(), on = o.ptr();
        g_tape->record([xn, on, map] {
            if (!xn->requires_grad) return;
            ensure_grad(xn.get());
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[(*map)[i]] += on->grad[i];
        });
    }
    return o;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat requires at least one tensor");
    const int rank = parts[0].rank();
    int ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) throw std::invalid_argument("concat axis out of range");
    Shape out_shape = parts[0].shape();
    int total_ax = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw std::invalid_argument("concat rank mismatch");
        for (int i = 0; i < rank; ++i) {
            if (i != ax && p.dim(i) != out_shape[static_cast<std::size_t>(i)]) {
                throw std::invalid_argument("concat shape mismatch: " + shape_str(out_shape) + " vs " + shape_str(p.shape()));
            }
        }
        total_ax += p.dim(ax);
    }
    out_shape[static_cast<std::size_t>(ax)] = total_ax;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
    for (int i = ax + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    std::vector<std::int64_t> offsets(parts.size());  // axis offsets per part
    {
        std::int64_t off = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            offsets[p] = off;
            const std::int64_t block = static_cast<std::int64_t>(parts[p].dim(ax)) * inner;
            for (std::int64_t o = 0; o < outer; ++o) {
                std::copy(parts[p].data().begin() + o * block, parts[p].data().begin() + (o + 1) * block,
                          out.begin() + o * total_ax * inner + off * inner);
            }
            off += parts[p].dim(ax);
        }
    }
    bool track = false;
    if (g_tape) {
        for (const Tensor& p : parts) track = track || p.requires_grad();
    }
    Tensor o = make_output(std::move(out_shape), std::move(out), track);
    if (track) {
        std::vector<std::shared_ptr<TensorNode>> pns;
        pns.reserve(parts.size());
        for (const Tensor& p : parts) pns.push_back(p.ptr());
        auto on = o.ptr();
        g_tape->record([pns, on, offsets, outer, inner, total_ax, ax] {
            for (std::size_t p = 0; p < pns.size(); ++p) {
                if (!pns[p]->requires_grad) continue;
                ensure_grad(pns[p].get());
                const std::int64_t dim_ax = pns[p]->shape[static_cast<std::size_t>(ax)];
                const std::int64_t block = dim_ax * inner;
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* src = on->grad.data() + o * total_ax * inner + offsets[p] * inner;
                    double* dst = pns[p]->grad.data() + o * block;
                    for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return o;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<bool>& pad_mask) {
    if (logits.rank() != 2) throw std::invalid_argument("cross_entropy expects logits of shape (N,V)");
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n || static_cast<int>(pad_mask.size()) != n) {
        throw std::invalid_argument("cross_entropy targets/mask length must match logits rows");
    }
    std::int64_t valid = 0;
    for (int i = 0; i < n; ++i) {
        if (pad_mask[static_cast<std::size_t>(i)]) continue;
        ++valid;
        if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= v) {
            throw std::out_of_range("target id " + std::to_string(targets[static_cast<std::size_t>(i)]) +
                                    " outside vocab of size " + std::to_string(v));
        }
    }
    if (valid == 0) throw DataError("empty loss support: every position is padding");

    auto probs = std::make_shared<std::vector<double>>(logits.data().size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data().data() + static_cast<std::ptrdiff_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(row[j] - mx);
            (*probs)[static_cast<std::size_t>(i) * v + j] = e;
            z += e;
        }
        for (int j = 0; j < v; ++j) (*probs)[static_cast<std::size_t>(i) * v + j] /= z;
        if (!pad_mask[static_cast<std::size_t>(i)]) {
            const double lse = mx + std::log(z);
            loss += lse - row[targets[static_cast<std::size_t>(i)]];
        }
    }
    loss /= static_cast<double>(valid);
    const bool track = tracked({&logits});
    Tensor o = make_output({1}, {loss}, track);
    if (track) {
        auto ln = logits.ptr(), on = o.ptr();
        g_tape->record([ln, on, probs, targets, pad_mask, n, v, valid] {
            if (!ln->requires_grad) return;
            ensure_grad(ln.get());
            const double g = on->grad[0] / static_cast<double>(valid);
            for (int i = 0; i < n; ++i) {
                if (pad_mask[static_cast<std::size_t>(i)]) continue;
                double* dst = ln->grad.data() + static_cast<std::ptrdiff_t>(i) * v;
                const double* p = probs->data() + static_cast<std::ptrdiff_t>(i) * v;
                for (int j = 0; j < v; ++j) dst[j] += g * p[j];
                dst[targets[static_cast<std::size_t>(i)]] -= g;
            }
        });
    }
    return o;
}

}  // namespace biss
