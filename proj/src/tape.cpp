#include "instructtime/tape.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <cstdint>

#include "instructtime/common.hpp"

namespace instructtime::nn {

namespace {

using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

CMap mat(const Tensor& t) { return CMap(t.v.data(), t.rows(), t.cols()); }
Map mat(Tensor& t) { return Map(t.v.data(), t.rows(), t.cols()); }

}  // namespace

Real gelu_fn(Real x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

Real gelu_grad(Real x) {
    const Real cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const Real pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

Tape::NodeId Tape::push_(Tensor val, std::function<void(Tape&)> back) {
    Node n;
    n.grad = Tensor::zeros(val.shape);
    n.val = std::move(val);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
}

Tape::NodeId Tape::constant(Tensor t) { return push_(std::move(t), {}); }

Tape::NodeId Tape::param(Parameter& p) {
    Parameter* pp = &p;
    NodeId id = push_(p.value, {});
    nodes_[id].back = [id, pp](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        for (size_t i = 0; i < g.v.size(); ++i) pp->grad.v[i] += g.v[i];
    };
    return id;
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    Tensor out = nodes_[a].val;
    const Tensor& bv = nodes_[b].val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a, b](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (size_t i = 0; i < g.v.size(); ++i) {
            ga.v[i] += g.v[i];
            gb.v[i] += g.v[i];
        }
    };
    return id;
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
    Tensor out = nodes_[a].val;
    const Tensor& bv = nodes_[b].val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a, b](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (size_t i = 0; i < g.v.size(); ++i) {
            ga.v[i] += g.v[i];
            gb.v[i] -= g.v[i];
        }
    };
    return id;
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    Tensor out = nodes_[a].val;
    const Tensor& bv = nodes_[b].val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a, b](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& av = t.nodes_[a].val;
        const Tensor& bv2 = t.nodes_[b].val;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (size_t i = 0; i < g.v.size(); ++i) {
            ga.v[i] += g.v[i] * bv2.v[i];
            gb.v[i] += g.v[i] * av.v[i];
        }
    };
    return id;
}

Tape::NodeId Tape::scale(NodeId a, Real s) {
    Tensor out = nodes_[a].val;
    for (Real& x : out.v) x *= s;
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a, s](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * s;
    };
    return id;
}

Tape::NodeId Tape::axpy(NodeId a, NodeId b, Real alpha) {
    Tensor out = nodes_[a].val;
    const Tensor& bv = nodes_[b].val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += alpha * bv.v[i];
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a, b, alpha](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (size_t i = 0; i < g.v.size(); ++i) {
            ga.v[i] += g.v[i];
            gb.v[i] += alpha * g.v[i];
        }
    };
    return id;
}

Tape::NodeId Tape::add_rowvec(NodeId a, NodeId bias) {
    const Tensor& av = nodes_[a].val;
    const Tensor& bv = nodes_[bias].val;
    const int m = av.rows(), n = av.cols();
    Tensor out = av;
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out.v[size_t(r) * n + c] += bv.v[c];
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a, bias, m, n](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[bias].grad;
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) {
                const Real gv = g.v[size_t(r) * n + c];
                ga.v[size_t(r) * n + c] += gv;
                gb.v[c] += gv;
            }
    };
    return id;
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].val;
    const Tensor& bv = nodes_[b].val;
    if (av.cols() != bv.rows())
        throw Error(ErrKind::argument, "matmul inner dimensions disagree");
    Tensor out = Tensor::zeros({av.rows(), bv.cols()});
    mat(out).noalias() = mat(av) * mat(bv);
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a, b](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& av2 = t.nodes_[a].val;
        const Tensor& bv2 = t.nodes_[b].val;
        mat(t.nodes_[a].grad).noalias() += mat(g) * mat(bv2).transpose();
        mat(t.nodes_[b].grad).noalias() += mat(av2).transpose() * mat(g);
    };
    return id;
}

Tape::NodeId Tape::gelu(NodeId a) {
    Tensor out = nodes_[a].val;
    for (Real& x : out.v) x = gelu_fn(x);
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& av = t.nodes_[a].val;
        Tensor& ga = t.nodes_[a].grad;
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * gelu_grad(av.v[i]);
    };
    return id;
}

Tape::NodeId Tape::reshape(NodeId a, std::vector<int> shape) {
    Tensor out;
    out.shape = shape;
    out.v = nodes_[a].val.v;
    if (out.size() != nodes_[a].val.size())
        throw Error(ErrKind::argument, "reshape changes element count");
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, a](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
    };
    return id;
}

Tape::NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias, Real eps) {
    const Tensor& xv = nodes_[x].val;
    const int m = xv.rows(), n = xv.cols();
    Tensor out = Tensor::zeros(xv.shape);
    auto means = std::make_shared<std::vector<Real>>(m);
    auto inv_stds = std::make_shared<std::vector<Real>>(m);
    const Tensor& gv = nodes_[gain].val;
    const Tensor& bv = nodes_[bias].val;
    for (int r = 0; r < m; ++r) {
        Real mean = 0;
        for (int c = 0; c < n; ++c) mean += xv.v[size_t(r) * n + c];
        mean /= n;
        Real var = 0;
        for (int c = 0; c < n; ++c) {
            const Real d = xv.v[size_t(r) * n + c] - mean;
            var += d * d;
        }
        var /= n;
        const Real inv = 1.0 / std::sqrt(var + eps);
        (*means)[r] = mean;
        (*inv_stds)[r] = inv;
        for (int c = 0; c < n; ++c) {
            const Real xhat = (xv.v[size_t(r) * n + c] - mean) * inv;
            out.v[size_t(r) * n + c] = xhat * gv.v[c] + bv.v[c];
        }
    }
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, x, gain, bias, m, n, means, inv_stds](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& xv2 = t.nodes_[x].val;
        const Tensor& gv2 = t.nodes_[gain].val;
        Tensor& gx = t.nodes_[x].grad;
        Tensor& gg = t.nodes_[gain].grad;
        Tensor& gb = t.nodes_[bias].grad;
        for (int r = 0; r < m; ++r) {
            const Real mean = (*means)[r];
            const Real inv = (*inv_stds)[r];
            // dxhat = g * gain; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            Real sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int c = 0; c < n; ++c) {
                const size_t i = size_t(r) * n + c;
                const Real xhat = (xv2.v[i] - mean) * inv;
                const Real dxhat = g.v[i] * gv2.v[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                gg.v[c] += g.v[i] * xhat;
                gb.v[c] += g.v[i];
            }
            sum_dxhat /= n;
            sum_dxhat_xhat /= n;
            for (int c = 0; c < n; ++c) {
                const size_t i = size_t(r) * n + c;
                const Real xhat = (xv2.v[i] - mean) * inv;
                const Real dxhat = g.v[i] * gv2.v[c];
                gx.v[i] += inv * (dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    };
    return id;
}

Tape::NodeId Tape::gather_rows(NodeId table, std::vector<int> ids) {
    const Tensor& tv = nodes_[table].val;
    const int n = tv.cols();
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), n});
    for (size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= tv.rows())
            throw Error(ErrKind::argument, "gather_rows index out of range");
        for (int c = 0; c < n; ++c) out.v[r * n + c] = tv.v[size_t(ids[r]) * n + c];
    }
    NodeId id = push_(std::move(out), {});
    auto idx = std::make_shared<std::vector<int>>(std::move(ids));
    nodes_[id].back = [id, table, n, idx](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& gt = t.nodes_[table].grad;
        for (size_t r = 0; r < idx->size(); ++r)
            for (int c = 0; c < n; ++c) gt.v[size_t((*idx)[r]) * n + c] += g.v[r * n + c];
    };
    return id;
}

Tape::NodeId Tape::interleave_rows(int rows, NodeId a, std::vector<int> a_pos, NodeId b,
                                   std::vector<int> b_pos) {
    const int n = a >= 0 ? nodes_[a].val.cols() : nodes_[b].val.cols();
    if (static_cast<int>(a_pos.size() + b_pos.size()) != rows)
        throw Error(ErrKind::argument, "interleave_rows positions do not cover all rows");
    Tensor out = Tensor::zeros({rows, n});
    if (a >= 0) {
        const Tensor& av = nodes_[a].val;
        for (size_t r = 0; r < a_pos.size(); ++r)
            for (int c = 0; c < n; ++c) out.v[size_t(a_pos[r]) * n + c] = av.v[r * n + c];
    }
    if (b >= 0) {
        const Tensor& bv = nodes_[b].val;
        for (size_t r = 0; r < b_pos.size(); ++r)
            for (int c = 0; c < n; ++c) out.v[size_t(b_pos[r]) * n + c] = bv.v[r * n + c];
    }
    NodeId id = push_(std::move(out), {});
    auto ap = std::make_shared<std::vector<int>>(std::move(a_pos));
    auto bp = std::make_shared<std::vector<int>>(std::move(b_pos));
    nodes_[id].back = [id, a, b, n, ap, bp](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        if (a >= 0) {
            Tensor& ga = t.nodes_[a].grad;
            for (size_t r = 0; r < ap->size(); ++r)
                for (int c = 0; c < n; ++c) ga.v[r * n + c] += g.v[size_t((*ap)[r]) * n + c];
        }
        if (b >= 0) {
            Tensor& gb = t.nodes_[b].grad;
            for (size_t r = 0; r < bp->size(); ++r)
                for (int c = 0; c < n; ++c) gb.v[r * n + c] += g.v[size_t((*bp)[r]) * n + c];
        }
    };
    return id;
}

Tape::NodeId Tape::causal_self_attention(NodeId x, NodeId wq, NodeId bq, NodeId wk, NodeId bk,
                                         NodeId wv, NodeId bv, NodeId wo, NodeId bo, int n_heads) {
    const Tensor& xv = nodes_[x].val;
    const int T = xv.rows(), d = xv.cols();
    if (d % n_heads != 0) throw Error(ErrKind::argument, "head count must divide model width");
    const int dh = d / n_heads;
    const Real inv_sqrt_dh = 1.0 / std::sqrt(static_cast<Real>(dh));

    auto lin = [&](NodeId w, NodeId b) {
        Tensor r = Tensor::zeros({T, d});
        mat(r).noalias() = mat(xv) * mat(nodes_[w].val);
        const Tensor& bvv = nodes_[b].val;
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < d; ++c) r.v[size_t(t) * d + c] += bvv.v[c];
        return r;
    };
    auto Q = std::make_shared<Tensor>(lin(wq, bq));
    auto K = std::make_shared<Tensor>(lin(wk, bk));
    auto V = std::make_shared<Tensor>(lin(wv, bv));

    // probs[h] is the [T,T] post-softmax attention matrix for head h.
    auto probs = std::make_shared<std::vector<Tensor>>();
    probs->reserve(n_heads);
    auto concat = std::make_shared<Tensor>(Tensor::zeros({T, d}));
    for (int h = 0; h < n_heads; ++h) {
        Tensor A = Tensor::zeros({T, T});
        for (int i = 0; i < T; ++i) {
            Real maxs = -std::numeric_limits<Real>::infinity();
            std::vector<Real> s(i + 1);
            for (int j = 0; j <= i; ++j) {
                Real dot = 0;
                for (int c = 0; c < dh; ++c)
                    dot += Q->v[size_t(i) * d + h * dh + c] * K->v[size_t(j) * d + h * dh + c];
                s[j] = dot * inv_sqrt_dh;
                maxs = std::max(maxs, s[j]);
            }
            Real z = 0;
            for (int j = 0; j <= i; ++j) {
                s[j] = std::exp(s[j] - maxs);
                z += s[j];
            }
            for (int j = 0; j <= i; ++j) A.v[size_t(i) * T + j] = s[j] / z;
        }
        for (int i = 0; i < T; ++i)
            for (int c = 0; c < dh; ++c) {
                Real acc = 0;
                for (int j = 0; j <= i; ++j)
                    acc += A.v[size_t(i) * T + j] * V->v[size_t(j) * d + h * dh + c];
                concat->v[size_t(i) * d + h * dh + c] = acc;
            }
        probs->push_back(std::move(A));
    }

    Tensor out = Tensor::zeros({T, d});
    mat(out).noalias() = mat(*concat) * mat(nodes_[wo].val);
    const Tensor& bov = nodes_[bo].val;
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < d; ++c) out.v[size_t(t) * d + c] += bov.v[c];

    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads, T, d, dh, inv_sqrt_dh, Q, K,
                       V, probs, concat](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        // Output projection.
        Tensor d_concat = Tensor::zeros({T, d});
        mat(d_concat).noalias() = mat(g) * mat(t.nodes_[wo].val).transpose();
        mat(t.nodes_[wo].grad).noalias() += mat(*concat).transpose() * mat(g);
        {
            Tensor& gbo = t.nodes_[bo].grad;
            for (int i = 0; i < T; ++i)
                for (int c = 0; c < d; ++c) gbo.v[c] += g.v[size_t(i) * d + c];
        }

        Tensor dQ = Tensor::zeros({T, d});
        Tensor dK = Tensor::zeros({T, d});
        Tensor dV = Tensor::zeros({T, d});
        for (int h = 0; h < n_heads; ++h) {
            const Tensor& A = (*probs)[h];
            // dV and dA from C = A * V_h.
            Tensor dA = Tensor::zeros({T, T});
            for (int i = 0; i < T; ++i)
                for (int j = 0; j <= i; ++j) {
                    Real acc = 0;
                    for (int c = 0; c < dh; ++c)
                        acc += d_concat.v[size_t(i) * d + h * dh + c] *
                               V->v[size_t(j) * d + h * dh + c];
                    dA.v[size_t(i) * T + j] = acc;
                    const Real a = A.v[size_t(i) * T + j];
                    for (int c = 0; c < dh; ++c)
                        dV.v[size_t(j) * d + h * dh + c] +=
                            a * d_concat.v[size_t(i) * d + h * dh + c];
                }
            // Softmax backward row by row, then scores to Q/K.
            for (int i = 0; i < T; ++i) {
                Real dot = 0;
                for (int j = 0; j <= i; ++j)
                    dot += dA.v[size_t(i) * T + j] * A.v[size_t(i) * T + j];
                for (int j = 0; j <= i; ++j) {
                    const Real ds =
                        A.v[size_t(i) * T + j] * (dA.v[size_t(i) * T + j] - dot) * inv_sqrt_dh;
                    for (int c = 0; c < dh; ++c) {
                        dQ.v[size_t(i) * d + h * dh + c] += ds * K->v[size_t(j) * d + h * dh + c];
                        dK.v[size_t(j) * d + h * dh + c] += ds * Q->v[size_t(i) * d + h * dh + c];
                    }
                }
            }
        }

        const Tensor& xv2 = t.nodes_[x].val;
        auto back_lin = [&](const Tensor& dY, NodeId w, NodeId b) {
            mat(t.nodes_[x].grad).noalias() += mat(dY) * mat(t.nodes_[w].val).transpose();
            mat(t.nodes_[w].grad).noalias() += mat(xv2).transpose() * mat(dY);
            Tensor& gb = t.nodes_[b].grad;
            for (int i = 0; i < T; ++i)
                for (int c = 0; c < d; ++c) gb.v[c] += dY.v[size_t(i) * d + c];
        };
        back_lin(dQ, wq, bq);
        back_lin(dK, wk, bk);
        back_lin(dV, wv, bv);
    };
    return id;
}

Tape::NodeId Tape::conv1d_causal(NodeId x, NodeId w, NodeId b, int dilation) {
    const Tensor& xv = nodes_[x].val;
    const Tensor& wv = nodes_[w].val;
    if (wv.shape.size() != 3) throw Error(ErrKind::argument, "conv weight must be [k,Cin,Cout]");
    const int T = xv.rows(), cin = xv.cols();
    const int k = wv.shape[0], cout = wv.shape[2];
    if (wv.shape[1] != cin) throw Error(ErrKind::argument, "conv channel mismatch");
    const Tensor& bv = nodes_[b].val;

    Tensor out = Tensor::zeros({T, cout});
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < cout; ++c) out.v[size_t(t) * cout + c] = bv.v[c];
    // Tap i at temporal offset (k-1-i)*dilation into the past; positions
    // before the sequence start read as zero.
    for (int i = 0; i < k; ++i) {
        const int shift = (k - 1 - i) * dilation;
        if (shift >= T) continue;
        const int span = T - shift;
        CMap wi(wv.v.data() + size_t(i) * cin * cout, cin, cout);
        CMap xs(xv.v.data(), span, cin);
        Map(out.v.data() + size_t(shift) * cout, span, cout).noalias() += xs * wi;
    }
    NodeId id = push_(std::move(out), {});
    nodes_[id].back = [id, x, w, b, dilation, T, cin, k, cout](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& xv2 = t.nodes_[x].val;
        const Tensor& wv2 = t.nodes_[w].val;
        {
            Tensor& gb = t.nodes_[b].grad;
            for (int i = 0; i < T; ++i)
                for (int c = 0; c < cout; ++c) gb.v[c] += g.v[size_t(i) * cout + c];
        }
        for (int i = 0; i < k; ++i) {
            const int shift = (k - 1 - i) * dilation;
            if (shift >= T) continue;
            const int span = T - shift;
            CMap wi(wv2.v.data() + size_t(i) * cin * cout, cin, cout);
            CMap gs(g.v.data() + size_t(shift) * cout, span, cout);
            CMap xs(xv2.v.data(), span, cin);
            Map(t.nodes_[x].grad.v.data(), span, cin).noalias() += gs * wi.transpose();
            Map(t.nodes_[w].grad.v.data() + size_t(i) * cin * cout, cin, cout).noalias() +=
                xs.transpose() * gs;
        }
    };
    return id;
}

Tape::NodeId Tape::mse(NodeId a, Tensor target) {
    const Tensor& av = nodes_[a].val;
    if (av.size() != target.size()) throw Error(ErrKind::argument, "mse shape mismatch");
    const Real n = static_cast<Real>(av.size());
    Real acc = 0;
    for (size_t i = 0; i < av.v.size(); ++i) {
        const Real d = av.v[i] - target.v[i];
        acc += d * d;
    }
    Tensor out;
    out.shape = {1};
    out.v = {acc / n};
    NodeId id = push_(std::move(out), {});
    auto tgt = std::make_shared<Tensor>(std::move(target));
    nodes_[id].back = [id, a, n, tgt](Tape& t) {
        const Real g = t.nodes_[id].grad.v[0];
        const Tensor& av2 = t.nodes_[a].val;
        Tensor& ga = t.nodes_[a].grad;
        for (size_t i = 0; i < av2.v.size(); ++i)
            ga.v[i] += g * 2.0 * (av2.v[i] - tgt->v[i]) / n;
    };
    return id;
}

Tape::NodeId Tape::row_sqnorm_mean(NodeId a, Tensor reference) {
    const Tensor& av = nodes_[a].val;
    if (av.size() != reference.size())
        throw Error(ErrKind::argument, "row_sqnorm_mean shape mismatch");
    const int m = av.rows();
    Real acc = 0;
    for (size_t i = 0; i < av.v.size(); ++i) {
        const Real d = av.v[i] - reference.v[i];
        acc += d * d;
    }
    Tensor out;
    out.shape = {1};
    out.v = {acc / m};
    NodeId id = push_(std::move(out), {});
    auto ref = std::make_shared<Tensor>(std::move(reference));
    nodes_[id].back = [id, a, m, ref](Tape& t) {
        const Real g = t.nodes_[id].grad.v[0];
        const Tensor& av2 = t.nodes_[a].val;
        Tensor& ga = t.nodes_[a].grad;
        for (size_t i = 0; i < av2.v.size(); ++i)
            ga.v[i] += g * 2.0 * (av2.v[i] - ref->v[i]) / m;
    };
    return id;
}

Tape::NodeId Tape::ste(NodeId a, Tensor quantized) {
    if (nodes_[a].val.size() != quantized.size())
        throw Error(ErrKind::argument, "ste shape mismatch");
    NodeId id = push_(std::move(quantized), {});
    nodes_[id].back = [id, a](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
    };
    return id;
}

Tape::NodeId Tape::cross_entropy_next_token(NodeId logits, std::vector<int> ids,
                                            std::vector<uint8_t> target_mask) {
    const Tensor& lv = nodes_[logits].val;
    const int T = lv.rows(), V = lv.cols();
    if (ids.size() != target_mask.size() || static_cast<int>(ids.size()) != T)
        throw Error(ErrKind::argument, "token/mask length must match logit rows");
    Real acc = 0;
    for (int i = 1; i < T; ++i) {
        if (!target_mask[i]) continue;
        const int row = i - 1;
        Real mx = lv.v[size_t(row) * V];
        for (int c = 1; c < V; ++c) mx = std::max(mx, lv.v[size_t(row) * V + c]);
        Real z = 0;
        for (int c = 0; c < V; ++c) z += std::exp(lv.v[size_t(row) * V + c] - mx);
        acc += mx + std::log(z) - lv.v[size_t(row) * V + ids[i]];
    }
    Tensor out;
    out.shape = {1};
    out.v = {acc};
    NodeId id = push_(std::move(out), {});
    auto idsp = std::make_shared<std::vector<int>>(std::move(ids));
    auto maskp = std::make_shared<std::vector<uint8_t>>(std::move(target_mask));
    nodes_[id].back = [id, logits, T, V, idsp, maskp](Tape& t) {
        const Real g = t.nodes_[id].grad.v[0];
        const Tensor& lv2 = t.nodes_[logits].val;
        Tensor& gl = t.nodes_[logits].grad;
        for (int i = 1; i < T; ++i) {
            if (!(*maskp)[i]) continue;
            const int row = i - 1;
            Real mx = lv2.v[size_t(row) * V];
            for (int c = 1; c < V; ++c) mx = std::max(mx, lv2.v[size_t(row) * V + c]);
            Real z = 0;
            for (int c = 0; c < V; ++c) z += std::exp(lv2.v[size_t(row) * V + c] - mx);
            for (int c = 0; c < V; ++c) {
                const Real p = std::exp(lv2.v[size_t(row) * V + c] - mx) / z;
                gl.v[size_t(row) * V + c] += g * (p - (c == (*idsp)[i] ? 1.0 : 0.0));
            }
        }
    };
    return id;
}

void Tape::backward(NodeId root, Real seed) {
    if (nodes_[root].val.size() != 1)
        throw Error(ErrKind::argument, "backward root must be scalar");
    nodes_[root].grad.v[0] = seed;
    for (int i = root; i >= 0; --i)
        if (nodes_[i].back) nodes_[i].back(*this);
}

}  // namespace instructtime::nn
