#include "clsr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "clsr/error.hpp"

namespace clsr {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// Records parents and the backward rule on `out` iff any input needs grad.
void wire(Tensor& out, std::initializer_list<Tensor> inputs, std::function<void(TensorNode&)> fn) {
    bool rg = false;
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    if (!rg) return;
    TensorNode* n = out.node();
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward_fn = std::move(fn);
}

int64_t last_dim(const Tensor& x) { return x.shape().back(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> v(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
    Tensor out(a.shape(), std::move(v));
    wire(out, {a, b}, [](TensorNode& o) {
        for (int side = 0; side < 2; ++side) {
            TensorNode* p = o.parents[side].get();
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> v(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
    Tensor out(a.shape(), std::move(v));
    wire(out, {a, b}, [](TensorNode& o) {
        if (o.parents[0]->requires_grad) {
            auto& g = o.parents[0]->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            auto& g = o.parents[1]->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> v(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
    Tensor out(a.shape(), std::move(v));
    wire(out, {a, b}, [](TensorNode& o) {
        const auto& av = o.parents[0]->values;
        const auto& bv2 = o.parents[1]->values;
        if (o.parents[0]->requires_grad) {
            auto& g = o.parents[0]->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bv2[i];
        }
        if (o.parents[1]->requires_grad) {
            auto& g = o.parents[1]->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * av[i];
        }
    });
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.shape().size() != 1 || bias.shape()[0] != last_dim(x)) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs trailing axis of " +
                             shape_str(x.shape()));
    }
    const int64_t d = last_dim(x);
    std::vector<double> v(x.values());
    const auto& bv = bias.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i % d];
    Tensor out(x.shape(), std::move(v));
    wire(out, {x, bias}, [d](TensorNode& o) {
        if (o.parents[0]->requires_grad) {
            auto& g = o.parents[0]->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            auto& g = o.parents[1]->grad_buffer();
            for (size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i];
        }
    });
    return out;
}

Tensor smul(const Tensor& x, double c) {
    std::vector<double> v(x.values());
    for (double& e : v) e *= c;
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [c](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * c;
    });
    return out;
}

Tensor sadd(const Tensor& x, double c) {
    std::vector<double> v(x.values());
    for (double& e : v) e += c;
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
    return out;
}

Tensor neg(const Tensor& x) { return smul(x, -1.0); }

Tensor abs_val(const Tensor& x) {
    std::vector<double> v(x.values());
    for (double& e : v) e = std::abs(e);
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        const auto& xv = o.parents[0]->values;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            // subgradient at 0 taken as 0
            g[i] += o.grad[i] * (xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0));
        }
    });
    return out;
}

Tensor relu(const Tensor& x) {
    std::vector<double> v(x.values());
    for (double& e : v) e = e > 0.0 ? e : 0.0;
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        const auto& xv = o.parents[0]->values;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > 0.0) g[i] += o.grad[i];
        }
    });
    return out;
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> v(x.values());
    for (double& e : v) e = 1.0 / (1.0 + std::exp(-e));
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            const double s = o.values[i];
            g[i] += o.grad[i] * s * (1.0 - s);
        }
    });
    return out;
}

Tensor log_(const Tensor& x) {
    std::vector<double> v(x.values());
    for (double& e : v) e = std::log(e);
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        const auto& xv = o.parents[0]->values;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / xv[i];
    });
    return out;
}

Tensor exp_(const Tensor& x) {
    std::vector<double> v(x.values());
    for (double& e : v) e = std::exp(e);
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.values[i];
    });
    return out;
}

Tensor softmax(const Tensor& x, double temperature) {
    if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be > 0");
    const int64_t d = last_dim(x);
    const int64_t rows = x.numel() / d;
    std::vector<double> v(x.values().size());
    const auto& xv = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t off = r * d;
        double m = xv[off] / temperature;
        for (int64_t j = 1; j < d; ++j) m = std::max(m, xv[off + j] / temperature);
        double z = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double e = std::exp(xv[off + j] / temperature - m);
            v[off + j] = e;
            z += e;
        }
        for (int64_t j = 0; j < d; ++j) v[off + j] /= z;
    }
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [d, rows, temperature](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t off = r * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += o.grad[off + j] * o.values[off + j];
            for (int64_t j = 0; j < d; ++j) {
                g[off + j] += o.values[off + j] * (o.grad[off + j] - dot) / temperature;
            }
        }
    });
    return out;
}

Tensor log_softmax(const Tensor& x, double temperature) {
    if (!(temperature > 0.0)) throw ParameterError("log_softmax temperature must be > 0");
    const int64_t d = last_dim(x);
    const int64_t rows = x.numel() / d;
    std::vector<double> v(x.values().size());
    const auto& xv = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t off = r * d;
        double m = xv[off] / temperature;
        for (int64_t j = 1; j < d; ++j) m = std::max(m, xv[off + j] / temperature);
        double z = 0.0;
        for (int64_t j = 0; j < d; ++j) z += std::exp(xv[off + j] / temperature - m);
        const double lse = m + std::log(z);
        for (int64_t j = 0; j < d; ++j) v[off + j] = xv[off + j] / temperature - lse;
    }
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [d, rows, temperature](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t off = r * d;
            double gsum = 0.0;
            for (int64_t j = 0; j < d; ++j) gsum += o.grad[off + j];
            for (int64_t j = 0; j < d; ++j) {
                const double s = std::exp(o.values[off + j]);
                g[off + j] += (o.grad[off + j] - s * gsum) / temperature;
            }
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (!(eps > 0.0)) throw ParameterError("layer_norm eps must be > 0");
    const int64_t d = last_dim(x);
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                             shape_str(bias.shape()) + " vs trailing axis " + std::to_string(d));
    }
    const int64_t rows = x.numel() / d;
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<double> v(x.values().size());
    std::vector<double> xhat(x.values().size());
    std::vector<double> inv_std(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t off = r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xv[off + j];
        mu /= d;
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = xv[off + j] - mu;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int64_t j = 0; j < d; ++j) {
            const double h = (xv[off + j] - mu) * is;
            xhat[off + j] = h;
            v[off + j] = gv[j] * h + bv[j];
        }
    }
    Tensor out(x.shape(), std::move(v));
    wire(out, {x, gain, bias},
         [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& o) {
             const auto& gv2 = o.parents[1]->values;
             if (o.parents[0]->requires_grad) {
                 auto& gx = o.parents[0]->grad_buffer();
                 for (int64_t r = 0; r < rows; ++r) {
                     const int64_t off = r * d;
                     double mean_gg = 0.0, mean_ggx = 0.0;
                     for (int64_t j = 0; j < d; ++j) {
                         const double gg = o.grad[off + j] * gv2[j];
                         mean_gg += gg;
                         mean_ggx += gg * xhat[off + j];
                     }
                     mean_gg /= d;
                     mean_ggx /= d;
                     for (int64_t j = 0; j < d; ++j) {
                         const double gg = o.grad[off + j] * gv2[j];
                         gx[off + j] += (gg - mean_gg - xhat[off + j] * mean_ggx) * inv_std[r];
                     }
                 }
             }
             if (o.parents[1]->requires_grad) {
                 auto& gg = o.parents[1]->grad_buffer();
                 for (int64_t r = 0; r < rows; ++r) {
                     const int64_t off = r * d;
                     for (int64_t j = 0; j < d; ++j) gg[j] += o.grad[off + j] * xhat[off + j];
                 }
             }
             if (o.parents[2]->requires_grad) {
                 auto& gb = o.parents[2]->grad_buffer();
                 for (int64_t r = 0; r < rows; ++r) {
                     const int64_t off = r * d;
                     for (int64_t j = 0; j < d; ++j) gb[j] += o.grad[off + j];
                 }
             }
         });
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2) {
        throw DimensionError("matmul needs 2-D operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    if (a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> v(static_cast<size_t>(m * n), 0.0);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = pb + p * n;
            double* crow = v.data() + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    Tensor out(Shape{m, n}, std::move(v));
    wire(out, {a, b}, [m, k, n](TensorNode& o) {
        const double* pa2 = o.parents[0]->values.data();
        const double* pb2 = o.parents[1]->values.data();
        const double* g = o.grad.data();
        if (o.parents[0]->requires_grad) {
            double* ga = o.parents[0]->grad_buffer().data();
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t p = 0; p < k; ++p) {
                    const double* grow = g + i * n;
                    const double* brow = pb2 + p * n;
                    double acc = 0.0;
                    for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + p] += acc;
                }
            }
        }
        if (o.parents[1]->requires_grad) {
            double* gb = o.parents[1]->grad_buffer().data();
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t p = 0; p < k; ++p) {
                    const double aip = pa2[i * k + p];
                    if (aip == 0.0) continue;
                    const double* grow = g + i * n;
                    double* gbrow = gb + p * n;
                    for (int64_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
            }
        }
    });
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
    if (a.shape().size() != 3 || b.shape().size() != 3) {
        throw DimensionError("bmm needs 3-D operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const int64_t bs = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
    const int64_t n = trans_b ? b.shape()[1] : b.shape()[2];
    const int64_t bk = trans_b ? b.shape()[2] : b.shape()[1];
    if (b.shape()[0] != bs || bk != k) {
        throw DimensionError("bmm extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + (trans_b ? " (b transposed)" : ""));
    }
    std::vector<double> v(static_cast<size_t>(bs * m * n), 0.0);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (int64_t bi = 0; bi < bs; ++bi) {
        const double* A = pa + bi * m * k;
        const double* B = pb + bi * k * n;
        double* C = v.data() + bi * m * n;
        if (trans_b) {
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t j = 0; j < n; ++j) {
                    const double* arow = A + i * k;
                    const double* brow = B + j * k;
                    double acc = 0.0;
                    for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                    C[i * n + j] = acc;
                }
            }
        } else {
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    if (aip == 0.0) continue;
                    const double* brow = B + p * n;
                    double* crow = C + i * n;
                    for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
                }
            }
        }
    }
    Tensor out(Shape{bs, m, n}, std::move(v));
    wire(out, {a, b}, [bs, m, k, n, trans_b](TensorNode& o) {
        const double* pa2 = o.parents[0]->values.data();
        const double* pb2 = o.parents[1]->values.data();
        const double* g = o.grad.data();
        const bool need_a = o.parents[0]->requires_grad;
        const bool need_b = o.parents[1]->requires_grad;
        double* ga = need_a ? o.parents[0]->grad_buffer().data() : nullptr;
        double* gb = need_b ? o.parents[1]->grad_buffer().data() : nullptr;
        for (int64_t bi = 0; bi < bs; ++bi) {
            const double* A = pa2 + bi * m * k;
            const double* B = pb2 + bi * k * n;
            const double* G = g + bi * m * n;
            if (trans_b) {
                // C = A B^T with B stored [n,k]
                if (need_a) {
                    double* GA = ga + bi * m * k;
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t j = 0; j < n; ++j) {
                            const double gij = G[i * n + j];
                            if (gij == 0.0) continue;
                            const double* brow = B + j * k;
                            double* garow = GA + i * k;
                            for (int64_t p = 0; p < k; ++p) garow[p] += gij * brow[p];
                        }
                    }
                }
                if (need_b) {
                    double* GB = gb + bi * n * k;
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t j = 0; j < n; ++j) {
                            const double gij = G[i * n + j];
                            if (gij == 0.0) continue;
                            const double* arow = A + i * k;
                            double* gbrow = GB + j * k;
                            for (int64_t p = 0; p < k; ++p) gbrow[p] += gij * arow[p];
                        }
                    }
                }
            } else {
                if (need_a) {
                    double* GA = ga + bi * m * k;
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t p = 0; p < k; ++p) {
                            const double* grow = G + i * n;
                            const double* brow = B + p * n;
                            double acc = 0.0;
                            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            GA[i * k + p] += acc;
                        }
                    }
                }
                if (need_b) {
                    double* GB = gb + bi * k * n;
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t p = 0; p < k; ++p) {
                            const double aip = A[i * k + p];
                            if (aip == 0.0) continue;
                            const double* grow = G + i * n;
                            double* gbrow = GB + p * n;
                            for (int64_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.shape().size() != 2) throw DimensionError("transpose needs a 2-D tensor, got " + shape_str(x.shape()));
    const int64_t m = x.shape()[0], n = x.shape()[1];
    std::vector<double> v(x.values().size());
    const auto& xv = x.values();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) v[j * m + i] = xv[i * n + j];
    }
    Tensor out(Shape{n, m}, std::move(v));
    wire(out, {x}, [m, n](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
        }
    });
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel()) {
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                             " changes element count");
    }
    Tensor out(std::move(new_shape), std::vector<double>(x.values()));
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
    return out;
}

Tensor split_heads(const Tensor& x, int64_t batch, int64_t time, int64_t heads) {
    if (x.shape().size() != 2 || x.shape()[0] != batch * time || x.shape()[1] % heads != 0) {
        throw DimensionError("split_heads: " + shape_str(x.shape()) + " with B=" + std::to_string(batch) +
                             " T=" + std::to_string(time) + " H=" + std::to_string(heads));
    }
    const int64_t hd = x.shape()[1] / heads;
    std::vector<double> v(x.values().size());
    const auto& xv = x.values();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < time; ++t)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t c = 0; c < hd; ++c)
                    v[(((b * heads + h) * time) + t) * hd + c] = xv[(b * time + t) * heads * hd + h * hd + c];
    Tensor out(Shape{batch * heads, time, hd}, std::move(v));
    wire(out, {x}, [batch, time, heads, hd](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t t = 0; t < time; ++t)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t c = 0; c < hd; ++c)
                        g[(b * time + t) * heads * hd + h * hd + c] +=
                            o.grad[(((b * heads + h) * time) + t) * hd + c];
    });
    return out;
}

Tensor merge_heads(const Tensor& x, int64_t batch, int64_t time, int64_t heads) {
    if (x.shape().size() != 3 || x.shape()[0] != batch * heads || x.shape()[1] != time) {
        throw DimensionError("merge_heads: " + shape_str(x.shape()) + " with B=" + std::to_string(batch) +
                             " T=" + std::to_string(time) + " H=" + std::to_string(heads));
    }
    const int64_t hd = x.shape()[2];
    std::vector<double> v(x.values().size());
    const auto& xv = x.values();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < time; ++t)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t c = 0; c < hd; ++c)
                    v[(b * time + t) * heads * hd + h * hd + c] = xv[(((b * heads + h) * time) + t) * hd + c];
    Tensor out(Shape{batch * time, heads * hd}, std::move(v));
    wire(out, {x}, [batch, time, heads, hd](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t t = 0; t < time; ++t)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t c = 0; c < hd; ++c)
                        g[(((b * heads + h) * time) + t) * hd + c] +=
                            o.grad[(b * time + t) * heads * hd + h * hd + c];
    });
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw DimensionError("embedding table must be 2-D");
    const int64_t v_size = table.shape()[0], d = table.shape()[1];
    for (int id : ids) {
        if (id < 0 || id >= v_size) {
            throw DimensionError("embedding id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(v_size) + ")");
        }
    }
    const int64_t n = static_cast<int64_t>(ids.size());
    std::vector<double> v(static_cast<size_t>(n * d));
    const auto& tv = table.values();
    for (int64_t i = 0; i < n; ++i) {
        std::copy_n(tv.data() + static_cast<int64_t>(ids[i]) * d, d, v.data() + i * d);
    }
    Tensor out(Shape{n, d}, std::move(v));
    wire(out, {table}, [ids, d](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < ids.size(); ++i) {
            const double* grow = o.grad.data() + static_cast<int64_t>(i) * d;
            double* trow = g.data() + static_cast<int64_t>(ids[i]) * d;
            for (int64_t c = 0; c < d; ++c) trow[c] += grow[c];
        }
    });
    return out;
}

Tensor gather_last(const Tensor& x, const std::vector<int>& ids) {
    if (x.shape().size() != 2) throw DimensionError("gather_last needs a 2-D tensor");
    const int64_t n = x.shape()[0], d = x.shape()[1];
    if (static_cast<int64_t>(ids.size()) != n) {
        throw DimensionError("gather_last: " + std::to_string(ids.size()) + " ids for " +
                             std::to_string(n) + " rows");
    }
    for (int id : ids) {
        if (id < 0 || id >= d) {
            throw DimensionError("gather_last id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(d) + ")");
        }
    }
    std::vector<double> v(static_cast<size_t>(n));
    const auto& xv = x.values();
    for (int64_t i = 0; i < n; ++i) v[i] = xv[i * d + ids[i]];
    Tensor out(Shape{n}, std::move(v));
    wire(out, {x}, [ids, d](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < ids.size(); ++i) g[static_cast<int64_t>(i) * d + ids[i]] += o.grad[i];
    });
    return out;
}

Tensor masked_fill(const Tensor& x, const std::vector<uint8_t>& keep, double fill_value) {
    if (static_cast<int64_t>(keep.size()) != x.numel()) {
        throw DimensionError("masked_fill: mask of " + std::to_string(keep.size()) + " entries for " +
                             shape_str(x.shape()));
    }
    std::vector<double> v(x.values());
    for (size_t i = 0; i < v.size(); ++i) {
        if (!keep[i]) v[i] = fill_value;
    }
    Tensor out(x.shape(), std::move(v));
    wire(out, {x}, [keep](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            if (keep[i]) g[i] += o.grad[i];
        }
    });
    return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.shape().size() != 2 || s.numel() != x.shape()[0]) {
        throw DimensionError("scale_rows: " + shape_str(x.shape()) + " with " + std::to_string(s.numel()) +
                             " scales");
    }
    const int64_t n = x.shape()[0], d = x.shape()[1];
    std::vector<double> v(x.values());
    const auto& sv = s.values();
    for (int64_t i = 0; i < n; ++i) {
        const double si = sv[i];
        for (int64_t j = 0; j < d; ++j) v[i * d + j] *= si;
    }
    Tensor out(x.shape(), std::move(v));
    wire(out, {x, s}, [n, d](TensorNode& o) {
        const auto& xv = o.parents[0]->values;
        const auto& sv2 = o.parents[1]->values;
        if (o.parents[0]->requires_grad) {
            auto& g = o.parents[0]->grad_buffer();
            for (int64_t i = 0; i < n; ++i) {
                const double si = sv2[i];
                for (int64_t j = 0; j < d; ++j) g[i * d + j] += o.grad[i * d + j] * si;
            }
        }
        if (o.parents[1]->requires_grad) {
            auto& g = o.parents[1]->grad_buffer();
            for (int64_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < d; ++j) acc += o.grad[i * d + j] * xv[i * d + j];
                g[i] += acc;
            }
        }
    });
    return out;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    wire(out, {x}, [](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (double& e : g) e += o.grad[0];
    });
    return out;
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    const double inv_n = 1.0 / static_cast<double>(x.numel());
    Tensor out = Tensor::scalar(acc * inv_n);
    wire(out, {x}, [inv_n](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (double& e : g) e += o.grad[0] * inv_n;
    });
    return out;
}

Tensor sum_last(const Tensor& x) {
    const int64_t d = last_dim(x);
    const int64_t rows = x.numel() / d;
    std::vector<double> v(static_cast<size_t>(rows), 0.0);
    const auto& xv = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j) acc += xv[r * d + j];
        v[r] = acc;
    }
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    Tensor out(std::move(out_shape), std::move(v));
    wire(out, {x}, [d, rows](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        auto& g = o.parents[0]->grad_buffer();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < d; ++j) g[r * d + j] += o.grad[r];
        }
    });
    return out;
}

int64_t argmax_row(const Tensor& x, int64_t row) {
    const int64_t d = last_dim(x);
    const auto& v = x.values();
    int64_t best = 0;
    double best_v = v[row * d];
    for (int64_t j = 1; j < d; ++j) {
        if (v[row * d + j] > best_v) {
            best_v = v[row * d + j];
            best = j;
        }
    }
    return best;
}

}  // namespace clsr
