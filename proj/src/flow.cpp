#include "flowprior/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "flowprior/common.hpp"

namespace flowprior {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double floored_scale(double s, double eps) {
    // Sign-preserving magnitude floor; an exact |s| >= eps passes through.
    double sign = (s < 0.0) ? -1.0 : 1.0;
    return std::fabs(s) >= eps ? s : sign * eps;
}

struct Split {
    int cond_off, cond_len, act_off, act_len;
};

Split coupling_split(int n, bool swap_halves) {
    int c = n / 2;
    if (!swap_halves) return {0, c, c, n - c};
    return {c, n - c, 0, c};
}

std::vector<int> invert_perm(const std::vector<int>& p) {
    std::vector<int> inv(p.size());
    for (size_t i = 0; i < p.size(); ++i) inv[static_cast<size_t>(p[i])] = static_cast<int>(i);
    return inv;
}

// y[j] = sum_{i<=j} U(i,j) w[i]  (U^T w, U upper triangular)
Vector upper_tmatvec(const Matrix& U, const Vector& w) {
    int n = U.rows;
    Vector y(static_cast<size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i <= j; ++i) s += U(i, j) * w[static_cast<size_t>(i)];
        y[static_cast<size_t>(j)] = s;
    }
    return y;
}

// y[j] = w[j] + sum_{i>j} L(i,j) w[i]  (L^T w, L unit lower triangular)
Vector unit_lower_tmatvec(const Matrix& L, const Vector& w) {
    int n = L.rows;
    Vector y(static_cast<size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        double s = w[static_cast<size_t>(j)];
        for (int i = j + 1; i < n; ++i) s += L(i, j) * w[static_cast<size_t>(i)];
        y[static_cast<size_t>(j)] = s;
    }
    return y;
}

Vector upper_matvec(const Matrix& U, const Vector& x) {
    int n = U.rows;
    Vector y(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = i; j < n; ++j) s += U(i, j) * x[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = s;
    }
    return y;
}

Vector unit_lower_matvec(const Matrix& L, const Vector& x) {
    int n = L.rows;
    Vector y(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double s = x[static_cast<size_t>(i)];
        for (int j = 0; j < i; ++j) s += L(i, j) * x[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = s;
    }
    return y;
}

// Solve L v = u (unit lower).
Vector unit_lower_solve(const Matrix& L, const Vector& u) {
    int n = L.rows;
    Vector v(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double s = u[static_cast<size_t>(i)];
        for (int j = 0; j < i; ++j) s -= L(i, j) * v[static_cast<size_t>(j)];
        v[static_cast<size_t>(i)] = s;
    }
    return v;
}

// Solve U x = v (upper).
Vector upper_solve(const Matrix& U, const Vector& v) {
    int n = U.rows;
    Vector x(static_cast<size_t>(n), 0.0);
    for (int i = n - 1; i >= 0; --i) {
        double s = v[static_cast<size_t>(i)];
        for (int j = i + 1; j < n; ++j) s -= U(i, j) * x[static_cast<size_t>(j)];
        x[static_cast<size_t>(i)] = s / U(i, i);
    }
    return x;
}

// Solve U^T w = g (forward substitution).
Vector upper_tsolve(const Matrix& U, const Vector& g) {
    int n = U.rows;
    Vector w(static_cast<size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        double s = g[static_cast<size_t>(j)];
        for (int i = 0; i < j; ++i) s -= U(i, j) * w[static_cast<size_t>(i)];
        w[static_cast<size_t>(j)] = s / U(j, j);
    }
    return w;
}

// Solve L^T w = g (back substitution, unit diagonal).
Vector unit_lower_tsolve(const Matrix& L, const Vector& g) {
    int n = L.rows;
    Vector w(static_cast<size_t>(n), 0.0);
    for (int j = n - 1; j >= 0; --j) {
        double s = g[static_cast<size_t>(j)];
        for (int i = j + 1; i < n; ++i) s -= L(i, j) * w[static_cast<size_t>(i)];
        w[static_cast<size_t>(j)] = s;
    }
    return w;
}

}  // namespace

// ---------------------------------------------------------------- Mlp

Mlp Mlp::identity_init(int in, int hidden, int out, RngStream& rng) {
    Mlp m;
    m.in = in;
    m.hidden = hidden;
    m.out = out;
    m.w1 = Matrix(hidden, in);
    m.w2 = Matrix(hidden, hidden);
    m.w3 = Matrix(out, hidden);  // zero: fresh layer is the identity map
    m.b1.assign(static_cast<size_t>(hidden), 0.0);
    m.b2.assign(static_cast<size_t>(hidden), 0.0);
    m.b3.assign(static_cast<size_t>(out), 0.0);
    double sd1 = 1.0 / std::sqrt(static_cast<double>(in));
    double sd2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (double& v : m.w1.a) v = sd1 * rng.next_normal();
    for (double& v : m.w2.a) v = sd2 * rng.next_normal();
    return m;
}

Vector Mlp::eval(const Vector& x, Cache* cache) const {
    Vector z1 = matvec(w1, x);
    for (int i = 0; i < hidden; ++i) z1[static_cast<size_t>(i)] += b1[static_cast<size_t>(i)];
    Vector h1(static_cast<size_t>(hidden));
    for (int i = 0; i < hidden; ++i) h1[static_cast<size_t>(i)] = std::tanh(z1[static_cast<size_t>(i)]);
    Vector z2 = matvec(w2, h1);
    for (int i = 0; i < hidden; ++i) z2[static_cast<size_t>(i)] += b2[static_cast<size_t>(i)];
    Vector h2(static_cast<size_t>(hidden));
    for (int i = 0; i < hidden; ++i) h2[static_cast<size_t>(i)] = std::tanh(z2[static_cast<size_t>(i)]);
    Vector o = matvec(w3, h2);
    for (int i = 0; i < out; ++i) o[static_cast<size_t>(i)] += b3[static_cast<size_t>(i)];
    if (cache) {
        cache->x = x;
        cache->h1 = h1;
        cache->h2 = std::move(h2);
        cache->o = o;
    }
    return o;
}

Vector Mlp::vjp(const Cache& cache, const Vector& go, double* pg) const {
    Vector gh2 = tmatvec(w3, go);
    Vector gz2(static_cast<size_t>(hidden));
    for (int i = 0; i < hidden; ++i) {
        double h = cache.h2[static_cast<size_t>(i)];
        gz2[static_cast<size_t>(i)] = gh2[static_cast<size_t>(i)] * (1.0 - h * h);
    }
    Vector gh1 = tmatvec(w2, gz2);
    Vector gz1(static_cast<size_t>(hidden));
    for (int i = 0; i < hidden; ++i) {
        double h = cache.h1[static_cast<size_t>(i)];
        gz1[static_cast<size_t>(i)] = gh1[static_cast<size_t>(i)] * (1.0 - h * h);
    }
    Vector gx = tmatvec(w1, gz1);
    if (pg) {
        double* p = pg;
        for (int i = 0; i < hidden; ++i)
            for (int j = 0; j < in; ++j) *p++ += gz1[static_cast<size_t>(i)] * cache.x[static_cast<size_t>(j)];
        for (int i = 0; i < hidden; ++i) *p++ += gz1[static_cast<size_t>(i)];
        for (int i = 0; i < hidden; ++i)
            for (int j = 0; j < hidden; ++j) *p++ += gz2[static_cast<size_t>(i)] * cache.h1[static_cast<size_t>(j)];
        for (int i = 0; i < hidden; ++i) *p++ += gz2[static_cast<size_t>(i)];
        for (int i = 0; i < out; ++i)
            for (int j = 0; j < hidden; ++j) *p++ += go[static_cast<size_t>(i)] * cache.h2[static_cast<size_t>(j)];
        for (int i = 0; i < out; ++i) *p++ += go[static_cast<size_t>(i)];
    }
    return gx;
}

Vector Mlp::jvp(const Cache& cache, const Vector& dx) const {
    Vector dz1 = matvec(w1, dx);
    for (int i = 0; i < hidden; ++i) {
        double h = cache.h1[static_cast<size_t>(i)];
        dz1[static_cast<size_t>(i)] *= (1.0 - h * h);
    }
    Vector dz2 = matvec(w2, dz1);
    for (int i = 0; i < hidden; ++i) {
        double h = cache.h2[static_cast<size_t>(i)];
        dz2[static_cast<size_t>(i)] *= (1.0 - h * h);
    }
    return matvec(w3, dz2);
}

// ---------------------------------------------------------------- stack construction

namespace {

std::vector<int> interleave_perm(int n) {
    if (n == 2) return {1, 0};
    std::vector<int> p(static_cast<size_t>(n));
    int half = (n + 1) / 2;
    for (int i = 0; i < n; ++i)
        p[static_cast<size_t>(i)] = (i < half) ? 2 * i : 2 * (i - half) + 1;
    return p;
}

Mixing make_lu_mixing(int n, RngStream& rng) {
    Mixing mix;
    mix.learned = true;
    Matrix w0 = random_orthogonal(n, rng);
    std::vector<int> rowperm;
    plu(w0, rowperm, mix.lower, mix.upper);
    // plu gives P_rows * w0 = L U with (P_rows v)_i = v[rowperm[i]], so
    // w0 x = P_rows^T (L U x); our forward gather must invert rowperm.
    mix.perm = invert_perm(rowperm);
    return mix;
}

}  // namespace

FlowStack make_flow_stack(int n, int steps, RngStream& rng, MixingKind mixing,
                          double activation_clip, int hidden_multiplier) {
    if (n < 2) throw NumericError("make_flow_stack: dimension must be >= 2");
    if (steps < 1) throw NumericError("make_flow_stack: need at least one step");
    FlowStack G;
    G.dim = n;
    G.activation_clip = activation_clip;
    int hidden = hidden_multiplier * n;
    for (int s = 0; s < steps; ++s) {
        ActNorm an;
        an.scale.assign(static_cast<size_t>(n), 1.0);
        an.bias.assign(static_cast<size_t>(n), 0.0);
        G.layers.emplace_back(std::move(an));

        if (mixing == MixingKind::permutation) {
            Mixing mix;
            mix.perm = interleave_perm(n);
            G.layers.emplace_back(std::move(mix));
        } else {
            G.layers.emplace_back(make_lu_mixing(n, rng));
        }

        Coupling cp;
        cp.swap_halves = (s % 2 == 1);
        Split sp = coupling_split(n, cp.swap_halves);
        cp.net = Mlp::identity_init(sp.cond_len, hidden, 2 * sp.act_len, rng);
        G.layers.emplace_back(std::move(cp));
    }
    return G;
}

// ---------------------------------------------------------------- passes

namespace {

struct LayerFwdCache {
    Vector in;                       // forward input (post-clip boundary)
    std::vector<uint8_t> clip_mask;  // on this layer's raw forward output
    Mlp::Cache mlp;                  // coupling
    Vector s_hat, exp_s, xa;         // coupling
    std::vector<uint8_t> squash_mask;
};

struct LayerInvCache {
    Vector in;                       // inverse input
    Vector out_pre;                  // raw inverse output before clipping
    std::vector<uint8_t> clip_mask;  // on the raw inverse output
    Mlp::Cache mlp;                  // coupling, evaluated at the passive half
    Vector s_hat, exp_neg_s;         // coupling
    std::vector<uint8_t> squash_mask;
    Vector v;                        // LU mixing: L^{-1} P^T y
};

void clip_in_place(Vector& a, double clip, std::vector<uint8_t>* mask, long& events,
                   int layer_index, const char* dir) {
    if (mask) mask->assign(a.size(), 1);
    for (size_t i = 0; i < a.size(); ++i) {
        double v = a[i];
        if (std::isnan(v))
            throw NumericError(std::string("flow ") + dir + ": non-finite activation at layer " +
                               std::to_string(layer_index));
        if (v > clip) {
            a[i] = clip;
            ++events;
            if (mask) (*mask)[i] = 0;
        } else if (v < -clip) {
            a[i] = -clip;
            ++events;
            if (mask) (*mask)[i] = 0;
        }
    }
}

Vector layer_forward(const Layer& layer, const Vector& x, double* logdet, LayerFwdCache* cache) {
    return std::visit(
        [&](const auto& l) -> Vector {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ActNorm>) {
                Vector y(x.size());
                double ld = 0.0;
                for (size_t i = 0; i < x.size(); ++i) {
                    double st = floored_scale(l.scale[i], l.epsilon);
                    y[i] = st * x[i] + l.bias[i];
                    ld += std::log(std::fabs(st));
                }
                if (logdet) *logdet += ld;
                return y;
            } else if constexpr (std::is_same_v<T, Coupling>) {
                int n = static_cast<int>(x.size());
                Split sp = coupling_split(n, l.swap_halves);
                Vector xc(x.begin() + sp.cond_off, x.begin() + sp.cond_off + sp.cond_len);
                Vector o = l.net.eval(xc, cache ? &cache->mlp : nullptr);
                Vector y = x;
                double ld = 0.0;
                if (cache) {
                    cache->s_hat.resize(static_cast<size_t>(sp.act_len));
                    cache->exp_s.resize(static_cast<size_t>(sp.act_len));
                    cache->xa.assign(x.begin() + sp.act_off, x.begin() + sp.act_off + sp.act_len);
                    cache->squash_mask.assign(static_cast<size_t>(sp.act_len), 1);
                }
                for (int i = 0; i < sp.act_len; ++i) {
                    double sr = o[static_cast<size_t>(i)];
                    bool inside = std::fabs(sr) <= l.squash_bound;
                    double sh = std::clamp(sr, -l.squash_bound, l.squash_bound);
                    double es = std::exp(sh);
                    double t = o[static_cast<size_t>(sp.act_len + i)];
                    y[static_cast<size_t>(sp.act_off + i)] = x[static_cast<size_t>(sp.act_off + i)] * es + t;
                    ld += sh;
                    if (cache) {
                        cache->s_hat[static_cast<size_t>(i)] = sh;
                        cache->exp_s[static_cast<size_t>(i)] = es;
                        cache->squash_mask[static_cast<size_t>(i)] = inside ? 1 : 0;
                    }
                }
                if (logdet) *logdet += ld;
                return y;
            } else {
                if (!l.learned) {
                    Vector y(x.size());
                    for (size_t i = 0; i < x.size(); ++i)
                        y[i] = x[static_cast<size_t>(l.perm[i])];
                    return y;
                }
                Vector t1 = upper_matvec(l.upper, x);
                Vector t2 = unit_lower_matvec(l.lower, t1);
                Vector y(x.size());
                for (size_t i = 0; i < x.size(); ++i)
                    y[i] = t2[static_cast<size_t>(l.perm[i])];
                if (logdet) {
                    double ld = 0.0;
                    for (int i = 0; i < l.upper.rows; ++i) ld += std::log(std::fabs(l.upper(i, i)));
                    *logdet += ld;
                }
                return y;
            }
        },
        layer);
}

Vector layer_inverse(const Layer& layer, const Vector& y, double* logdet, LayerInvCache* cache) {
    return std::visit(
        [&](const auto& l) -> Vector {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ActNorm>) {
                Vector x(y.size());
                double ld = 0.0;
                for (size_t i = 0; i < y.size(); ++i) {
                    double st = floored_scale(l.scale[i], l.epsilon);
                    x[i] = (y[i] - l.bias[i]) / st;
                    ld += std::log(std::fabs(st));
                }
                if (logdet) *logdet += ld;
                return x;
            } else if constexpr (std::is_same_v<T, Coupling>) {
                int n = static_cast<int>(y.size());
                Split sp = coupling_split(n, l.swap_halves);
                Vector yc(y.begin() + sp.cond_off, y.begin() + sp.cond_off + sp.cond_len);
                Vector o = l.net.eval(yc, cache ? &cache->mlp : nullptr);
                Vector x = y;
                double ld = 0.0;
                if (cache) {
                    cache->s_hat.resize(static_cast<size_t>(sp.act_len));
                    cache->exp_neg_s.resize(static_cast<size_t>(sp.act_len));
                    cache->squash_mask.assign(static_cast<size_t>(sp.act_len), 1);
                }
                for (int i = 0; i < sp.act_len; ++i) {
                    double sr = o[static_cast<size_t>(i)];
                    bool inside = std::fabs(sr) <= l.squash_bound;
                    double sh = std::clamp(sr, -l.squash_bound, l.squash_bound);
                    double ens = std::exp(-sh);
                    double t = o[static_cast<size_t>(sp.act_len + i)];
                    x[static_cast<size_t>(sp.act_off + i)] =
                        (y[static_cast<size_t>(sp.act_off + i)] - t) * ens;
                    ld += sh;
                    if (cache) {
                        cache->s_hat[static_cast<size_t>(i)] = sh;
                        cache->exp_neg_s[static_cast<size_t>(i)] = ens;
                        cache->squash_mask[static_cast<size_t>(i)] = inside ? 1 : 0;
                    }
                }
                if (logdet) *logdet += ld;
                return x;
            } else {
                if (!l.learned) {
                    Vector x(y.size());
                    for (size_t i = 0; i < y.size(); ++i)
                        x[static_cast<size_t>(l.perm[i])] = y[i];
                    return x;
                }
                Vector u(y.size());
                for (size_t i = 0; i < y.size(); ++i)
                    u[static_cast<size_t>(l.perm[i])] = y[i];
                Vector v = unit_lower_solve(l.lower, u);
                Vector x = upper_solve(l.upper, v);
                if (cache) cache->v = v;
                if (logdet) {
                    double ld = 0.0;
                    for (int i = 0; i < l.upper.rows; ++i) ld += std::log(std::fabs(l.upper(i, i)));
                    *logdet += ld;
                }
                return x;
            }
        },
        layer);
}

FlowLogDetResult run_forward(const FlowStack& G, const Vector& z, bool want_logdet,
                             std::vector<LayerFwdCache>* caches) {
    if (static_cast<int>(z.size()) != G.dim)
        throw NumericError("flow forward: input dimension mismatch");
    if (!all_finite(z)) throw NumericError("flow forward: non-finite input");
    FlowLogDetResult r;
    r.value = z;
    if (caches) caches->resize(G.layers.size());
    for (size_t k = 0; k < G.layers.size(); ++k) {
        LayerFwdCache* c = caches ? &(*caches)[k] : nullptr;
        if (c) c->in = r.value;
        Vector out = layer_forward(G.layers[k], r.value, want_logdet ? &r.log_det : nullptr, c);
        clip_in_place(out, G.activation_clip, c ? &c->clip_mask : nullptr, r.clip_events,
                      static_cast<int>(k), "forward");
        r.value = std::move(out);
    }
    return r;
}

FlowLogDetResult run_inverse(const FlowStack& G, const Vector& x, bool want_logdet,
                             std::vector<LayerInvCache>* caches) {
    if (static_cast<int>(x.size()) != G.dim)
        throw NumericError("flow inverse: input dimension mismatch");
    if (!all_finite(x)) throw NumericError("flow inverse: non-finite input");
    FlowLogDetResult r;
    r.value = x;
    if (caches) caches->resize(G.layers.size());
    for (size_t idx = G.layers.size(); idx-- > 0;) {
        LayerInvCache* c = caches ? &(*caches)[idx] : nullptr;
        if (c) c->in = r.value;
        Vector out = layer_inverse(G.layers[idx], r.value, want_logdet ? &r.log_det : nullptr, c);
        if (c) c->out_pre = out;
        clip_in_place(out, G.activation_clip, c ? &c->clip_mask : nullptr, r.clip_events,
                      static_cast<int>(idx), "inverse");
        r.value = std::move(out);
    }
    return r;
}

// Cotangent of the forward map: g_in = (d layer_forward / d in)^T g_out.
Vector layer_fwd_vjp(const Layer& layer, const LayerFwdCache& cache, const Vector& g) {
    return std::visit(
        [&](const auto& l) -> Vector {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ActNorm>) {
                Vector gx(g.size());
                for (size_t i = 0; i < g.size(); ++i)
                    gx[i] = floored_scale(l.scale[i], l.epsilon) * g[i];
                return gx;
            } else if constexpr (std::is_same_v<T, Coupling>) {
                int n = static_cast<int>(g.size());
                Split sp = coupling_split(n, l.swap_halves);
                Vector up(static_cast<size_t>(2 * sp.act_len), 0.0);
                Vector gx = g;
                for (int i = 0; i < sp.act_len; ++i) {
                    double ga = g[static_cast<size_t>(sp.act_off + i)];
                    double es = cache.exp_s[static_cast<size_t>(i)];
                    gx[static_cast<size_t>(sp.act_off + i)] = es * ga;
                    up[static_cast<size_t>(i)] = cache.squash_mask[static_cast<size_t>(i)]
                                                     ? cache.xa[static_cast<size_t>(i)] * es * ga
                                                     : 0.0;
                    up[static_cast<size_t>(sp.act_len + i)] = ga;
                }
                Vector gc = l.net.vjp(cache.mlp, up, nullptr);
                for (int i = 0; i < sp.cond_len; ++i)
                    gx[static_cast<size_t>(sp.cond_off + i)] += gc[static_cast<size_t>(i)];
                return gx;
            } else {
                if (!l.learned) {
                    Vector gx(g.size(), 0.0);
                    for (size_t i = 0; i < g.size(); ++i)
                        gx[static_cast<size_t>(l.perm[i])] = g[i];
                    return gx;
                }
                Vector t(g.size(), 0.0);
                for (size_t i = 0; i < g.size(); ++i)
                    t[static_cast<size_t>(l.perm[i])] = g[i];
                Vector s = unit_lower_tmatvec(l.lower, t);
                return upper_tmatvec(l.upper, s);
            }
        },
        layer);
}

// Forward-mode tangent through one layer.
Vector layer_jvp(const Layer& layer, const LayerFwdCache& cache, const Vector& d) {
    return std::visit(
        [&](const auto& l) -> Vector {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ActNorm>) {
                Vector dy(d.size());
                for (size_t i = 0; i < d.size(); ++i)
                    dy[i] = floored_scale(l.scale[i], l.epsilon) * d[i];
                return dy;
            } else if constexpr (std::is_same_v<T, Coupling>) {
                int n = static_cast<int>(d.size());
                Split sp = coupling_split(n, l.swap_halves);
                Vector dc(d.begin() + sp.cond_off, d.begin() + sp.cond_off + sp.cond_len);
                Vector dout = l.net.jvp(cache.mlp, dc);
                Vector dy = d;
                for (int i = 0; i < sp.act_len; ++i) {
                    double ds = cache.squash_mask[static_cast<size_t>(i)]
                                    ? dout[static_cast<size_t>(i)]
                                    : 0.0;
                    double dt = dout[static_cast<size_t>(sp.act_len + i)];
                    double es = cache.exp_s[static_cast<size_t>(i)];
                    dy[static_cast<size_t>(sp.act_off + i)] =
                        d[static_cast<size_t>(sp.act_off + i)] * es +
                        cache.xa[static_cast<size_t>(i)] * es * ds + dt;
                }
                return dy;
            } else {
                if (!l.learned) {
                    Vector dy(d.size());
                    for (size_t i = 0; i < d.size(); ++i)
                        dy[i] = d[static_cast<size_t>(l.perm[i])];
                    return dy;
                }
                Vector t1 = upper_matvec(l.upper, d);
                Vector t2 = unit_lower_matvec(l.lower, t1);
                Vector dy(d.size());
                for (size_t i = 0; i < d.size(); ++i)
                    dy[i] = t2[static_cast<size_t>(l.perm[i])];
                return dy;
            }
        },
        layer);
}

}  // namespace

FlowResult forward(const FlowStack& G, const Vector& z) {
    FlowLogDetResult r = run_forward(G, z, false, nullptr);
    return FlowResult{std::move(r.value), r.clip_events};
}

FlowResult inverse(const FlowStack& G, const Vector& x) {
    FlowLogDetResult r = run_inverse(G, x, false, nullptr);
    return FlowResult{std::move(r.value), r.clip_events};
}

FlowLogDetResult forward_with_logdet(const FlowStack& G, const Vector& z) {
    return run_forward(G, z, true, nullptr);
}

FlowLogDetResult inverse_with_logdet(const FlowStack& G, const Vector& x) {
    return run_inverse(G, x, true, nullptr);
}

double log_det(const FlowStack& G, const Vector& z) { return run_forward(G, z, true, nullptr).log_det; }

double log_prob(const FlowStack& G, const Vector& x) {
    FlowLogDetResult r = run_inverse(G, x, true, nullptr);
    return -0.5 * G.dim * kLog2Pi - 0.5 * dot(r.value, r.value) - r.log_det;
}

Vector grad_data_fit(const FlowStack& G, const Vector& z, const MeasurementOperator& op,
                     const Vector& y, double gamma, long* clip_events) {
    if (op.n != G.dim) throw NumericError("grad_data_fit: operator dimension mismatch");
    if (static_cast<int>(y.size()) != op.out_dim())
        throw NumericError("grad_data_fit: measurement dimension mismatch");
    std::vector<LayerFwdCache> caches;
    FlowLogDetResult fr = run_forward(G, z, false, &caches);
    if (clip_events) *clip_events = fr.clip_events;
    Vector r = op.apply(fr.value);
    for (size_t i = 0; i < r.size(); ++i) r[i] -= y[i];
    Vector g = op.apply_transpose(r);
    for (double& v : g) v *= 2.0;
    for (size_t k = G.layers.size(); k-- > 0;) {
        const LayerFwdCache& c = caches[k];
        for (size_t i = 0; i < g.size(); ++i)
            if (!c.clip_mask[i]) g[i] = 0.0;
        g = layer_fwd_vjp(G.layers[k], c, g);
        if (!all_finite(g))
            throw NumericError("grad_data_fit: non-finite gradient at layer " + std::to_string(k));
    }
    for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * gamma * z[i];
    return g;
}

Vector forward_jvp(const FlowStack& G, const Vector& z, const Vector& dz) {
    std::vector<LayerFwdCache> caches;
    run_forward(G, z, false, &caches);
    Vector d = dz;
    for (size_t k = 0; k < G.layers.size(); ++k) {
        d = layer_jvp(G.layers[k], caches[k], d);
        for (size_t i = 0; i < d.size(); ++i)
            if (!caches[k].clip_mask[i]) d[i] = 0.0;
    }
    return d;
}

Vector jacobian_singular_values(const FlowStack& G, const Vector& z) {
    if (G.dim > 512) throw NumericError("jacobian_singular_values: dimension too large");
    std::vector<LayerFwdCache> caches;
    run_forward(G, z, false, &caches);
    Matrix J(G.dim, G.dim);
    Vector d(static_cast<size_t>(G.dim), 0.0);
    for (int j = 0; j < G.dim; ++j) {
        std::fill(d.begin(), d.end(), 0.0);
        d[static_cast<size_t>(j)] = 1.0;
        Vector col = d;
        for (size_t k = 0; k < G.layers.size(); ++k) {
            col = layer_jvp(G.layers[k], caches[k], col);
            for (size_t i = 0; i < col.size(); ++i)
                if (!caches[k].clip_mask[i]) col[i] = 0.0;
        }
        for (int i = 0; i < G.dim; ++i) J(i, j) = col[static_cast<size_t>(i)];
    }
    return svd(J).sigma;
}

// ---------------------------------------------------------------- trainables

namespace {

int layer_trainable_count(const Layer& layer) {
    return std::visit(
        [](const auto& l) -> int {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ActNorm>) {
                return 2 * static_cast<int>(l.scale.size());
            } else if constexpr (std::is_same_v<T, Coupling>) {
                return l.net.trainable_count();
            } else {
                if (!l.learned) return 0;
                int n = l.lower.rows;
                return n * n;  // strict lower of L + upper (incl. diag) of U
            }
        },
        layer);
}

}  // namespace

int trainable_count(const FlowStack& G) {
    int total = 0;
    for (const Layer& l : G.layers) total += layer_trainable_count(l);
    return total;
}

Vector get_trainable(const FlowStack& G) {
    Vector out;
    out.reserve(static_cast<size_t>(trainable_count(G)));
    for (const Layer& layer : G.layers) {
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, ActNorm>) {
                    out.insert(out.end(), l.scale.begin(), l.scale.end());
                    out.insert(out.end(), l.bias.begin(), l.bias.end());
                } else if constexpr (std::is_same_v<T, Coupling>) {
                    out.insert(out.end(), l.net.w1.a.begin(), l.net.w1.a.end());
                    out.insert(out.end(), l.net.b1.begin(), l.net.b1.end());
                    out.insert(out.end(), l.net.w2.a.begin(), l.net.w2.a.end());
                    out.insert(out.end(), l.net.b2.begin(), l.net.b2.end());
                    out.insert(out.end(), l.net.w3.a.begin(), l.net.w3.a.end());
                    out.insert(out.end(), l.net.b3.begin(), l.net.b3.end());
                } else {
                    if (!l.learned) return;
                    int n = l.lower.rows;
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < i; ++j) out.push_back(l.lower(i, j));
                    for (int i = 0; i < n; ++i)
                        for (int j = i; j < n; ++j) out.push_back(l.upper(i, j));
                }
            },
            layer);
    }
    return out;
}

void set_trainable(FlowStack& G, const Vector& params) {
    if (static_cast<int>(params.size()) != trainable_count(G))
        throw NumericError("set_trainable: parameter count mismatch");
    size_t p = 0;
    for (Layer& layer : G.layers) {
        std::visit(
            [&](auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, ActNorm>) {
                    for (double& v : l.scale) v = params[p++];
                    for (double& v : l.bias) v = params[p++];
                } else if constexpr (std::is_same_v<T, Coupling>) {
                    for (double& v : l.net.w1.a) v = params[p++];
                    for (double& v : l.net.b1) v = params[p++];
                    for (double& v : l.net.w2.a) v = params[p++];
                    for (double& v : l.net.b2) v = params[p++];
                    for (double& v : l.net.w3.a) v = params[p++];
                    for (double& v : l.net.b3) v = params[p++];
                } else {
                    if (!l.learned) return;
                    int n = l.lower.rows;
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < i; ++j) l.lower(i, j) = params[p++];
                    for (int i = 0; i < n; ++i)
                        for (int j = i; j < n; ++j) l.upper(i, j) = params[p++];
                }
            },
            layer);
    }
}

namespace {

// Training-direction cotangent through one inverse step, with the forward
// log-det contribution (weight +1 in the NLL) folded in. g arrives with the
// output clip mask already applied and refers to the raw inverse output.
Vector layer_inv_vjp_train(const Layer& layer, const LayerInvCache& cache, const Vector& g,
                           double* pg) {
    return std::visit(
        [&](const auto& l) -> Vector {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ActNorm>) {
                int n = static_cast<int>(g.size());
                Vector gy(g.size());
                for (int i = 0; i < n; ++i) {
                    size_t si = static_cast<size_t>(i);
                    double st = floored_scale(l.scale[si], l.epsilon);
                    gy[si] = g[si] / st;
                    if (pg) {
                        bool live = std::fabs(l.scale[si]) >= l.epsilon;
                        if (live)
                            pg[i] += 1.0 / st - cache.out_pre[si] * g[si] / st;
                        pg[n + i] += -g[si] / st;
                    }
                }
                return gy;
            } else if constexpr (std::is_same_v<T, Coupling>) {
                int n = static_cast<int>(g.size());
                Split sp = coupling_split(n, l.swap_halves);
                Vector up(static_cast<size_t>(2 * sp.act_len), 0.0);
                Vector gy = g;
                for (int i = 0; i < sp.act_len; ++i) {
                    size_t ai = static_cast<size_t>(sp.act_off + i);
                    double ga = g[ai];
                    double ens = cache.exp_neg_s[static_cast<size_t>(i)];
                    double xa = cache.out_pre[ai];
                    // +1 from the log-det, -xa*ga from the exp(-s) path
                    up[static_cast<size_t>(i)] = cache.squash_mask[static_cast<size_t>(i)]
                                                     ? (1.0 - xa * ga)
                                                     : 0.0;
                    up[static_cast<size_t>(sp.act_len + i)] = -ens * ga;
                    gy[ai] = ens * ga;
                }
                Vector gc = l.net.vjp(cache.mlp, up, pg);
                for (int i = 0; i < sp.cond_len; ++i)
                    gy[static_cast<size_t>(sp.cond_off + i)] += gc[static_cast<size_t>(i)];
                return gy;
            } else {
                if (!l.learned) {
                    Vector gy(g.size());
                    for (size_t i = 0; i < g.size(); ++i)
                        gy[i] = g[static_cast<size_t>(l.perm[i])];
                    return gy;
                }
                int n = l.lower.rows;
                Vector gv = upper_tsolve(l.upper, g);
                Vector gu = unit_lower_tsolve(l.lower, gv);
                if (pg) {
                    double* pl = pg;
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < i; ++j)
                            *pl++ += -gu[static_cast<size_t>(i)] * cache.v[static_cast<size_t>(j)];
                    for (int i = 0; i < n; ++i)
                        for (int j = i; j < n; ++j) {
                            double val = -gv[static_cast<size_t>(i)] * cache.out_pre[static_cast<size_t>(j)];
                            if (j == i) val += 1.0 / l.upper(i, i);  // log|U_ii| term
                            *pl++ += val;
                        }
                }
                Vector gy(g.size());
                for (size_t i = 0; i < g.size(); ++i)
                    gy[i] = gu[static_cast<size_t>(l.perm[i])];
                return gy;
            }
        },
        layer);
}

}  // namespace

double nll_and_grad(const FlowStack& G, const Vector& x, double* grad, long* clip_events) {
    std::vector<LayerInvCache> caches;
    FlowLogDetResult r = run_inverse(G, x, true, &caches);
    if (clip_events) *clip_events += r.clip_events;
    double nll = 0.5 * G.dim * kLog2Pi + 0.5 * dot(r.value, r.value) + r.log_det;
    if (!grad) return nll;

    Vector g = r.value;  // d(||z||^2/2)/dz
    size_t offset = 0;
    for (size_t k = 0; k < G.layers.size(); ++k) {
        const LayerInvCache& c = caches[k];
        for (size_t i = 0; i < g.size(); ++i)
            if (!c.clip_mask[i]) g[i] = 0.0;
        g = layer_inv_vjp_train(G.layers[k], c, g, grad + offset);
        offset += static_cast<size_t>(layer_trainable_count(G.layers[k]));
        if (!all_finite(g))
            throw NumericError("nll_and_grad: non-finite gradient at layer " + std::to_string(k));
    }
    return nll;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
public:
    Reader(std::string data) : data_(std::move(data)) {}
    size_t remaining() const { return data_.size() - pos_; }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(data_[pos_++]);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<uint8_t>(data_[pos_ + static_cast<size_t>(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64() {
        need(8);
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<uint64_t>(static_cast<uint8_t>(data_[pos_ + static_cast<size_t>(i)])) << (8 * i);
        pos_ += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void raw(char* dst, size_t count) {
        need(count);
        std::memcpy(dst, data_.data() + pos_, count);
        pos_ += count;
    }

private:
    void need(size_t k) const {
        if (data_.size() - pos_ < k) throw IoError("truncated checkpoint file");
    }
    std::string data_;
    size_t pos_ = 0;
};

void append_layer_params(std::string& buf, const Layer& layer, uint8_t& kind, uint32_t& count) {
    std::visit(
        [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            std::string body;
            if constexpr (std::is_same_v<T, ActNorm>) {
                kind = 0;
                for (double v : l.scale) put_f64(body, v);
                for (double v : l.bias) put_f64(body, v);
                put_f64(body, l.epsilon);
            } else if constexpr (std::is_same_v<T, Coupling>) {
                kind = 1;
                put_f64(body, l.swap_halves ? 1.0 : 0.0);
                for (double v : l.net.w1.a) put_f64(body, v);
                for (double v : l.net.b1) put_f64(body, v);
                for (double v : l.net.w2.a) put_f64(body, v);
                for (double v : l.net.b2) put_f64(body, v);
                for (double v : l.net.w3.a) put_f64(body, v);
                for (double v : l.net.b3) put_f64(body, v);
                put_f64(body, l.squash_bound);
            } else {
                kind = 2;
                put_f64(body, l.learned ? 1.0 : 0.0);
                for (int v : l.perm) put_f64(body, static_cast<double>(v));
                if (l.learned) {
                    for (double v : l.lower.a) put_f64(body, v);
                    for (double v : l.upper.a) put_f64(body, v);
                }
            }
            count = static_cast<uint32_t>(body.size() / 8);
            buf += body;
        },
        layer);
}

std::vector<int> perm_from_doubles(const double* p, int n) {
    std::vector<int> perm(static_cast<size_t>(n));
    std::vector<uint8_t> seen(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        double v = p[i];
        int idx = static_cast<int>(std::llround(v));
        if (idx < 0 || idx >= n || std::fabs(v - idx) > 1e-9 || seen[static_cast<size_t>(idx)])
            throw IoError("checkpoint: invalid permutation table");
        seen[static_cast<size_t>(idx)] = 1;
        perm[static_cast<size_t>(i)] = idx;
    }
    return perm;
}

}  // namespace

void save_flow(const FlowStack& G, const std::string& path) {
    if (G.layers.size() > 255) throw IoError("save_flow: too many layers for the format");
    std::string buf;
    buf.append(kMagic, 8);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(G.dim));
    buf.push_back(static_cast<char>(G.layers.size()));
    for (const Layer& layer : G.layers) {
        std::string body;
        uint8_t kind = 0;
        uint32_t count = 0;
        append_layer_params(body, layer, kind, count);
        buf.push_back(static_cast<char>(kind));
        put_u32(buf, count);
        buf += body;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_flow: cannot open '" + path + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("save_flow: write failed for '" + path + "'");
}

FlowStack load_flow(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_flow: cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader rd(std::move(data));

    char magic[8];
    rd.raw(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw IoError("load_flow: bad magic, not a checkpoint");
    uint32_t version = rd.u32();
    if (version != kVersion)
        throw IoError("load_flow: unsupported version " + std::to_string(version));
    int n = static_cast<int>(rd.u32());
    if (n < 1) throw IoError("load_flow: dimension mismatch (invalid dimension)");
    int nlayers = rd.u8();

    FlowStack G;
    G.dim = n;
    for (int k = 0; k < nlayers; ++k) {
        uint8_t kind = rd.u8();
        uint32_t count = rd.u32();
        Vector params(static_cast<size_t>(count));
        for (uint32_t i = 0; i < count; ++i) params[i] = rd.f64();

        if (kind == 0) {
            if (count != static_cast<uint32_t>(2 * n + 1))
                throw IoError("load_flow: dimension mismatch in actnorm layer " + std::to_string(k));
            ActNorm l;
            l.scale.assign(params.begin(), params.begin() + n);
            l.bias.assign(params.begin() + n, params.begin() + 2 * n);
            l.epsilon = params[static_cast<size_t>(2 * n)];
            G.layers.emplace_back(std::move(l));
        } else if (kind == 1) {
            if (count < 3) throw IoError("load_flow: dimension mismatch in coupling layer");
            Coupling l;
            double sw = params[0];
            if (sw != 0.0 && sw != 1.0) throw IoError("load_flow: invalid coupling flag");
            l.swap_halves = (sw == 1.0);
            l.squash_bound = params[static_cast<size_t>(count - 1)];
            Split sp = coupling_split(n, l.swap_halves);
            int in = sp.cond_len, out = 2 * sp.act_len;
            long w = static_cast<long>(count) - 2;
            // w = h^2 + h(in + out + 2) + out, solve for the hidden width
            double disc = static_cast<double>(in + out + 2) * (in + out + 2) + 4.0 * (w - out);
            int h = static_cast<int>(std::llround((-(in + out + 2) + std::sqrt(disc)) / 2.0));
            if (h < 1 ||
                static_cast<long>(h) * h + static_cast<long>(h) * (in + out + 2) + out != w)
                throw IoError("load_flow: dimension mismatch in coupling layer " + std::to_string(k));
            l.net.in = in;
            l.net.hidden = h;
            l.net.out = out;
            l.net.w1 = Matrix(h, in);
            l.net.w2 = Matrix(h, h);
            l.net.w3 = Matrix(out, h);
            size_t p = 1;
            for (double& v : l.net.w1.a) v = params[p++];
            l.net.b1.assign(params.begin() + static_cast<long>(p), params.begin() + static_cast<long>(p) + h);
            p += static_cast<size_t>(h);
            for (double& v : l.net.w2.a) v = params[p++];
            l.net.b2.assign(params.begin() + static_cast<long>(p), params.begin() + static_cast<long>(p) + h);
            p += static_cast<size_t>(h);
            for (double& v : l.net.w3.a) v = params[p++];
            l.net.b3.assign(params.begin() + static_cast<long>(p), params.begin() + static_cast<long>(p) + out);
            G.layers.emplace_back(std::move(l));
        } else if (kind == 2) {
            if (count < 1) throw IoError("load_flow: dimension mismatch in mixing layer");
            Mixing l;
            double flag = params[0];
            if (flag == 0.0) {
                if (count != static_cast<uint32_t>(n + 1))
                    throw IoError("load_flow: dimension mismatch in mixing layer " + std::to_string(k));
                l.perm = perm_from_doubles(params.data() + 1, n);
            } else if (flag == 1.0) {
                if (count != static_cast<uint32_t>(1 + n + 2 * n * n))
                    throw IoError("load_flow: dimension mismatch in mixing layer " + std::to_string(k));
                l.learned = true;
                l.perm = perm_from_doubles(params.data() + 1, n);
                l.lower = Matrix(n, n);
                l.upper = Matrix(n, n);
                size_t p = static_cast<size_t>(1 + n);
                for (double& v : l.lower.a) v = params[p++];
                for (double& v : l.upper.a) v = params[p++];
            } else {
                throw IoError("load_flow: invalid mixing flag");
            }
            G.layers.emplace_back(std::move(l));
        } else {
            throw IoError("load_flow: unknown layer kind " + std::to_string(kind));
        }
    }
    if (rd.remaining() != 0) throw IoError("load_flow: trailing bytes after last layer");
    return G;
}

}  // namespace flowprior
