// SPDX-License-Identifier: Apache-2.0
#include "eoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace eoe {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

// ----------------------------- kernels -----------------------------
// All loops run in a fixed order so results are reproducible bit for bit.

template <class T>
void layernorm_forward(T* out, T* mean, T* rstd, const T* inp, const T* g, const T* b, std::size_t n,
                       std::size_t c) {
    const T eps = static_cast<T>(kLayerNormEps);
    for (std::size_t i = 0; i < n; ++i) {
        const T* x = inp + i * c;
        T m{0};
        for (std::size_t j = 0; j < c; ++j) {
            m += x[j];
        }
        m /= static_cast<T>(c);
        T v{0};
        for (std::size_t j = 0; j < c; ++j) {
            const T d = x[j] - m;
            v += d * d;
        }
        v /= static_cast<T>(c);
        const T s = T{1} / std::sqrt(v + eps);
        T* o = out + i * c;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = (x[j] - m) * s * g[j] + b[j];
        }
        mean[i] = m;
        rstd[i] = s;
    }
}

template <class T>
void layernorm_backward(T* dinp, T* dg, T* db, const T* dout, const T* inp, const T* g, const T* mean,
                        const T* rstd, std::size_t n, std::size_t c) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* x = inp + i * c;
        const T* dy = dout + i * c;
        T* dx = dinp + i * c;
        const T m = mean[i];
        const T s = rstd[i];
        T dnorm_mean{0};
        T dnorm_norm_mean{0};
        for (std::size_t j = 0; j < c; ++j) {
            const T norm = (x[j] - m) * s;
            const T dnorm = g[j] * dy[j];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= static_cast<T>(c);
        dnorm_norm_mean /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) {
            const T norm = (x[j] - m) * s;
            const T dnorm = g[j] * dy[j];
            db[j] += dy[j];
            dg[j] += norm * dy[j];
            dx[j] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

// out[n][o] = bias[o] + sum_i inp[n][i] * w[o][i]; bias may be null.
template <class T>
void linear_forward(T* out, const T* inp, const T* w, const T* bias, std::size_t n, std::size_t in_dim,
                    std::size_t out_dim) {
    for (std::size_t r = 0; r < n; ++r) {
        const T* x = inp + r * in_dim;
        T* y = out + r * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const T acc = dot(x, w + o * in_dim, in_dim);
            y[o] = bias != nullptr ? bias[o] + acc : acc;
        }
    }
}

// Accumulates into dinp, dw and (if non-null) dbias.
template <class T>
void linear_backward(T* dinp, T* dw, T* dbias, const T* dout, const T* inp, const T* w, std::size_t n,
                     std::size_t in_dim, std::size_t out_dim) {
    for (std::size_t r = 0; r < n; ++r) {
        const T* dy = dout + r * out_dim;
        const T* x = inp + r * in_dim;
        T* dx = dinp + r * in_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const T d = dy[o];
            const T* wrow = w + o * in_dim;
            T* dwrow = dw + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) {
                dx[i] += d * wrow[i];
                dwrow[i] += d * x[i];
            }
            if (dbias != nullptr) {
                dbias[o] += d;
            }
        }
    }
}

template <class T>
void attention_forward(T* out, T* att, const T* qkv, std::size_t batch, std::size_t seq, std::size_t c,
                       std::size_t n_heads) {
    const std::size_t hs = c / n_heads;
    const std::size_t c3 = 3 * c;
    const T scale = T{1} / std::sqrt(static_cast<T>(hs));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < seq; ++t) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                const T* q = qkv + (b * seq + t) * c3 + h * hs;
                T* row = att + ((b * n_heads + h) * seq + t) * seq;

                T maxval = -std::numeric_limits<T>::infinity();
                for (std::size_t t2 = 0; t2 <= t; ++t2) {
                    const T* k = qkv + (b * seq + t2) * c3 + c + h * hs;
                    row[t2] = dot(q, k, hs) * scale;
                    maxval = std::max(maxval, row[t2]);
                }
                T sum{0};
                for (std::size_t t2 = 0; t2 <= t; ++t2) {
                    row[t2] = std::exp(row[t2] - maxval);
                    sum += row[t2];
                }
                const T inv = T{1} / sum;
                for (std::size_t t2 = 0; t2 < seq; ++t2) {
                    row[t2] = t2 <= t ? row[t2] * inv : T{0};
                }

                T* y = out + (b * seq + t) * c + h * hs;
                std::fill(y, y + hs, T{0});
                for (std::size_t t2 = 0; t2 <= t; ++t2) {
                    const T* v = qkv + (b * seq + t2) * c3 + 2 * c + h * hs;
                    const T a = row[t2];
                    for (std::size_t i = 0; i < hs; ++i) {
                        y[i] += a * v[i];
                    }
                }
            }
        }
    }
}

template <class T>
void attention_backward(T* dqkv, const T* dout, const T* qkv, const T* att, std::size_t batch, std::size_t seq,
                        std::size_t c, std::size_t n_heads) {
    const std::size_t hs = c / n_heads;
    const std::size_t c3 = 3 * c;
    const T scale = T{1} / std::sqrt(static_cast<T>(hs));
    std::vector<T> datt(seq);
    std::vector<T> dpre(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < seq; ++t) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                const T* row = att + ((b * n_heads + h) * seq + t) * seq;
                const T* dy = dout + (b * seq + t) * c + h * hs;
                const T* q = qkv + (b * seq + t) * c3 + h * hs;
                T* dq = dqkv + (b * seq + t) * c3 + h * hs;

                // through y = sum_t2 att[t2] * v[t2]
                for (std::size_t t2 = 0; t2 <= t; ++t2) {
                    const T* v = qkv + (b * seq + t2) * c3 + 2 * c + h * hs;
                    T* dv = dqkv + (b * seq + t2) * c3 + 2 * c + h * hs;
                    T acc{0};
                    for (std::size_t i = 0; i < hs; ++i) {
                        acc += v[i] * dy[i];
                        dv[i] += row[t2] * dy[i];
                    }
                    datt[t2] = acc;
                }
                // softmax: dpre[j] = att[j] * (datt[j] - sum_k att[k] datt[k])
                T weighted{0};
                for (std::size_t t2 = 0; t2 <= t; ++t2) {
                    weighted += row[t2] * datt[t2];
                }
                for (std::size_t t2 = 0; t2 <= t; ++t2) {
                    dpre[t2] = row[t2] * (datt[t2] - weighted) * scale;
                }
                // scores = q . k * scale
                for (std::size_t t2 = 0; t2 <= t; ++t2) {
                    const T* k = qkv + (b * seq + t2) * c3 + c + h * hs;
                    T* dk = dqkv + (b * seq + t2) * c3 + c + h * hs;
                    const T d = dpre[t2];
                    for (std::size_t i = 0; i < hs; ++i) {
                        dq[i] += d * k[i];
                        dk[i] += d * q[i];
                    }
                }
            }
        }
    }
}

template <class T>
constexpr T gelu_scale() {
    return static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
}

template <class T>
void gelu_forward(T* out, const T* inp, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const T x = inp[i];
        const T cube = static_cast<T>(0.044715) * x * x * x;
        out[i] = static_cast<T>(0.5) * x * (T{1} + std::tanh(gelu_scale<T>() * (x + cube)));
    }
}

template <class T>
void gelu_backward(T* dinp, const T* inp, const T* dout, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const T x = inp[i];
        const T cube = static_cast<T>(0.044715) * x * x * x;
        const T th = std::tanh(gelu_scale<T>() * (x + cube));
        const T sech2 = T{1} - th * th;
        const T local = static_cast<T>(0.5) * (T{1} + th) +
                        x * static_cast<T>(0.5) * sech2 * gelu_scale<T>() *
                            (T{1} + static_cast<T>(3.0 * 0.044715) * x * x);
        dinp[i] += local * dout[i];
    }
}

template <class T>
void add(T* out, const T* a, const T* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a[i] + b[i];
    }
}

// ----------------------------- parameters -----------------------------

template <class T>
BlockParams<T> make_block(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t f = cfg.ffn_dim();
    BlockParams<T> b{
        BasicTensor<T>({d}, T{1}),    BasicTensor<T>({d}),
        BasicTensor<T>({3 * d, d}),   BasicTensor<T>({3 * d}),
        BasicTensor<T>({d, d}),       BasicTensor<T>({d}),
        BasicTensor<T>({d}, T{1}),    BasicTensor<T>({d}),
        BasicTensor<T>({f, d}),       BasicTensor<T>({f}),
        BasicTensor<T>({d, f}),       BasicTensor<T>({d}),
    };
    return b;
}

template <class T>
InputParams<T> make_input(const ModelConfig& cfg) {
    return {BasicTensor<T>({cfg.vocab_size, cfg.d_model}), BasicTensor<T>({cfg.ctx_len, cfg.d_model})};
}

template <class T>
OutputParams<T> make_output(const ModelConfig& cfg, bool with_head) {
    OutputParams<T> out{BasicTensor<T>({cfg.d_model}, T{1}), BasicTensor<T>({cfg.d_model}), std::nullopt};
    if (with_head) {
        out.head = BasicTensor<T>({cfg.vocab_size, cfg.d_model});
    }
    return out;
}

template <class T>
void fill_normal(BasicTensor<T>& t, Rng& rng, double scale) {
    const double variance = kInitStd * kInitStd;
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = static_cast<T>(rng.gaussian(variance) * scale);
    }
}

template <class T>
BasicTensor<T> zeros_like(const BasicTensor<T>& t) {
    return BasicTensor<T>(t.shape());
}

template <class T>
BlockParams<T> zeros_like(const BlockParams<T>& b) {
    BlockParams<T> z = b;
    visit_block(z, [](std::string_view, BasicTensor<T>& t) { t.fill(T{0}); });
    return z;
}

void check_expert(const ModelConfig& cfg, std::size_t expert_id) {
    if (expert_id >= cfg.n_experts) {
        throw UsageError("expert id " + std::to_string(expert_id) + " out of range for " +
                         std::to_string(cfg.n_experts) + " experts");
    }
}

}  // namespace

// ----------------------------- config -----------------------------

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw UsageError("invalid model config: " + msg); };
    if (vocab_size == 0 || ctx_len == 0 || n_layers_total == 0 || n_experts == 0 || d_model == 0 ||
        n_heads == 0) {
        fail("vocab_size, ctx_len, n_layers, n_experts, d_model and n_heads must be positive");
    }
    if (n_layers_total % n_experts != 0) {
        fail("n_layers (" + std::to_string(n_layers_total) + ") is not divisible by n_experts (" +
             std::to_string(n_experts) + ")");
    }
    if (d_model % n_heads != 0) {
        fail("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" + std::to_string(n_heads) +
             ")");
    }
}

std::string block_tensor_name(std::size_t block, std::string_view field) {
    return "blocks." + std::to_string(block) + "." + std::string(field);
}

template <class T>
std::vector<NamedRef<BasicTensor<T>>> ParamStore<T>::named() {
    std::vector<NamedRef<BasicTensor<T>>> refs;
    auto push = [&](std::string name, BasicTensor<T>& t) { refs.push_back({std::move(name), &t}); };
    visit_input(input, [&](std::string_view n, BasicTensor<T>& t) { push(std::string(n), t); });
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        visit_block(blocks[b], [&](std::string_view n, BasicTensor<T>& t) { push(block_tensor_name(b, n), t); });
    }
    visit_output(output, [&](std::string_view n, BasicTensor<T>& t) { push(std::string(n), t); });
    return refs;
}

template <class T>
std::vector<NamedRef<const BasicTensor<T>>> ParamStore<T>::named() const {
    std::vector<NamedRef<const BasicTensor<T>>> refs;
    for (auto& r : const_cast<ParamStore<T>*>(this)->named()) {
        refs.push_back({std::move(r.name), r.tensor});
    }
    return refs;
}

template <class T>
std::vector<NamedRef<const BasicTensor<T>>> GradStore<T>::named() const {
    std::vector<NamedRef<const BasicTensor<T>>> refs;
    auto push = [&](std::string name, const BasicTensor<T>& t) { refs.push_back({std::move(name), &t}); };
    visit_input(input, [&](std::string_view n, const BasicTensor<T>& t) { push(std::string(n), t); });
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        visit_block(blocks[b], [&](std::string_view n, const BasicTensor<T>& t) {
            push(block_tensor_name(block_begin + b, n), t);
        });
    }
    visit_output(output, [&](std::string_view n, const BasicTensor<T>& t) { push(std::string(n), t); });
    return refs;
}

template <class T>
const BasicTensor<T>* GradStore<T>::find(std::string_view name) const {
    for (const auto& r : named()) {
        if (r.name == name) {
            return r.tensor;
        }
    }
    return nullptr;
}

template <class T>
ParamStore<T> zero_params(const ModelConfig& config) {
    config.validate();
    ParamStore<T> p;
    p.config = config;
    p.input = make_input<T>(config);
    p.blocks.assign(config.n_layers_total, make_block<T>(config));
    p.output = make_output<T>(config, !config.tie_head);
    return p;
}

template <class T>
ParamStore<T> init_params(const ModelConfig& config, Rng& rng) {
    ParamStore<T> p = zero_params<T>(config);
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.layers_per_expert()));
    fill_normal(p.input.wte, rng, 1.0);
    fill_normal(p.input.wpe, rng, 1.0);
    for (auto& b : p.blocks) {
        fill_normal(b.qkv_w, rng, 1.0);
        fill_normal(b.proj_w, rng, residual_scale);
        fill_normal(b.fc_w, rng, 1.0);
        fill_normal(b.fcproj_w, rng, residual_scale);
    }
    if (p.output.head) {
        fill_normal(*p.output.head, rng, 1.0);
    }
    return p;
}

template <class U, class T>
ParamStore<U> convert_params(const ParamStore<T>& params) {
    ParamStore<U> out = zero_params<U>(params.config);
    auto src = params.named();
    auto dst = out.named();
    for (std::size_t i = 0; i < src.size(); ++i) {
        *dst[i].tensor = src[i].tensor->template cast<U>();
    }
    return out;
}

// ----------------------------- forward -----------------------------

template <class T>
ActivationTape<T> forward(const ParamStore<T>& params, std::size_t expert_id, const TokenBatch& batch) {
    const ModelConfig& cfg = params.config;
    check_expert(cfg, expert_id);
    const std::size_t B = batch.batch;
    const std::size_t S = batch.seq_len;
    const std::size_t C = cfg.d_model;
    const std::size_t F = cfg.ffn_dim();
    const std::size_t V = cfg.vocab_size;
    const std::size_t H = cfg.n_heads;
    const std::size_t N = B * S;
    if (B == 0 || S == 0 || batch.inputs.size() != N) {
        throw InputError("token batch shape does not match its contents");
    }
    if (S > cfg.ctx_len) {
        throw InputError("sequence length " + std::to_string(S) + " exceeds context length " +
                         std::to_string(cfg.ctx_len));
    }
    for (std::size_t i = 0; i < N; ++i) {
        if (batch.inputs[i] >= V) {
            throw InputError("token id " + std::to_string(batch.inputs[i]) + " at position (" +
                             std::to_string(i / S) + ", " + std::to_string(i % S) + ") is outside vocabulary of " +
                             std::to_string(V));
        }
    }

    ActivationTape<T> tape;
    tape.expert_id = expert_id;
    tape.batch = B;
    tape.seq_len = S;
    tape.tokens = batch.inputs;

    BasicTensor<T> x({N, C});
    for (std::size_t n = 0; n < N; ++n) {
        const T* te = params.input.wte.data() + batch.inputs[n] * C;
        const T* pe = params.input.wpe.data() + (n % S) * C;
        add(x.data() + n * C, te, pe, C);
    }

    const std::size_t lpe = cfg.layers_per_expert();
    const std::size_t first = expert_id * lpe;
    tape.layers.reserve(lpe);
    for (std::size_t l = 0; l < lpe; ++l) {
        const BlockParams<T>& w = params.blocks[first + l];
        LayerTape<T> lt;
        lt.in = std::move(x);
        lt.ln1 = BasicTensor<T>({N, C});
        lt.ln1_mean = BasicTensor<T>({N});
        lt.ln1_rstd = BasicTensor<T>({N});
        lt.qkv = BasicTensor<T>({N, 3 * C});
        lt.att = BasicTensor<T>({B, H, S, S});
        lt.atty = BasicTensor<T>({N, C});
        lt.res2 = BasicTensor<T>({N, C});
        lt.ln2 = BasicTensor<T>({N, C});
        lt.ln2_mean = BasicTensor<T>({N});
        lt.ln2_rstd = BasicTensor<T>({N});
        lt.fch = BasicTensor<T>({N, F});
        lt.fch_gelu = BasicTensor<T>({N, F});
        BasicTensor<T> tmp({N, C});

        layernorm_forward(lt.ln1.data(), lt.ln1_mean.data(), lt.ln1_rstd.data(), lt.in.data(), w.ln1_g.data(),
                          w.ln1_b.data(), N, C);
        linear_forward(lt.qkv.data(), lt.ln1.data(), w.qkv_w.data(), w.qkv_b.data(), N, C, 3 * C);
        attention_forward(lt.atty.data(), lt.att.data(), lt.qkv.data(), B, S, C, H);
        linear_forward(tmp.data(), lt.atty.data(), w.proj_w.data(), w.proj_b.data(), N, C, C);
        add(lt.res2.data(), lt.in.data(), tmp.data(), N * C);
        layernorm_forward(lt.ln2.data(), lt.ln2_mean.data(), lt.ln2_rstd.data(), lt.res2.data(), w.ln2_g.data(),
                          w.ln2_b.data(), N, C);
        linear_forward(lt.fch.data(), lt.ln2.data(), w.fc_w.data(), w.fc_b.data(), N, C, F);
        gelu_forward(lt.fch_gelu.data(), lt.fch.data(), N * F);
        linear_forward(tmp.data(), lt.fch_gelu.data(), w.fcproj_w.data(), w.fcproj_b.data(), N, F, C);

        x = BasicTensor<T>({N, C});
        add(x.data(), lt.res2.data(), tmp.data(), N * C);
        tape.layers.push_back(std::move(lt));
    }

    tape.out = std::move(x);
    tape.lnf = BasicTensor<T>({N, C});
    tape.lnf_mean = BasicTensor<T>({N});
    tape.lnf_rstd = BasicTensor<T>({N});
    layernorm_forward(tape.lnf.data(), tape.lnf_mean.data(), tape.lnf_rstd.data(), tape.out.data(),
                      params.output.lnf_g.data(), params.output.lnf_b.data(), N, C);
    tape.logits = BasicTensor<T>({B, S, V});
    linear_forward<T>(tape.logits.data(), tape.lnf.data(), params.head_weight().data(), nullptr, N, C, V);
    return tape;
}

// ----------------------------- loss -----------------------------

namespace {

template <class T>
void check_logits(const BasicTensor<T>& logits, const TokenBatch& batch) {
    if (logits.rank() != 3 || logits.dim(0) != batch.batch || logits.dim(1) != batch.seq_len ||
        batch.targets.size() != batch.positions()) {
        throw DimensionError("logits " + shape_to_string(logits.shape()) + " do not match batch [" +
                             std::to_string(batch.batch) + "x" + std::to_string(batch.seq_len) + "]");
    }
    const std::size_t V = logits.dim(2);
    for (std::size_t i = 0; i < batch.targets.size(); ++i) {
        if (batch.targets[i] > V) {
            throw InputError("target id " + std::to_string(batch.targets[i]) + " at position " + std::to_string(i) +
                             " is outside vocabulary of " + std::to_string(V));
        }
    }
}

std::size_t count_targets(const TokenBatch& batch, std::size_t vocab) {
    std::size_t n = 0;
    for (TokenId t : batch.targets) {
        n += t != vocab ? 1 : 0;
    }
    if (n == 0) {
        throw DomainError("every target position is ignored; the mean loss is undefined");
    }
    return n;
}

// log(sum exp(row - max)) and max, in double.
template <class T>
std::pair<double, double> log_sum_exp(const T* row, std::size_t v) {
    double maxval = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v; ++i) {
        maxval = std::max(maxval, static_cast<double>(row[i]));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
        sum += std::exp(static_cast<double>(row[i]) - maxval);
    }
    return {maxval, std::log(sum)};
}

}  // namespace

template <class T>
double loss(const BasicTensor<T>& logits, const TokenBatch& batch) {
    check_logits(logits, batch);
    const std::size_t V = logits.dim(2);
    const std::size_t count = count_targets(batch, V);
    double total = 0.0;
    for (std::size_t n = 0; n < batch.positions(); ++n) {
        const TokenId target = batch.targets[n];
        if (target == V) {
            continue;
        }
        const T* row = logits.data() + n * V;
        const auto [maxval, lse] = log_sum_exp(row, V);
        total += lse - (static_cast<double>(row[target]) - maxval);
    }
    return total / static_cast<double>(count);
}

// ----------------------------- backward -----------------------------

template <class T>
GradStore<T> backward(const ParamStore<T>& params, std::size_t expert_id, const ActivationTape<T>& tape,
                      const TokenBatch& batch) {
    const ModelConfig& cfg = params.config;
    check_expert(cfg, expert_id);
    const std::size_t lpe = cfg.layers_per_expert();
    if (tape.expert_id != expert_id || tape.layers.size() != lpe || tape.batch != batch.batch ||
        tape.seq_len != batch.seq_len || tape.tokens != batch.inputs) {
        throw UsageError("activation tape does not belong to expert " + std::to_string(expert_id) +
                         " and this batch");
    }
    check_logits(tape.logits, batch);

    const std::size_t B = tape.batch;
    const std::size_t S = tape.seq_len;
    const std::size_t C = cfg.d_model;
    const std::size_t F = cfg.ffn_dim();
    const std::size_t V = cfg.vocab_size;
    const std::size_t H = cfg.n_heads;
    const std::size_t N = B * S;
    const std::size_t first = expert_id * lpe;

    GradStore<T> g;
    g.expert_id = expert_id;
    g.block_begin = first;
    g.input = make_input<T>(cfg);
    g.output = make_output<T>(cfg, !cfg.tie_head);
    g.output.lnf_g.fill(T{0});
    g.blocks.reserve(lpe);
    for (std::size_t l = 0; l < lpe; ++l) {
        g.blocks.push_back(zeros_like(params.blocks[first + l]));
    }

    // d loss / d logits = (softmax - onehot) / count
    const double inv_count = 1.0 / static_cast<double>(count_targets(batch, V));
    BasicTensor<T> dlogits({N, V});
    for (std::size_t n = 0; n < N; ++n) {
        const TokenId target = batch.targets[n];
        if (target == V) {
            continue;
        }
        const T* row = tape.logits.data() + n * V;
        T* drow = dlogits.data() + n * V;
        const auto [maxval, lse] = log_sum_exp(row, V);
        for (std::size_t v = 0; v < V; ++v) {
            const double p = std::exp(static_cast<double>(row[v]) - maxval - lse);
            drow[v] = static_cast<T>((p - (v == target ? 1.0 : 0.0)) * inv_count);
        }
    }

    BasicTensor<T> dlnf({N, C});
    BasicTensor<T>& dhead = g.output.head ? *g.output.head : g.input.wte;
    linear_backward<T>(dlnf.data(), dhead.data(), nullptr, dlogits.data(), tape.lnf.data(),
                       params.head_weight().data(), N, C, V);

    BasicTensor<T> dres({N, C});
    layernorm_backward(dres.data(), g.output.lnf_g.data(), g.output.lnf_b.data(), dlnf.data(), tape.out.data(),
                       params.output.lnf_g.data(), tape.lnf_mean.data(), tape.lnf_rstd.data(), N, C);

    for (std::size_t l = lpe; l-- > 0;) {
        const BlockParams<T>& w = params.blocks[first + l];
        BlockParams<T>& dw = g.blocks[l];
        const LayerTape<T>& lt = tape.layers[l];

        // MLP branch: out = res2 + fcproj(gelu(fc(ln2(res2))))
        BasicTensor<T> dres2 = dres;
        BasicTensor<T> dfch_gelu({N, F});
        linear_backward(dfch_gelu.data(), dw.fcproj_w.data(), dw.fcproj_b.data(), dres.data(), lt.fch_gelu.data(),
                        w.fcproj_w.data(), N, F, C);
        BasicTensor<T> dfch({N, F});
        gelu_backward(dfch.data(), lt.fch.data(), dfch_gelu.data(), N * F);
        BasicTensor<T> dln2({N, C});
        linear_backward(dln2.data(), dw.fc_w.data(), dw.fc_b.data(), dfch.data(), lt.ln2.data(), w.fc_w.data(), N, C,
                        F);
        layernorm_backward(dres2.data(), dw.ln2_g.data(), dw.ln2_b.data(), dln2.data(), lt.res2.data(),
                           w.ln2_g.data(), lt.ln2_mean.data(), lt.ln2_rstd.data(), N, C);

        // attention branch: res2 = in + proj(attn(qkv(ln1(in))))
        BasicTensor<T> dres_in = dres2;
        BasicTensor<T> datty({N, C});
        linear_backward(datty.data(), dw.proj_w.data(), dw.proj_b.data(), dres2.data(), lt.atty.data(),
                        w.proj_w.data(), N, C, C);
        BasicTensor<T> dqkv({N, 3 * C});
        attention_backward(dqkv.data(), datty.data(), lt.qkv.data(), lt.att.data(), B, S, C, H);
        BasicTensor<T> dln1({N, C});
        linear_backward(dln1.data(), dw.qkv_w.data(), dw.qkv_b.data(), dqkv.data(), lt.ln1.data(), w.qkv_w.data(), N,
                        C, 3 * C);
        layernorm_backward(dres_in.data(), dw.ln1_g.data(), dw.ln1_b.data(), dln1.data(), lt.in.data(),
                           w.ln1_g.data(), lt.ln1_mean.data(), lt.ln1_rstd.data(), N, C);
        dres = std::move(dres_in);
    }

    for (std::size_t n = 0; n < N; ++n) {
        const T* dx = dres.data() + n * C;
        T* dte = g.input.wte.data() + tape.tokens[n] * C;
        T* dpe = g.input.wpe.data() + (n % S) * C;
        for (std::size_t i = 0; i < C; ++i) {
            dte[i] += dx[i];
            dpe[i] += dx[i];
        }
    }
    return g;
}

// ----------------------------- accounting -----------------------------

namespace {

std::uint64_t block_params(const ModelConfig& c) {
    const std::uint64_t d = c.d_model;
    const std::uint64_t f = c.ffn_dim();
    return 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (f * d + f) + (d * f + d);
}

std::uint64_t scoped_blocks(const ModelConfig& c, Scope scope) {
    return scope == Scope::full ? c.n_layers_total : c.layers_per_expert();
}

}  // namespace

std::vector<TensorInfo> tensor_inventory(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t f = config.ffn_dim();
    std::vector<TensorInfo> out{{"wte", {config.vocab_size, d}}, {"wpe", {config.ctx_len, d}}};
    const std::vector<TensorInfo> block{
        {"ln1.g", {d}},          {"ln1.b", {d}},       {"attn.qkv.w", {3 * d, d}}, {"attn.qkv.b", {3 * d}},
        {"attn.proj.w", {d, d}}, {"attn.proj.b", {d}}, {"ln2.g", {d}},             {"ln2.b", {d}},
        {"mlp.fc.w", {f, d}},    {"mlp.fc.b", {f}},    {"mlp.proj.w", {d, f}},     {"mlp.proj.b", {d}},
    };
    for (std::size_t b = 0; b < config.n_layers_total; ++b) {
        for (const auto& t : block) {
            out.push_back({block_tensor_name(b, t.name), t.shape});
        }
    }
    out.push_back({"lnf.g", {d}});
    out.push_back({"lnf.b", {d}});
    if (!config.tie_head) {
        out.push_back({"head", {config.vocab_size, d}});
    }
    return out;
}

std::uint64_t count_params(const ModelConfig& config, Scope scope) {
    config.validate();
    const std::uint64_t d = config.d_model;
    const std::uint64_t v = config.vocab_size;
    const std::uint64_t shared_in = v * d + static_cast<std::uint64_t>(config.ctx_len) * d;
    const std::uint64_t shared_out = 2 * d + (config.tie_head ? 0 : v * d);
    return shared_in + scoped_blocks(config, scope) * block_params(config) + shared_out;
}

FlopCount flop_count(const ModelConfig& config, Scope scope) {
    config.validate();
    const std::uint64_t d = config.d_model;
    const std::uint64_t f = config.ffn_dim();
    const std::uint64_t blocks = scoped_blocks(config, scope);
    const std::uint64_t per_block_attention = 2 * (3 * d * d + d * d) + 2 * 2 * config.ctx_len * d;
    const std::uint64_t per_block_ffn = 2 * (d * f + f * d);
    return {blocks * per_block_attention, blocks * per_block_ffn, 2 * d * config.vocab_size};
}

std::uint64_t flops_per_token(const ModelConfig& config, Scope scope) {
    return flop_count(config, scope).total();
}

// ----------------------------- instantiations -----------------------------

#define EOE_INSTANTIATE_MODEL(T)                                                                              \
    template struct ParamStore<T>;                                                                            \
    template struct GradStore<T>;                                                                             \
    template ParamStore<T> init_params<T>(const ModelConfig&, Rng&);                                          \
    template ParamStore<T> zero_params<T>(const ModelConfig&);                                                \
    template ActivationTape<T> forward<T>(const ParamStore<T>&, std::size_t, const TokenBatch&);              \
    template double loss<T>(const BasicTensor<T>&, const TokenBatch&);                                        \
    template GradStore<T> backward<T>(const ParamStore<T>&, std::size_t, const ActivationTape<T>&,            \
                                      const TokenBatch&);

EOE_INSTANTIATE_MODEL(float)
EOE_INSTANTIATE_MODEL(double)
#undef EOE_INSTANTIATE_MODEL

template ParamStore<double> convert_params<double, float>(const ParamStore<float>&);
template ParamStore<float> convert_params<float, double>(const ParamStore<double>&);
template ParamStore<float> convert_params<float, float>(const ParamStore<float>&);
template ParamStore<double> convert_params<double, double>(const ParamStore<double>&);

}  // namespace eoe
