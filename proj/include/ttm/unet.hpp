#pragma once

#include "ttm/conditioning.hpp"
#include "ttm/core.hpp"
#include "ttm/layers.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ttm {

/// How the denoiser obtains its global conditioning vector.
enum class Conditioning {
    kNone,    // local embeddings only; the global slot stays at the null vector
    kMean,    // global = masked mean of the local embeddings
    kSap,     // global = self-attention pooling with the trainable sap vector
    kGlobal,  // global supplied by the provider (separate encoder)
};

inline std::string to_string(Conditioning c) {
    switch (c) {
        case Conditioning::kNone: return "none";
        case Conditioning::kMean: return "mean";
        case Conditioning::kSap: return "sap";
        case Conditioning::kGlobal: return "global";
    }
    return "?";
}

inline Conditioning conditioning_from_string(const std::string& s) {
    if (s == "none") return Conditioning::kNone;
    if (s == "mean") return Conditioning::kMean;
    if (s == "sap") return Conditioning::kSap;
    if (s == "global") return Conditioning::kGlobal;
    throw std::invalid_argument("unknown conditioning mode: " + s);
}

struct UNetConfig {
    int in_channels = 4;
    int out_channels = 4;
    int base_channels = 16;
    std::vector<int> channel_multipliers = {1, 2};
    std::vector<int> attention_levels = {1};
    int num_heads = 2;
    int head_dim = 8;
    int d_f = 32;
    int d_g = 32;
    int time_embed_dim = 32;
    int groupnorm_groups = 8;
    Conditioning conditioning = Conditioning::kMean;

    int levels() const { return (int)channel_multipliers.size(); }
    int channels_at(int level) const { return base_channels * channel_multipliers[level]; }
    bool has_attention(int level) const {
        return std::find(attention_levels.begin(), attention_levels.end(), level) !=
               attention_levels.end();
    }
    int inner_dim() const { return num_heads * head_dim; }
    int ff_dim(int channels) const { return 2 * channels; }
    /// FiLM conditioning vector: projected global embedding || time embedding.
    int cond_dim() const { return 2 * time_embed_dim; }

    std::vector<std::string> validate() const {
        std::vector<std::string> errs;
        auto pos = [&](int v, const char* what) {
            if (v <= 0) errs.push_back(std::string(what) + " must be positive");
        };
        pos(in_channels, "in_channels");
        pos(out_channels, "out_channels");
        pos(base_channels, "base_channels");
        pos(num_heads, "num_heads");
        pos(head_dim, "head_dim");
        pos(d_f, "d_f");
        pos(d_g, "d_g");
        pos(time_embed_dim, "time_embed_dim");
        pos(groupnorm_groups, "groupnorm_groups");
        if (time_embed_dim % 2 != 0) errs.push_back("time_embed_dim must be even");
        if (channel_multipliers.empty()) errs.push_back("channel_multipliers must be non-empty");
        for (int m : channel_multipliers)
            if (m <= 0) errs.push_back("channel multipliers must be positive");
        for (int l : attention_levels) {
            if (l < 0 || l >= levels()) {
                errs.push_back("attention level out of range");
                continue;
            }
            if (channels_at(l) % inner_dim() != 0)
                errs.push_back("num_heads*head_dim must divide the channel width at level " +
                               std::to_string(l));
        }
        if (!errs.empty()) return errs;
        if (base_channels % groupnorm_groups != 0)
            errs.push_back("groupnorm_groups must divide base_channels");
        for (int i = 0; i < levels(); ++i)
            if (channels_at(i) % groupnorm_groups != 0)
                errs.push_back("groupnorm_groups must divide channels at level " +
                               std::to_string(i));
        if ((conditioning == Conditioning::kMean || conditioning == Conditioning::kSap) &&
            d_f != d_g)
            errs.push_back("pooled conditioning (mean/sap) requires d_g == d_f");
        return errs;
    }

    void validate_or_throw() const {
        auto errs = validate();
        if (!errs.empty()) {
            std::string msg = "invalid UNet config:";
            for (auto& e : errs) msg += "\n  - " + e;
            throw std::invalid_argument(msg);
        }
    }
};

// --------------------------------------------------------------- weights ---

struct TensorSpec {
    std::string name;
    int rows = 0, cols = 0;
    long size() const { return (long)rows * cols; }
};

namespace detail {

inline void add_res_specs(std::vector<TensorSpec>& out, const std::string& p, int cin, int cout,
                          int cond_dim) {
    out.push_back({p + ".conv1.weight", cout, cin * 9});
    out.push_back({p + ".conv1.bias", cout, 1});
    out.push_back({p + ".conv2.weight", cout, cout * 9});
    out.push_back({p + ".conv2.bias", cout, 1});
    out.push_back({p + ".film.weight", 2 * cout, cond_dim});
    out.push_back({p + ".film.bias", 2 * cout, 1});
    if (cin != cout) {
        out.push_back({p + ".skip.weight", cout, cin});
        out.push_back({p + ".skip.bias", cout, 1});
    }
}

inline void add_attn_specs(std::vector<TensorSpec>& out, const std::string& p, int c, int inner,
                           int d_f, int ff) {
    out.push_back({p + ".ln1.gamma", c, 1});
    out.push_back({p + ".ln1.beta", c, 1});
    out.push_back({p + ".q.weight", inner, c});
    out.push_back({p + ".k.weight", inner, d_f});
    out.push_back({p + ".v.weight", inner, d_f});
    out.push_back({p + ".proj.weight", c, inner});
    out.push_back({p + ".proj.bias", c, 1});
    out.push_back({p + ".ln2.gamma", c, 1});
    out.push_back({p + ".ln2.beta", c, 1});
    out.push_back({p + ".ff1.weight", ff, c});
    out.push_back({p + ".ff1.bias", ff, 1});
    out.push_back({p + ".ff2.weight", c, ff});
    out.push_back({p + ".ff2.bias", c, 1});
}

}  // namespace detail

/// Full parameter schema in structural order (the order also fixes RNG
/// consumption during initialization).
inline std::vector<TensorSpec> weight_schema(const UNetConfig& cfg) {
    cfg.validate_or_throw();
    std::vector<TensorSpec> out;
    const int L = cfg.levels();
    const int cd = cfg.cond_dim();
    out.push_back({"in_conv.weight", cfg.base_channels, cfg.in_channels * 9});
    out.push_back({"in_conv.bias", cfg.base_channels, 1});
    for (int i = 0; i < L; ++i) {
        int cin = (i == 0) ? cfg.base_channels : cfg.channels_at(i - 1);
        int cout = cfg.channels_at(i);
        detail::add_res_specs(out, "enc." + std::to_string(i) + ".res", cin, cout, cd);
        if (cfg.has_attention(i))
            detail::add_attn_specs(out, "enc." + std::to_string(i) + ".attn", cout,
                                   cfg.inner_dim(), cfg.d_f, cfg.ff_dim(cout));
        if (i < L - 1) {
            out.push_back({"down." + std::to_string(i) + ".weight", cout, cout * 9});
            out.push_back({"down." + std::to_string(i) + ".bias", cout, 1});
        }
    }
    const int cm = cfg.channels_at(L - 1);
    detail::add_res_specs(out, "mid.res1", cm, cm, cd);
    detail::add_res_specs(out, "mid.res2", cm, cm, cd);
    for (int i = L - 1; i >= 0; --i) {
        int from_above = (i == L - 1) ? cm : cfg.channels_at(i + 1);
        int cout = cfg.channels_at(i);
        detail::add_res_specs(out, "dec." + std::to_string(i) + ".res", from_above + cout, cout,
                              cd);
        if (cfg.has_attention(i))
            detail::add_attn_specs(out, "dec." + std::to_string(i) + ".attn", cout,
                                   cfg.inner_dim(), cfg.d_f, cfg.ff_dim(cout));
        if (i > 0) {
            out.push_back({"up." + std::to_string(i) + ".weight", cout, cout * 9});
            out.push_back({"up." + std::to_string(i) + ".bias", cout, 1});
        }
    }
    out.push_back({"out_conv.weight", cfg.out_channels, cfg.channels_at(0) * 9});
    out.push_back({"out_conv.bias", cfg.out_channels, 1});
    out.push_back({"cond.global_proj.weight", cfg.time_embed_dim, cfg.d_g});
    out.push_back({"cond.global_proj.bias", cfg.time_embed_dim, 1});
    out.push_back({"cond.null_global", cfg.d_g, 1});
    out.push_back({"cond.null_local", cfg.d_f, 1});
    if (cfg.conditioning == Conditioning::kSap) out.push_back({"cond.sap.weight", cfg.d_f, 1});
    return out;
}

/// Closed-form parameter count, written out independently of weight_schema so
/// the two can cross-check each other.
inline long expected_param_count(const UNetConfig& cfg) {
    const long cd = cfg.cond_dim();
    auto conv = [](long cin, long cout, long k) { return cout * cin * k * k + cout; };
    auto res = [&](long cin, long cout) {
        long n = conv(cin, cout, 3) + conv(cout, cout, 3) + 2 * cout * cd + 2 * cout;
        if (cin != cout) n += conv(cin, cout, 1);
        return n;
    };
    auto attn = [&](long c) {
        long inner = cfg.inner_dim();
        long ff = 2 * c;
        return 4 * c + inner * c + 2 * inner * (long)cfg.d_f + (c * inner + c) +
               (ff * c + ff) + (c * ff + c);
    };
    const int L = cfg.levels();
    long total = conv(cfg.in_channels, cfg.base_channels, 3);
    for (int i = 0; i < L; ++i) {
        long cin = (i == 0) ? cfg.base_channels : cfg.channels_at(i - 1);
        total += res(cin, cfg.channels_at(i));
        if (cfg.has_attention(i)) total += attn(cfg.channels_at(i));
        if (i < L - 1) total += conv(cfg.channels_at(i), cfg.channels_at(i), 3);
    }
    total += 2 * res(cfg.channels_at(L - 1), cfg.channels_at(L - 1));
    for (int i = L - 1; i >= 0; --i) {
        long from_above = (i == L - 1) ? cfg.channels_at(L - 1) : cfg.channels_at(i + 1);
        total += res(from_above + cfg.channels_at(i), cfg.channels_at(i));
        if (cfg.has_attention(i)) total += attn(cfg.channels_at(i));
        if (i > 0) total += conv(cfg.channels_at(i), cfg.channels_at(i), 3);
    }
    total += conv(cfg.channels_at(0), cfg.out_channels, 3);
    total += (long)cfg.time_embed_dim * cfg.d_g + cfg.time_embed_dim;
    total += cfg.d_g + cfg.d_f;
    if (cfg.conditioning == Conditioning::kSap) total += cfg.d_f;
    return total;
}

/// Named parameter tensors (biases and vectors stored as n x 1 columns).
/// std::map keeps iteration deterministic.
template <typename S>
struct WeightMap {
    std::map<std::string, Mat<S>> t;

    Mat<S>& at(const std::string& name) {
        auto it = t.find(name);
        require(it != t.end(), "missing parameter: " + name);
        return it->second;
    }
    const Mat<S>& at(const std::string& name) const {
        auto it = t.find(name);
        require(it != t.end(), "missing parameter: " + name);
        return it->second;
    }

    long element_count() const {
        long n = 0;
        for (auto& [k, v] : t) n += (long)v.size();
        return n;
    }

    bool all_finite() const {
        for (auto& [k, v] : t)
            if (!v.allFinite()) return false;
        return true;
    }

    double squared_norm() const {
        double n = 0;
        for (auto& [k, v] : t) n += (double)v.squaredNorm();
        return n;
    }

    static WeightMap zeros_like(const WeightMap& o) {
        WeightMap z;
        for (auto& [k, v] : o.t) z.t[k] = Mat<S>::Zero(v.rows(), v.cols());
        return z;
    }

    void set_zero() {
        for (auto& [k, v] : t) v.setZero();
    }

    template <typename T>
    WeightMap<T> cast() const {
        WeightMap<T> out;
        for (auto& [k, v] : t) out.t[k] = v.template cast<T>();
        return out;
    }
};

namespace detail {
inline bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}
}  // namespace detail

/// Initialization: N(0, 0.02) for projections and convolutions; zeros for all
/// biases, FiLM maps, the final out-conv, null embeddings and the sap vector
/// (so modulation starts at identity and sap starts at mean pooling);
/// layer-norm gammas start at 1.
template <typename S>
WeightMap<S> init_weights(const UNetConfig& cfg, Rng& rng) {
    WeightMap<S> w;
    for (const TensorSpec& spec : weight_schema(cfg)) {
        Mat<S>& m = w.t[spec.name];
        m.resize(spec.rows, spec.cols);
        const bool zero = detail::ends_with(spec.name, ".bias") ||
                          detail::ends_with(spec.name, ".beta") ||
                          spec.name.find(".film.") != std::string::npos ||
                          spec.name == "out_conv.weight" ||
                          spec.name.rfind("cond.null", 0) == 0 ||
                          spec.name == "cond.sap.weight";
        if (zero) {
            m.setZero();
        } else if (detail::ends_with(spec.name, ".gamma")) {
            m.setOnes();
        } else {
            rng.fill_gaussian(m, 0.02);
        }
    }
    return w;
}

// ------------------------------------------------------------ embeddings ---

/// Sinusoidal timestep features: first half sines, second half cosines, with
/// geometric frequencies from 1 down to 1/10000.
template <typename S>
Vec<S> time_embedding(int t, int dim) {
    require(t >= 0, "time_embedding: t must be >= 0");
    require(dim >= 2 && dim % 2 == 0, "time_embedding: dim must be even and >= 2");
    const int half = dim / 2;
    Vec<S> out(dim);
    for (int i = 0; i < half; ++i) {
        double f = (half == 1) ? 1.0 : std::exp(-std::log(10000.0) * i / (half - 1));
        out[i] = (S)std::sin(t * f);
        out[half + i] = (S)std::cos(t * f);
    }
    return out;
}

template <typename S>
struct FiLMParams {
    Vec<S> gamma;  // multiplicative, parameterized as 1 + delta
    Vec<S> beta;
};

// ---------------------------------------------------------------- caches ---

template <typename S>
struct ResCache {
    nn::GroupNormCache<S> gn1;
    Tensor3<S> a;         // gn1 output (silu input)
    nn::ConvCache<S> c1;
    nn::GroupNormCache<S> gn2;
    Tensor3<S> gn2_out;   // film input
    Vec<S> dgamma;        // film scale delta used in forward
    Tensor3<S> film_out;  // silu input
    nn::ConvCache<S> c2;
    bool has_skip = false;
    nn::ConvCache<S> skipc;
};

template <typename S>
struct AttnBlockCache {
    nn::LayerNormCache<S> ln1;
    nn::AttnCache<S> at;
    nn::LayerNormCache<S> ln2;
    Mat<S> ff_in;    // ln2 output
    Mat<S> ff_hpre;  // pre-activation of the hidden layer
    Mat<S> ff_h;     // post-activation
};

template <typename S>
struct ResolvedCondition {
    enum class GlobalSource { kNull, kProvider, kMeanPool, kSapPool };
    GlobalSource src = GlobalSource::kNull;
    Vec<S> g_used;               // d_g vector fed to the global projection
    LocalEmbeddings<S> f_eff;    // tokens actually attended to
    bool local_is_null = false;
    Vec<S> sap_attn;             // pooling weights when src == kSapPool
};

template <typename S>
struct UNetCache {
    ResolvedCondition<S> rc;
    Vec<S> t_emb;
    Vec<S> cond_vec;
    nn::ConvCache<S> in_conv;
    std::vector<ResCache<S>> enc_res;
    std::vector<AttnBlockCache<S>> enc_attn;
    std::vector<nn::ConvCache<S>> down;
    ResCache<S> mid1, mid2;
    std::vector<ResCache<S>> dec_res;
    std::vector<AttnBlockCache<S>> dec_attn;
    std::vector<nn::ConvCache<S>> up;
    std::vector<std::array<int, 2>> up_in_hw;
    nn::GroupNormCache<S> out_gn;
    Tensor3<S> out_gn_out;  // silu input
    nn::ConvCache<S> out_conv;
};

// ------------------------------------------------------------------ unet ---

/// The denoiser v(z_t, t, condition). ResNet blocks are FiLM-modulated by the
/// projected global embedding concatenated with the time embedding;
/// spatial-transformer blocks at the configured levels cross-attend to the
/// local embeddings. Forward evaluation over a frozen weight map is pure and
/// thread-safe; recording a cache enables the exact reverse-mode backward.
template <typename S>
class UNet {
public:
    explicit UNet(UNetConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate_or_throw(); }

    const UNetConfig& config() const { return cfg_; }

    ResolvedCondition<S> resolve_condition(const Condition<S>& cond,
                                           const WeightMap<S>& w) const {
        using Src = typename ResolvedCondition<S>::GlobalSource;
        ResolvedCondition<S> rc;
        if (cond.local) {
            cond.local->validate();
            require(cond.local->dim() == cfg_.d_f, "condition: local embedding d_F mismatch");
            rc.f_eff = *cond.local;
            rc.local_is_null = false;
        } else {
            rc.f_eff.f = w.at("cond.null_local").transpose();  // 1 x d_f
            rc.f_eff.mask.assign(1, 1);
            rc.local_is_null = true;
        }
        rc.src = Src::kNull;
        rc.g_used = w.at("cond.null_global").col(0);
        switch (cfg_.conditioning) {
            case Conditioning::kNone:
                break;
            case Conditioning::kGlobal:
                if (cond.global) {
                    require(cond.global->dim() == cfg_.d_g,
                            "condition: global embedding d_G mismatch");
                    rc.g_used = cond.global->g;
                    rc.src = Src::kProvider;
                }
                break;
            case Conditioning::kMean:
                if (cond.local) {
                    rc.g_used = mean_pool(rc.f_eff).g;
                    rc.src = Src::kMeanPool;
                }
                break;
            case Conditioning::kSap:
                if (cond.local) {
                    const Vec<S> sapw = w.at("cond.sap.weight").col(0);
                    rc.sap_attn = sap_attention_weights(rc.f_eff, sapw);
                    rc.g_used = rc.f_eff.f.transpose() * rc.sap_attn;
                    rc.src = Src::kSapPool;
                }
                break;
        }
        return rc;
    }

    Tensor3<S> forward(const Tensor3<S>& z, int t, const Condition<S>& cond,
                       const WeightMap<S>& w, UNetCache<S>* cache) const {
        require(z.c == cfg_.in_channels, "unet: latent channel count mismatch");
        require(t >= 0, "unet: negative timestep");
        const int L = cfg_.levels();
        const int div = 1 << (L - 1);
        require(z.h % div == 0 && z.w % div == 0 && z.h >= div && z.w >= div,
                "unet: spatial dims must be divisible by 2^(levels-1)");

        UNetCache<S> local_cache;
        UNetCache<S>& cc = cache ? *cache : local_cache;
        cc.enc_res.resize(L);
        cc.enc_attn.resize(L);
        cc.down.resize(std::max(0, L - 1));
        cc.dec_res.resize(L);
        cc.dec_attn.resize(L);
        cc.up.resize(L);
        cc.up_in_hw.assign(L, {0, 0});

        cc.rc = resolve_condition(cond, w);
        cc.t_emb = time_embedding<S>(t, cfg_.time_embed_dim);
        Vec<S> gvec = w.at("cond.global_proj.weight") * cc.rc.g_used +
                      w.at("cond.global_proj.bias").col(0);
        cc.cond_vec.resize(cfg_.cond_dim());
        cc.cond_vec << gvec, cc.t_emb;

        bool rec = cache != nullptr;
        Tensor3<S> h = nn::conv2d(z, w.at("in_conv.weight"), w.at("in_conv.bias"), 3, 1,
                                  rec ? &cc.in_conv : nullptr);
        std::vector<Tensor3<S>> skips((size_t)L);
        for (int i = 0; i < L; ++i) {
            h = res_forward(pfx("enc.", i, ".res"), h, cc.cond_vec, w,
                            rec ? &cc.enc_res[i] : nullptr);
            if (cfg_.has_attention(i))
                h = attn_forward(pfx("enc.", i, ".attn"), h, cc.rc.f_eff, w,
                                 rec ? &cc.enc_attn[i] : nullptr);
            skips[i] = h;
            if (i < L - 1)
                h = nn::conv2d(h, w.at(pfx("down.", i, ".weight")), w.at(pfx("down.", i, ".bias")),
                               3, 2, rec ? &cc.down[i] : nullptr);
        }
        h = res_forward("mid.res1", h, cc.cond_vec, w, rec ? &cc.mid1 : nullptr);
        h = res_forward("mid.res2", h, cc.cond_vec, w, rec ? &cc.mid2 : nullptr);
        for (int i = L - 1; i >= 0; --i) {
            Tensor3<S> cat(h.c + skips[i].c, h.h, h.w);
            cat.m << h.m, skips[i].m;
            h = res_forward(pfx("dec.", i, ".res"), cat, cc.cond_vec, w,
                            rec ? &cc.dec_res[i] : nullptr);
            if (cfg_.has_attention(i))
                h = attn_forward(pfx("dec.", i, ".attn"), h, cc.rc.f_eff, w,
                                 rec ? &cc.dec_attn[i] : nullptr);
            if (i > 0) {
                cc.up_in_hw[i] = {h.h, h.w};
                h = nn::upsample_nearest2x(h);
                h = nn::conv2d(h, w.at(pfx("up.", i, ".weight")), w.at(pfx("up.", i, ".bias")), 3,
                               1, rec ? &cc.up[i] : nullptr);
            }
        }
        Tensor3<S> g = nn::group_norm(h, cfg_.groupnorm_groups, rec ? &cc.out_gn : nullptr);
        if (rec) cc.out_gn_out = g;
        Tensor3<S> s = g;
        s.m = nn::silu(g.m);
        Tensor3<S> out = nn::conv2d(s, w.at("out_conv.weight"), w.at("out_conv.bias"), 3, 1,
                                    rec ? &cc.out_conv : nullptr);
        return out;
    }

    /// Reverse-mode pass; accumulates parameter gradients into `grads`
    /// (which must be zeros_like(weights) or a running accumulator).
    void backward(const UNetCache<S>& cc, const WeightMap<S>& w, const Tensor3<S>& dout,
                  WeightMap<S>& grads) const {
        const int L = cfg_.levels();
        Vec<S> dcond = Vec<S>::Zero(cfg_.cond_dim());
        Mat<S> df = Mat<S>::Zero(cc.rc.f_eff.tokens(), cfg_.d_f);

        // out path
        Tensor3<S> d = nn::conv2d_backward(cc.out_conv, w.at("out_conv.weight"), dout,
                                           grads.at("out_conv.weight"),
                                           grads.at("out_conv.bias"));
        d.m = nn::silu_backward(cc.out_gn_out.m, d.m);
        d = nn::group_norm_backward(cc.out_gn, d);

        // decoder, reverse order (level 0 was processed last)
        std::vector<Tensor3<S>> dskip((size_t)L);
        for (int i = 0; i < L; ++i) {
            if (cfg_.has_attention(i))
                d = attn_backward(pfx("dec.", i, ".attn"), cc.dec_attn[i], d, w, grads, df);
            Tensor3<S> dcat =
                res_backward(pfx("dec.", i, ".res"), cc.dec_res[i], d, cc.cond_vec, w, grads, dcond);
            const int from_above = (i == L - 1) ? cfg_.channels_at(L - 1) : cfg_.channels_at(i + 1);
            const int ei = cfg_.channels_at(i);
            Tensor3<S> du(from_above, dcat.h, dcat.w);
            du.m = dcat.m.topRows(from_above);
            dskip[i] = Tensor3<S>(ei, dcat.h, dcat.w);
            dskip[i].m = dcat.m.bottomRows(ei);
            if (i == L - 1) {
                d = du;
            } else {
                Tensor3<S> t = nn::conv2d_backward(cc.up[i + 1], w.at(pfx("up.", i + 1, ".weight")),
                                                   du, grads.at(pfx("up.", i + 1, ".weight")),
                                                   grads.at(pfx("up.", i + 1, ".bias")));
                d = nn::upsample_nearest2x_backward(t, cc.up_in_hw[i + 1][0],
                                                    cc.up_in_hw[i + 1][1]);
            }
        }

        d = res_backward("mid.res2", cc.mid2, d, cc.cond_vec, w, grads, dcond);
        d = res_backward("mid.res1", cc.mid1, d, cc.cond_vec, w, grads, dcond);

        for (int i = L - 1; i >= 0; --i) {
            d.m += dskip[i].m;
            if (cfg_.has_attention(i))
                d = attn_backward(pfx("enc.", i, ".attn"), cc.enc_attn[i], d, w, grads, df);
            d = res_backward(pfx("enc.", i, ".res"), cc.enc_res[i], d, cc.cond_vec, w, grads, dcond);
            if (i > 0)
                d = nn::conv2d_backward(cc.down[i - 1], w.at(pfx("down.", i - 1, ".weight")), d,
                                        grads.at(pfx("down.", i - 1, ".weight")),
                                        grads.at(pfx("down.", i - 1, ".bias")));
        }
        nn::conv2d_backward(cc.in_conv, w.at("in_conv.weight"), d, grads.at("in_conv.weight"),
                            grads.at("in_conv.bias"));

        // conditioning path
        using Src = typename ResolvedCondition<S>::GlobalSource;
        Vec<S> dgvec = dcond.head(cfg_.time_embed_dim);
        grads.at("cond.global_proj.weight").noalias() += dgvec * cc.rc.g_used.transpose();
        grads.at("cond.global_proj.bias").col(0) += dgvec;
        Vec<S> dg = w.at("cond.global_proj.weight").transpose() * dgvec;
        switch (cc.rc.src) {
            case Src::kNull:
                grads.at("cond.null_global").col(0) += dg;
                break;
            case Src::kSapPool: {
                const Mat<S>& f = cc.rc.f_eff.f;
                const Vec<S>& a = cc.rc.sap_attn;
                Vec<S> da = f * dg;
                Vec<S> ds = (a.array() * (da.array() - a.dot(da))).matrix();
                grads.at("cond.sap.weight").col(0) += f.transpose() * ds;
                break;
            }
            case Src::kMeanPool:
            case Src::kProvider:
                break;
        }
        if (cc.rc.local_is_null) grads.at("cond.null_local").col(0) += df.row(0).transpose();
    }

    /// FiLM parameters each ResNet block would receive for the given global
    /// embedding (or the learned null embedding) and timestep.
    std::vector<std::pair<std::string, FiLMParams<S>>> film_from_condition(
        const std::optional<GlobalEmbedding<S>>& g, int t, const WeightMap<S>& w) const {
        Vec<S> g_used = g ? g->g : Vec<S>(w.at("cond.null_global").col(0));
        require((int)g_used.size() == cfg_.d_g, "film_from_condition: d_G mismatch");
        Vec<S> t_emb = time_embedding<S>(t, cfg_.time_embed_dim);
        Vec<S> gvec =
            w.at("cond.global_proj.weight") * g_used + w.at("cond.global_proj.bias").col(0);
        Vec<S> cond_vec(cfg_.cond_dim());
        cond_vec << gvec, t_emb;
        std::vector<std::pair<std::string, FiLMParams<S>>> out;
        for (const std::string& p : res_block_names()) {
            Vec<S> fp = w.at(p + ".film.weight") * cond_vec + w.at(p + ".film.bias").col(0);
            const int c = (int)fp.size() / 2;
            FiLMParams<S> fm;
            fm.gamma = Vec<S>::Ones(c) + fp.head(c);
            fm.beta = fp.tail(c);
            out.emplace_back(p, std::move(fm));
        }
        return out;
    }

    std::vector<std::string> res_block_names() const {
        std::vector<std::string> names;
        const int L = cfg_.levels();
        for (int i = 0; i < L; ++i) names.push_back(pfx("enc.", i, ".res"));
        names.push_back("mid.res1");
        names.push_back("mid.res2");
        for (int i = L - 1; i >= 0; --i) names.push_back(pfx("dec.", i, ".res"));
        return names;
    }

    std::vector<std::string> attn_block_names() const {
        std::vector<std::string> names;
        for (int i = 0; i < cfg_.levels(); ++i)
            if (cfg_.has_attention(i)) names.push_back(pfx("enc.", i, ".attn"));
        for (int i = cfg_.levels() - 1; i >= 0; --i)
            if (cfg_.has_attention(i)) names.push_back(pfx("dec.", i, ".attn"));
        return names;
    }

private:
    static std::string pfx(const char* a, int i, const char* b) {
        return std::string(a) + std::to_string(i) + b;
    }

    Tensor3<S> res_forward(const std::string& p, const Tensor3<S>& x, const Vec<S>& cond_vec,
                           const WeightMap<S>& w, ResCache<S>* cc) const {
        ResCache<S> tmp;
        ResCache<S>& c = cc ? *cc : tmp;
        const Mat<S>& fw = w.at(p + ".film.weight");
        Vec<S> fp = fw * cond_vec + w.at(p + ".film.bias").col(0);
        const int cout = (int)fp.size() / 2;
        c.dgamma = fp.head(cout);
        Vec<S> beta = fp.tail(cout);

        Tensor3<S> a = nn::group_norm(x, cfg_.groupnorm_groups, cc ? &c.gn1 : nullptr);
        if (cc) c.a = a;
        Tensor3<S> b = a;
        b.m = nn::silu(a.m);
        Tensor3<S> h =
            nn::conv2d(b, w.at(p + ".conv1.weight"), w.at(p + ".conv1.bias"), 3, 1,
                       cc ? &c.c1 : nullptr);
        Tensor3<S> g = nn::group_norm(h, cfg_.groupnorm_groups, cc ? &c.gn2 : nullptr);
        if (cc) c.gn2_out = g;
        Tensor3<S> f = g;
        f.m = (Vec<S>::Ones(cout) + c.dgamma).asDiagonal() * g.m;
        f.m.colwise() += beta;
        if (cc) c.film_out = f;
        Tensor3<S> e = f;
        e.m = nn::silu(f.m);
        Tensor3<S> y =
            nn::conv2d(e, w.at(p + ".conv2.weight"), w.at(p + ".conv2.bias"), 3, 1,
                       cc ? &c.c2 : nullptr);
        if (x.c == y.c) {
            c.has_skip = false;
            y.m += x.m;
        } else {
            c.has_skip = true;
            Tensor3<S> s = nn::conv2d(x, w.at(p + ".skip.weight"), w.at(p + ".skip.bias"), 1, 1,
                                      cc ? &c.skipc : nullptr);
            y.m += s.m;
        }
        return y;
    }

    Tensor3<S> res_backward(const std::string& p, const ResCache<S>& c, const Tensor3<S>& dy,
                            const Vec<S>& cond_vec, const WeightMap<S>& w, WeightMap<S>& grads,
                            Vec<S>& dcond) const {
        Tensor3<S> de = nn::conv2d_backward(c.c2, w.at(p + ".conv2.weight"), dy,
                                            grads.at(p + ".conv2.weight"),
                                            grads.at(p + ".conv2.bias"));
        de.m = nn::silu_backward(c.film_out.m, de.m);
        const int cout = (int)c.dgamma.size();
        Vec<S> ddg = Vec<S>::Zero(cout), dbeta = Vec<S>::Zero(cout);
        Mat<S> dg_m = nn::film_backward(c.gn2_out.m, c.dgamma, de.m, ddg, dbeta);
        Tensor3<S> dgt(de.c, de.h, de.w);
        dgt.m = std::move(dg_m);
        Vec<S> dfp(2 * cout);
        dfp << ddg, dbeta;
        grads.at(p + ".film.weight").noalias() += dfp * cond_vec.transpose();
        grads.at(p + ".film.bias").col(0) += dfp;
        dcond.noalias() += w.at(p + ".film.weight").transpose() * dfp;
        Tensor3<S> dh = nn::group_norm_backward(c.gn2, dgt);
        Tensor3<S> db = nn::conv2d_backward(c.c1, w.at(p + ".conv1.weight"), dh,
                                            grads.at(p + ".conv1.weight"),
                                            grads.at(p + ".conv1.bias"));
        db.m = nn::silu_backward(c.a.m, db.m);
        Tensor3<S> dx = nn::group_norm_backward(c.gn1, db);
        if (c.has_skip) {
            Tensor3<S> ds = nn::conv2d_backward(c.skipc, w.at(p + ".skip.weight"), dy,
                                                grads.at(p + ".skip.weight"),
                                                grads.at(p + ".skip.bias"));
            dx.m += ds.m;
        } else {
            dx.m += dy.m;
        }
        return dx;
    }

    Tensor3<S> attn_forward(const std::string& p, const Tensor3<S>& x,
                            const LocalEmbeddings<S>& f, const WeightMap<S>& w,
                            AttnBlockCache<S>* cc) const {
        AttnBlockCache<S> tmp;
        AttnBlockCache<S>& c = cc ? *cc : tmp;
        nn::AttnWeightsRef<S> ar{&w.at(p + ".q.weight"), &w.at(p + ".k.weight"),
                                 &w.at(p + ".v.weight"), &w.at(p + ".proj.weight"),
                                 &w.at(p + ".proj.bias")};
        Mat<S> u = nn::layer_norm(x.m, w.at(p + ".ln1.gamma"), w.at(p + ".ln1.beta"),
                                  cc ? &c.ln1 : nullptr);
        Mat<S> att = nn::attention(u, f, ar, cfg_.num_heads, cfg_.head_dim,
                                   cc ? &c.at : nullptr);
        Tensor3<S> x1 = x;
        x1.m += att;
        Mat<S> v2 = nn::layer_norm(x1.m, w.at(p + ".ln2.gamma"), w.at(p + ".ln2.beta"),
                                   cc ? &c.ln2 : nullptr);
        Mat<S> hpre = w.at(p + ".ff1.weight") * v2;
        hpre.colwise() += w.at(p + ".ff1.bias").col(0);
        Mat<S> hh = nn::silu(hpre);
        Mat<S> ffo = w.at(p + ".ff2.weight") * hh;
        ffo.colwise() += w.at(p + ".ff2.bias").col(0);
        if (cc) {
            c.ff_in = std::move(v2);
            c.ff_hpre = std::move(hpre);
            c.ff_h = hh;
        }
        Tensor3<S> y = x1;
        y.m += ffo;
        return y;
    }

    Tensor3<S> attn_backward(const std::string& p, const AttnBlockCache<S>& c,
                             const Tensor3<S>& dy, const WeightMap<S>& w, WeightMap<S>& grads,
                             Mat<S>& df) const {
        // y = x1 + ff(ln2(x1)); x1 = x + attn(ln1(x))
        grads.at(p + ".ff2.weight").noalias() += dy.m * c.ff_h.transpose();
        grads.at(p + ".ff2.bias").col(0) += dy.m.rowwise().sum();
        Mat<S> dhh = w.at(p + ".ff2.weight").transpose() * dy.m;
        Mat<S> dhpre = nn::silu_backward(c.ff_hpre, dhh);
        grads.at(p + ".ff1.weight").noalias() += dhpre * c.ff_in.transpose();
        grads.at(p + ".ff1.bias").col(0) += dhpre.rowwise().sum();
        Mat<S> dv2 = w.at(p + ".ff1.weight").transpose() * dhpre;
        Mat<S> dx1 = nn::layer_norm_backward(c.ln2, w.at(p + ".ln2.gamma"), dv2,
                                             grads.at(p + ".ln2.gamma"),
                                             grads.at(p + ".ln2.beta"));
        dx1 += dy.m;
        nn::AttnWeightsRef<S> ar{&w.at(p + ".q.weight"), &w.at(p + ".k.weight"),
                                 &w.at(p + ".v.weight"), &w.at(p + ".proj.weight"),
                                 &w.at(p + ".proj.bias")};
        Mat<S> du = nn::attention_backward(c.at, ar, dx1, grads.at(p + ".q.weight"),
                                           grads.at(p + ".k.weight"), grads.at(p + ".v.weight"),
                                           grads.at(p + ".proj.weight"),
                                           grads.at(p + ".proj.bias"), df);
        Mat<S> dx = nn::layer_norm_backward(c.ln1, w.at(p + ".ln1.gamma"), du,
                                            grads.at(p + ".ln1.gamma"),
                                            grads.at(p + ".ln1.beta"));
        dx += dx1;
        Tensor3<S> out(dy.c, dy.h, dy.w);
        out.m = std::move(dx);
        return out;
    }

    UNetConfig cfg_;
};

/// Residual cross-attention on a feature map: flattens spatial positions to
/// queries, attends over the token embeddings with the named layer's
/// projections and adds the result back onto the input. `probe_row_sums`, if
/// given, receives the softmax row sums per (head, query).
template <typename S>
Tensor3<S> cross_attention(const Tensor3<S>& h, const LocalEmbeddings<S>& f,
                           const WeightMap<S>& w, const std::string& layer_prefix,
                           const UNetConfig& cfg, Vec<S>* probe_row_sums = nullptr) {
    f.validate();
    require(f.dim() == cfg.d_f, "cross_attention: d_F mismatch");
    nn::AttnWeightsRef<S> ar{&w.at(layer_prefix + ".q.weight"), &w.at(layer_prefix + ".k.weight"),
                             &w.at(layer_prefix + ".v.weight"),
                             &w.at(layer_prefix + ".proj.weight"),
                             &w.at(layer_prefix + ".proj.bias")};
    require(ar.wq->cols() == h.c, "cross_attention: layer width mismatch");
    Mat<S> att = nn::attention(h.m, f, ar, cfg.num_heads, cfg.head_dim, (nn::AttnCache<S>*)nullptr,
                               probe_row_sums);
    Tensor3<S> y = h;
    y.m += att;
    return y;
}

}  // namespace ttm
