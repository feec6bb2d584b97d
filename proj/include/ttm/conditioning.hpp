#pragma once

#include "ttm/core.hpp"
#include "ttm/io.hpp"

#include <algorithm>
#include <cctype>
#include <memory>
#include <optional>
#include <sstream>
#include <variant>
#include <vector>

namespace ttm {

/// Per-token text embeddings: one row per token plus a validity mask
/// (true = real token, false = padding).
template <typename Scalar>
struct LocalEmbeddings {
    Mat<Scalar> f;               // M x d_F
    std::vector<uint8_t> mask;   // M entries

    int tokens() const { return (int)f.rows(); }
    int dim() const { return (int)f.cols(); }

    int valid_count() const {
        int n = 0;
        for (uint8_t b : mask) n += (b != 0);
        return n;
    }

    static LocalEmbeddings all_valid(Mat<Scalar> f_) {
        LocalEmbeddings e;
        e.mask.assign((size_t)f_.rows(), 1);
        e.f = std::move(f_);
        return e;
    }

    void validate() const {
        require(f.rows() >= 1, "LocalEmbeddings: need at least one token");
        require((size_t)f.rows() == mask.size(), "LocalEmbeddings: mask length mismatch");
        require(f.allFinite(), "LocalEmbeddings: non-finite values");
    }
};

template <typename Scalar>
struct GlobalEmbedding {
    Vec<Scalar> g;
    int dim() const { return (int)g.size(); }
};

/// A (global, local) conditioning pair. nullopt marks the dropped/null state;
/// the denoiser substitutes its learned null embeddings for missing parts.
template <typename Scalar>
struct Condition {
    std::optional<GlobalEmbedding<Scalar>> global;
    std::optional<LocalEmbeddings<Scalar>> local;

    static Condition null() { return {}; }
    bool is_null() const { return !global && !local; }
};

/// Masked average of the valid token rows.
template <typename Scalar>
GlobalEmbedding<Scalar> mean_pool(const LocalEmbeddings<Scalar>& f) {
    f.validate();
    int valid = f.valid_count();
    require(valid >= 1, "mean_pool: all tokens masked");
    Vec<Scalar> acc = Vec<Scalar>::Zero(f.dim());
    for (int i = 0; i < f.tokens(); ++i)
        if (f.mask[i]) acc += f.f.row(i).transpose();
    return {acc / Scalar(valid)};
}

/// Self-attention pooling: scores s = F * w, masked rows excluded from the
/// softmax, output = softmax(s)^T * F. With w = 0 this reduces exactly to
/// mean pooling over the valid rows.
template <typename Scalar>
GlobalEmbedding<Scalar> self_attention_pool(const LocalEmbeddings<Scalar>& f,
                                            const Vec<Scalar>& w) {
    f.validate();
    require(w.size() == f.dim(), "self_attention_pool: weight dimension mismatch");
    require(f.valid_count() >= 1, "self_attention_pool: all tokens masked");
    const int m = f.tokens();
    Vec<Scalar> scores = f.f * w;
    Scalar max_s = -std::numeric_limits<Scalar>::infinity();
    for (int i = 0; i < m; ++i)
        if (f.mask[i]) max_s = std::max(max_s, scores[i]);
    Vec<Scalar> a = Vec<Scalar>::Zero(m);
    Scalar z = 0;
    for (int i = 0; i < m; ++i) {
        if (!f.mask[i]) continue;
        a[i] = std::exp(scores[i] - max_s);
        z += a[i];
    }
    a /= z;
    return {f.f.transpose() * a};
}

/// Attention weights of self_attention_pool (a probability simplex over the
/// valid rows); used for gradients and diagnostics.
template <typename Scalar>
Vec<Scalar> sap_attention_weights(const LocalEmbeddings<Scalar>& f, const Vec<Scalar>& w) {
    require(w.size() == f.dim(), "sap_attention_weights: weight dimension mismatch");
    require(f.valid_count() >= 1, "sap_attention_weights: all tokens masked");
    const int m = f.tokens();
    Vec<Scalar> scores = f.f * w;
    Scalar max_s = -std::numeric_limits<Scalar>::infinity();
    for (int i = 0; i < m; ++i)
        if (f.mask[i]) max_s = std::max(max_s, scores[i]);
    Vec<Scalar> a = Vec<Scalar>::Zero(m);
    Scalar z = 0;
    for (int i = 0; i < m; ++i) {
        if (!f.mask[i]) continue;
        a[i] = std::exp(scores[i] - max_s);
        z += a[i];
    }
    a /= z;
    return a;
}

/// Classifier-free-guidance dropout. One shared draw replaces both parts with
/// their null markers; with independent_draws, global and local are dropped
/// independently (one extra draw). Draw count per call is fixed, so a given
/// seed always yields the same decision sequence.
template <typename Scalar>
Condition<Scalar> cfg_dropout(const Condition<Scalar>& c, double p, Rng& rng,
                              bool independent_draws = false) {
    require(p >= 0.0 && p <= 1.0, "cfg_dropout: p must be in [0, 1]");
    if (!independent_draws) {
        bool drop = rng.uniform() < p;
        return drop ? Condition<Scalar>::null() : c;
    }
    bool drop_g = rng.uniform() < p;
    bool drop_l = rng.uniform() < p;
    Condition<Scalar> out = c;
    if (drop_g) out.global.reset();
    if (drop_l) out.local.reset();
    return out;
}

/// Lowercase whitespace tokenizer used by the built-in providers.
inline std::vector<std::string> tokenize(const std::string& prompt) {
    std::vector<std::string> toks;
    std::istringstream in(prompt);
    std::string t;
    while (in >> t) {
        std::transform(t.begin(), t.end(), t.begin(),
                       [](unsigned char ch) { return (char)std::tolower(ch); });
        toks.push_back(t);
    }
    return toks;
}

/// Deterministic per-token embedding: each token maps to a fixed unit-norm
/// pseudo-random vector keyed on (token, seed). Identical tokens share a row.
template <typename Scalar>
LocalEmbeddings<Scalar> hash_embed(const std::vector<std::string>& tokens, int d_f,
                                   uint64_t seed) {
    require(!tokens.empty(), "hash_embed: empty prompt");
    require(d_f >= 1, "hash_embed: dimension must be positive");
    Mat<Scalar> f(tokens.size(), d_f);
    for (size_t i = 0; i < tokens.size(); ++i) {
        Rng rng(derive_seed(seed, tokens[i]));
        Vec<double> row(d_f);
        for (int j = 0; j < d_f; ++j) row[j] = rng.gaussian();
        row /= row.norm();
        f.row(i) = row.transpose().cast<Scalar>();
    }
    return LocalEmbeddings<Scalar>::all_valid(std::move(f));
}

/// Whole-prompt counterpart of hash_embed: one unit-norm vector keyed on the
/// full token sequence.
template <typename Scalar>
GlobalEmbedding<Scalar> hash_embed_global(const std::vector<std::string>& tokens, int d_g,
                                          uint64_t seed) {
    require(!tokens.empty(), "hash_embed_global: empty prompt");
    require(d_g >= 1, "hash_embed_global: dimension must be positive");
    std::string joined;
    for (const auto& t : tokens) {
        joined += t;
        joined.push_back('\x1f');
    }
    Rng rng(derive_seed(seed, joined));
    Vec<double> g(d_g);
    for (int j = 0; j < d_g; ++j) g[j] = rng.gaussian();
    g /= g.norm();
    return {g.cast<Scalar>()};
}

// -------------------------------------------------------------------------
// Embedding interchange format
//
// EMB1: magic "EMB1", u32 rows M, u32 cols d, u32 flags (bit0 = global, then
// M must be 1), then M*d float32 values, row-major. Round trips bit-exactly.
// -------------------------------------------------------------------------

inline constexpr uint32_t kEmbFlagGlobal = 1u;

inline void save_local_embeddings(const std::string& path, const Mat<float>& f) {
    require(f.rows() >= 1 && f.cols() >= 1, "save_local_embeddings: empty matrix");
    std::string out;
    out += "EMB1";
    io::put_u32(out, (uint32_t)f.rows());
    io::put_u32(out, (uint32_t)f.cols());
    io::put_u32(out, 0u);
    for (Eigen::Index i = 0; i < f.rows(); ++i)
        for (Eigen::Index j = 0; j < f.cols(); ++j) io::put_f32(out, f(i, j));
    io::write_file(path, out);
}

inline void save_global_embedding(const std::string& path, const Vec<float>& g) {
    require(g.size() >= 1, "save_global_embedding: empty vector");
    std::string out;
    out += "EMB1";
    io::put_u32(out, 1u);
    io::put_u32(out, (uint32_t)g.size());
    io::put_u32(out, kEmbFlagGlobal);
    for (Eigen::Index j = 0; j < g.size(); ++j) io::put_f32(out, g[j]);
    io::write_file(path, out);
}

using LoadedEmbeddings = std::variant<LocalEmbeddings<float>, GlobalEmbedding<float>>;

inline LoadedEmbeddings load_embeddings(const std::string& path) {
    auto buf = io::read_file(path);
    io::Reader r(buf.data(), buf.size(), path);
    if (r.str(4) != "EMB1") throw std::runtime_error(path + ": bad magic, expected EMB1");
    uint32_t rows = r.u32(), cols = r.u32(), flags = r.u32();
    if (rows == 0 || cols == 0) throw std::runtime_error(path + ": zero dimension in header");
    if (flags & ~kEmbFlagGlobal) throw std::runtime_error(path + ": unknown flag bits");
    bool global = (flags & kEmbFlagGlobal) != 0;
    if (global && rows != 1) throw std::runtime_error(path + ": global embedding must have M = 1");
    if ((uint64_t)rows * cols > (64ull << 20))
        throw std::runtime_error(path + ": implausible dimensions");
    Mat<float> f(rows, cols);
    for (uint32_t i = 0; i < rows; ++i)
        for (uint32_t j = 0; j < cols; ++j) f(i, j) = r.f32();
    r.expect_end();
    if (!f.allFinite()) throw std::runtime_error(path + ": non-finite values");
    if (global) return GlobalEmbedding<float>{f.row(0).transpose()};
    return LocalEmbeddings<float>::all_valid(std::move(f));
}

// -------------------------------------------------------------------------
// Embedding providers
// -------------------------------------------------------------------------

/// Source of prompt embeddings. Implementations must be safe for concurrent
/// reads; deterministic providers return identical embeddings per prompt.
template <typename Scalar>
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string name() const = 0;
    virtual int d_f() const = 0;
    virtual int d_g() const = 0;
    virtual bool deterministic() const = 0;
    virtual LocalEmbeddings<Scalar> local(const std::string& prompt) const = 0;
    virtual GlobalEmbedding<Scalar> global(const std::string& prompt) const = 0;
};

template <typename Scalar>
class HashProvider final : public EmbeddingProvider<Scalar> {
public:
    HashProvider(int d_f, int d_g, uint64_t seed) : d_f_(d_f), d_g_(d_g), seed_(seed) {}
    std::string name() const override { return "hash"; }
    int d_f() const override { return d_f_; }
    int d_g() const override { return d_g_; }
    bool deterministic() const override { return true; }
    LocalEmbeddings<Scalar> local(const std::string& prompt) const override {
        return hash_embed<Scalar>(tokenize(prompt), d_f_, seed_);
    }
    GlobalEmbedding<Scalar> global(const std::string& prompt) const override {
        return hash_embed_global<Scalar>(tokenize(prompt), d_g_, derive_seed(seed_, "global"));
    }

private:
    int d_f_, d_g_;
    uint64_t seed_;
};

/// Reads externally computed embeddings from <dir>/<fnv1a64(prompt)>.emb
/// (local) and <dir>/<fnv1a64(prompt)>.g.emb (global), both in EMB1 format.
template <typename Scalar>
class FileProvider final : public EmbeddingProvider<Scalar> {
public:
    FileProvider(std::string dir, int d_f, int d_g)
        : dir_(std::move(dir)), d_f_(d_f), d_g_(d_g) {}
    std::string name() const override { return "file"; }
    int d_f() const override { return d_f_; }
    int d_g() const override { return d_g_; }
    bool deterministic() const override { return true; }

    static std::string prompt_key(const std::string& prompt) {
        std::string joined;
        for (const auto& t : tokenize(prompt)) {
            joined += t;
            joined.push_back('\x1f');
        }
        return hex64(fnv1a64(joined));
    }

    LocalEmbeddings<Scalar> local(const std::string& prompt) const override {
        std::string path = dir_ + "/" + prompt_key(prompt) + ".emb";
        auto loaded = load_embeddings(path);
        auto* loc = std::get_if<LocalEmbeddings<float>>(&loaded);
        if (!loc) throw std::runtime_error(path + ": expected local embeddings, found global");
        require(loc->dim() == d_f_, path + ": dimension mismatch vs model config (d_F)");
        LocalEmbeddings<Scalar> out;
        out.f = loc->f.template cast<Scalar>();
        out.mask = loc->mask;
        return out;
    }

    GlobalEmbedding<Scalar> global(const std::string& prompt) const override {
        std::string path = dir_ + "/" + prompt_key(prompt) + ".g.emb";
        auto loaded = load_embeddings(path);
        auto* glob = std::get_if<GlobalEmbedding<float>>(&loaded);
        if (!glob) throw std::runtime_error(path + ": expected global embedding, found local");
        require(glob->dim() == d_g_, path + ": dimension mismatch vs model config (d_G)");
        return {glob->g.template cast<Scalar>()};
    }

private:
    std::string dir_;
    int d_f_, d_g_;
};

}  // namespace ttm
