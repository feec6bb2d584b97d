#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ttm/conditioning.hpp"

#include <filesystem>

using namespace ttm;

namespace {

LocalEmbeddings<double> make_local(std::initializer_list<std::initializer_list<double>> rows,
                                   std::vector<uint8_t> mask = {}) {
    int m = (int)rows.size();
    int d = (int)rows.begin()->size();
    Mat<double> f(m, d);
    int i = 0;
    for (auto& r : rows) {
        int j = 0;
        for (double v : r) f(i, j++) = v;
        ++i;
    }
    LocalEmbeddings<double> e;
    e.f = f;
    e.mask = mask.empty() ? std::vector<uint8_t>((size_t)m, 1) : mask;
    return e;
}

std::filesystem::path temp_dir() {
    auto d = std::filesystem::temp_directory_path() / "ttm_cond_test";
    std::filesystem::create_directories(d);
    return d;
}

}  // namespace

TEST_CASE("mean_pool arithmetic and masking") {
    auto e = make_local({{1, 2}, {3, 4}});
    auto g = mean_pool(e);
    CHECK(g.g[0] == doctest::Approx(2.0));
    CHECK(g.g[1] == doctest::Approx(3.0));

    auto single = make_local({{5, -1, 2}});
    auto gs = mean_pool(single);
    CHECK(gs.g[0] == 5.0);
    CHECK(gs.g[1] == -1.0);
    CHECK(gs.g[2] == 2.0);

    auto masked = make_local({{1, 0}, {0, 1}, {9, 9}}, {1, 1, 0});
    auto gm = mean_pool(masked);
    CHECK(gm.g[0] == doctest::Approx(0.5));
    CHECK(gm.g[1] == doctest::Approx(0.5));
}

TEST_CASE("mean_pool rejects fully masked input") {
    auto e = make_local({{1, 2}, {3, 4}}, {0, 0});
    CHECK_THROWS(mean_pool(e));
}

TEST_CASE("mean_pool is permutation invariant over valid rows") {
    Rng rng(3);
    Mat<double> f(5, 4);
    rng.fill_gaussian(f);
    auto e = LocalEmbeddings<double>::all_valid(f);
    auto g = mean_pool(e);
    // rotate rows
    Mat<double> fr(5, 4);
    for (int i = 0; i < 5; ++i) fr.row(i) = f.row((i + 2) % 5);
    auto gr = mean_pool(LocalEmbeddings<double>::all_valid(fr));
    CHECK((g.g - gr.g).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("self_attention_pool with zero weights equals mean pooling") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        int m = (int)rng.uniform_int(1, 7);
        int d = (int)rng.uniform_int(1, 9);
        Mat<double> f(m, d);
        rng.fill_gaussian(f);
        std::vector<uint8_t> mask((size_t)m, 1);
        if (m > 1) mask[(size_t)rng.uniform_int(0, m - 1)] = 0;
        bool any = false;
        for (auto b : mask) any |= (b != 0);
        if (!any) mask[0] = 1;
        LocalEmbeddings<double> e;
        e.f = f;
        e.mask = mask;
        auto sap = self_attention_pool(e, Vec<double>(Vec<double>::Zero(d)));
        auto mean = mean_pool(e);
        CHECK((sap.g - mean.g).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("self_attention_pool hand-computed softmax example") {
    auto e = make_local({{1, 0}, {0, 1}});
    Vec<double> w(2);
    w << 1, 0;
    auto g = self_attention_pool(e, w);
    double a0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
    CHECK(a0 == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(g.g[0] == doctest::Approx(a0).epsilon(1e-9));
    CHECK(g.g[1] == doctest::Approx(1.0 - a0).epsilon(1e-9));
}

TEST_CASE("self_attention_pool singleton and output in convex hull") {
    auto single = make_local({{2, 3, 4}});
    Vec<double> w(3);
    w << 5, -2, 1;
    auto g = self_attention_pool(single, w);
    CHECK(g.g[0] == doctest::Approx(2.0));
    CHECK(g.g[1] == doctest::Approx(3.0));
    CHECK(g.g[2] == doctest::Approx(4.0));

    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        int m = (int)rng.uniform_int(2, 6);
        Mat<double> f(m, 3);
        rng.fill_gaussian(f);
        auto e = LocalEmbeddings<double>::all_valid(f);
        Vec<double> ww(3);
        for (int i = 0; i < 3; ++i) ww[i] = rng.gaussian();
        auto a = sap_attention_weights(e, ww);
        CHECK(a.minCoeff() >= 0.0);
        CHECK(a.sum() == doctest::Approx(1.0).epsilon(1e-9));
        auto pooled = self_attention_pool(e, ww);
        CHECK((pooled.g - f.transpose() * a).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("self_attention_pool is permutation invariant over valid rows") {
    Rng rng(23);
    Mat<double> f(4, 3);
    rng.fill_gaussian(f);
    Vec<double> w(3);
    w << 0.3, -1.2, 0.5;
    auto g = self_attention_pool(LocalEmbeddings<double>::all_valid(f), w);
    Mat<double> fr(4, 3);
    int perm[4] = {2, 0, 3, 1};
    for (int i = 0; i < 4; ++i) fr.row(i) = f.row(perm[i]);
    auto gr = self_attention_pool(LocalEmbeddings<double>::all_valid(fr), w);
    CHECK((g.g - gr.g).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cfg_dropout boundaries and frequency") {
    Condition<double> c;
    c.local = make_local({{1, 2}});
    c.global = GlobalEmbedding<double>{Vec<double>::Ones(2)};

    Rng rng0(1);
    for (int i = 0; i < 100; ++i) {
        auto out = cfg_dropout(c, 0.0, rng0);
        CHECK(!out.is_null());
        CHECK(out.local.has_value());
        CHECK(out.global.has_value());
    }
    Rng rng1(1);
    for (int i = 0; i < 100; ++i) {
        auto out = cfg_dropout(c, 1.0, rng1);
        CHECK(out.is_null());
    }
    Rng rng2(77);
    int dropped = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i)
        if (cfg_dropout(c, 0.1, rng2).is_null()) ++dropped;
    double frac = dropped / (double)n;
    CHECK(frac >= 0.094);
    CHECK(frac <= 0.106);
}

TEST_CASE("cfg_dropout joint draw nulls both parts together") {
    Condition<double> c;
    c.local = make_local({{1, 2}});
    c.global = GlobalEmbedding<double>{Vec<double>::Ones(2)};
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        auto out = cfg_dropout(c, 0.5, rng);
        CHECK(out.global.has_value() == out.local.has_value());
    }
}

TEST_CASE("cfg_dropout with a fixed seed is bit-exactly reproducible") {
    Condition<double> c;
    c.local = make_local({{1, 2}});
    std::vector<bool> first, second;
    {
        Rng rng(1234);
        for (int i = 0; i < 500; ++i) first.push_back(cfg_dropout(c, 0.3, rng).is_null());
    }
    {
        Rng rng(1234);
        for (int i = 0; i < 500; ++i) second.push_back(cfg_dropout(c, 0.3, rng).is_null());
    }
    CHECK(first == second);
}

TEST_CASE("cfg_dropout rejects p outside [0,1]") {
    Condition<double> c;
    Rng rng(1);
    CHECK_THROWS(cfg_dropout(c, -0.1, rng));
    CHECK_THROWS(cfg_dropout(c, 1.1, rng));
}

TEST_CASE("hash_embed determinism and row independence") {
    auto t1 = tokenize("calm piano with slow tempo");
    auto a = hash_embed<double>(t1, 16, 42);
    auto b = hash_embed<double>(t1, 16, 42);
    CHECK(a.f == b.f);

    auto t2 = tokenize("calm guitar with slow tempo");
    auto c = hash_embed<double>(t2, 16, 42);
    for (int i = 0; i < a.tokens(); ++i) {
        if (i == 1)
            CHECK((a.f.row(i) - c.f.row(i)).cwiseAbs().maxCoeff() > 1e-6);
        else
            CHECK(a.f.row(i) == c.f.row(i));
    }
    for (int i = 0; i < a.tokens(); ++i)
        CHECK(a.f.row(i).norm() == doctest::Approx(1.0).epsilon(1e-6));

    CHECK_THROWS(hash_embed<double>({}, 16, 42));
}

TEST_CASE("identical tokens map to identical rows") {
    auto e = hash_embed<double>({"echo", "echo", "other"}, 8, 7);
    CHECK(e.f.row(0) == e.f.row(1));
    CHECK((e.f.row(0) - e.f.row(2)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("embedding interchange round trip is bit-exact") {
    auto dir = temp_dir();
    Rng rng(31);
    Mat<float> f(4, 16);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 16; ++j) f(i, j) = (float)rng.gaussian();
    auto path = (dir / "local.emb").string();
    save_local_embeddings(path, f);
    auto loaded = load_embeddings(path);
    auto* loc = std::get_if<LocalEmbeddings<float>>(&loaded);
    REQUIRE(loc != nullptr);
    CHECK(loc->f.rows() == 4);
    CHECK(loc->f.cols() == 16);
    CHECK(loc->f == f);

    Vec<float> g(5);
    g << 1.5f, -2.25f, 0.0f, 3.0f, -0.125f;
    auto gpath = (dir / "global.emb").string();
    save_global_embedding(gpath, g);
    auto gl = load_embeddings(gpath);
    auto* gv = std::get_if<GlobalEmbedding<float>>(&gl);
    REQUIRE(gv != nullptr);
    CHECK(gv->g == g);
}

TEST_CASE("truncated embedding payload is rejected, not partially read") {
    auto dir = temp_dir();
    Mat<float> f(3, 5);
    f.setConstant(1.0f);
    auto path = (dir / "trunc.emb").string();
    save_local_embeddings(path, f);
    auto bytes = io::read_file(path);
    std::string cut((const char*)bytes.data(), bytes.size() - 6);
    io::write_file(path, cut);
    CHECK_THROWS(load_embeddings(path));
}

TEST_CASE("malformed embedding headers are rejected") {
    auto dir = temp_dir();
    auto path = (dir / "bad.emb").string();
    io::write_file(path, "NOPE");
    CHECK_THROWS(load_embeddings(path));

    // global flag with M != 1
    std::string s;
    s += "EMB1";
    io::put_u32(s, 2);
    io::put_u32(s, 3);
    io::put_u32(s, 1);
    for (int i = 0; i < 6; ++i) io::put_f32(s, 0.0f);
    io::write_file(path, s);
    CHECK_THROWS(load_embeddings(path));

    // non-finite payload
    std::string nf;
    nf += "EMB1";
    io::put_u32(nf, 1);
    io::put_u32(nf, 2);
    io::put_u32(nf, 0);
    io::put_f32(nf, 1.0f);
    io::put_f32(nf, std::numeric_limits<float>::quiet_NaN());
    io::write_file(path, nf);
    CHECK_THROWS(load_embeddings(path));
}

TEST_CASE("hash provider round trips through the file provider layout") {
    auto dir = temp_dir() / "prov";
    std::filesystem::create_directories(dir);
    HashProvider<float> hp(12, 8, 99);
    std::string prompt = "bright strings with fast tempo";
    auto local = hp.local(prompt);
    auto global = hp.global(prompt);
    auto key = FileProvider<float>::prompt_key(prompt);
    save_local_embeddings((dir / (key + ".emb")).string(), local.f);
    save_global_embedding((dir / (key + ".g.emb")).string(), global.g);

    FileProvider<float> fp(dir.string(), 12, 8);
    CHECK(fp.local(prompt).f == local.f);
    CHECK(fp.global(prompt).g == global.g);

    FileProvider<float> wrong(dir.string(), 13, 8);
    CHECK_THROWS(wrong.local(prompt));
}
