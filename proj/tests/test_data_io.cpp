#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "kernreg/data_io.hpp"
#include "testutil.hpp"

using namespace kernreg;
using namespace kernreg::testutil;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("load_idx: crafted image and label fixtures") {
    // 1x2x2 image with bytes {0,255,0,255}
    std::string ipath = tmp_path("kr_test_img.idx");
    write_bytes(ipath, {0x00, 0x00, 0x08, 0x03,  // magic
                        0x00, 0x00, 0x00, 0x01,  // n
                        0x00, 0x00, 0x00, 0x02,  // h
                        0x00, 0x00, 0x00, 0x02,  // w
                        0, 255, 0, 255});
    Tensor img = load_idx(ipath);
    CHECK(img.shape == Shape{1, 2, 2});
    CHECK(img.data == std::vector<double>{0.0, 1.0, 0.0, 1.0});

    // labels {7,2,1}
    std::string lpath = tmp_path("kr_test_lbl.idx");
    write_bytes(lpath, {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x03, 7, 2, 1});
    Tensor lbl = load_idx(lpath);
    CHECK(lbl.shape == Shape{3});
    CHECK(lbl.data == std::vector<double>{7.0, 2.0, 1.0});

    // wrong magic names the expected ones
    std::string bpath = tmp_path("kr_test_bad.idx");
    write_bytes(bpath, {0x00, 0x00, 0x08, 0x99, 0x00, 0x00, 0x00, 0x01});
    CHECK_THROWS_WITH_AS(load_idx(bpath), doctest::Contains("0x00000803"), Error);

    // truncated payload reports the offset
    std::string tpath = tmp_path("kr_test_trunc.idx");
    write_bytes(tpath, {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x05, 1, 2});
    CHECK_THROWS_WITH_AS(load_idx(tpath), doctest::Contains("truncated"), Error);

    CHECK_THROWS_AS(load_idx(tmp_path("kr_does_not_exist.idx")), Error);
}

TEST_CASE("idx round trip on random small tensors") {
    Rng rng(3);
    for (int t = 0; t < 5; ++t) {
        Tensor img({4, 5, 6});
        for (auto& v : img.data) v = static_cast<double>(rng.below(256)) / 255.0;
        std::string path = tmp_path("kr_rt.idx");
        save_idx_images(path, img);
        Tensor back = load_idx(path);
        CHECK(back.shape == img.shape);
        CHECK(back.data == img.data);  // byte-exact values round trip
    }
    std::vector<std::int64_t> labels{0, 9, 3, 255};
    std::string lpath = tmp_path("kr_rt_lbl.idx");
    save_idx_labels(lpath, labels);
    Tensor back = load_idx(lpath);
    for (std::size_t i = 0; i < labels.size(); ++i) CHECK(back.data[i] == static_cast<double>(labels[i]));
}

TEST_CASE("make_synthetic: gaussian blobs are linearly separable at high separation") {
    Dataset ds = make_synthetic("gaussian-blobs-2d", 200, 7, {.separation = 10.0});
    CHECK(ds.n() == 200);
    ds.check_splits();
    // closed-form linear rule: sign of x coordinate
    for (std::int64_t i = 0; i < ds.n(); ++i) {
        double x = ds.inputs.data[i * 2];
        CHECK((x > 0 ? 1 : -1) == ds.labels[static_cast<std::size_t>(i)]);
    }
    // determinism
    Dataset ds2 = make_synthetic("gaussian-blobs-2d", 200, 7, {.separation = 10.0});
    CHECK(ds.inputs.data == ds2.inputs.data);
    CHECK(ds.labels == ds2.labels);

    CHECK_THROWS_AS(make_synthetic("no-such-kind", 10, 0), Error);
}

TEST_CASE("make_synthetic: one-hot sequences") {
    SynthParams p;
    p.length = 32;
    p.alphabet = 20;
    Dataset ds = make_synthetic("onehot-sequences", 60, 11, p);
    CHECK(ds.inputs.shape == Shape{60, 20, 1, 32});
    // every column sums to exactly 1
    for (std::int64_t i = 0; i < 60; ++i)
        for (std::int64_t pos = 0; pos < 32; ++pos) {
            double s = 0;
            for (std::int64_t a = 0; a < 20; ++a) s += ds.inputs.at({i, a, 0, pos});
            CHECK(s == 1.0);
        }
    CHECK(ds.binary());
}

TEST_CASE("mutate_sequence: identity, full flip, concentration") {
    SynthParams p;
    p.length = 25;
    Dataset ds = make_synthetic("onehot-sequences", 4, 13, p);
    Tensor x = ds.inputs.row(0);  // (20,1,25)

    Rng rng(17);
    Tensor same = mutate_sequence(x, 0.0, rng);
    CHECK(same.data == x.data);

    Tensor flipped = mutate_sequence(x, 1.0, rng);
    for (std::int64_t pos = 0; pos < 25; ++pos) {
        double colsum = 0;
        bool differs = false;
        for (std::int64_t a = 0; a < 20; ++a) {
            colsum += flipped.at({a, 0, pos});
            if (flipped.at({a, 0, pos}) != x.at({a, 0, pos})) differs = true;
        }
        CHECK(colsum == 1.0);  // stays one-hot
        CHECK(differs);        // never resamples the same symbol
    }

    // empirical rate over 1e5 positions within 0.1 +- 0.005
    SynthParams big;
    big.length = 1000;
    Dataset bigds = make_synthetic("onehot-sequences", 100, 19, big);
    Rng mrng(23);
    std::int64_t mutated = 0, total = 0;
    for (std::int64_t i = 0; i < 100; ++i) {
        Tensor xi = bigds.inputs.row(i);
        Tensor mi = mutate_sequence(xi, 0.1, mrng);
        for (std::int64_t pos = 0; pos < 1000; ++pos) {
            bool differs = false;
            for (std::int64_t a = 0; a < 20; ++a)
                if (mi.at({a, 0, pos}) != xi.at({a, 0, pos})) differs = true;
            mutated += differs;
            ++total;
        }
    }
    double rate = static_cast<double>(mutated) / static_cast<double>(total);
    CHECK(total == 100000);
    CHECK(rate > 0.095);
    CHECK(rate < 0.105);

    // one-hot validity preserved across p
    Rng vr(29);
    for (double prob : {0.25, 0.5, 0.75}) {
        Tensor m = mutate_sequence(x, prob, vr);
        for (std::int64_t pos = 0; pos < 25; ++pos) {
            double colsum = 0;
            for (std::int64_t a = 0; a < 20; ++a) colsum += m.at({a, 0, pos});
            CHECK(colsum == 1.0);
        }
    }
}

TEST_CASE("checkpoint: bit-exact round trip") {
    Rng rng(31);
    Checkpoint ck;
    ck.spec_text = spec_to_string(preset_mlp(4, {5}, 3));
    ck.params.names = {"W1", "W2"};
    ck.params.tensors = {random_tensor({5, 4}, rng), random_tensor({3, 5}, rng)};
    // exercise exact binary payloads, including denormal-ish values
    ck.params.tensors[0].data[0] = 1e-310;
    ck.params.tensors[0].data[1] = -0.0;
    ck.step = 12345;
    ck.rng_state = "999 888 777";

    std::string path = tmp_path("kr_ck.krnr");
    save_checkpoint(path, ck);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.version == 1);
    CHECK(back.spec_text == ck.spec_text);
    CHECK(back.step == ck.step);
    CHECK(back.rng_state == ck.rng_state);
    REQUIRE(back.params.count() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back.params.names[i] == ck.params.names[i]);
        CHECK(back.params.tensors[i].shape == ck.params.tensors[i].shape);
        // bit-for-bit
        for (std::int64_t j = 0; j < ck.params.tensors[i].size(); ++j) {
            std::uint64_t a, b;
            std::memcpy(&a, &back.params.tensors[i].data[j], 8);
            std::memcpy(&b, &ck.params.tensors[i].data[j], 8);
            CHECK(a == b);
        }
    }
}

TEST_CASE("checkpoint: empty parameter set and corruption handling") {
    Checkpoint ck;
    ck.spec_text = "{}";
    std::string path = tmp_path("kr_ck_empty.krnr");
    save_checkpoint(path, ck);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.params.count() == 0);

    // truncation is an io error, not a crash
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::string tpath = tmp_path("kr_ck_trunc.krnr");
    std::ofstream out(tpath, std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(tpath), Error);

    // bad magic
    std::string bpath = tmp_path("kr_ck_bad.krnr");
    write_bytes(bpath, {'X', 'X', 'X', 'X', 1, 0, 0, 0});
    CHECK_THROWS_WITH_AS(load_checkpoint(bpath), doctest::Contains("KRNR"), Error);

    // version mismatch
    std::string vpath = tmp_path("kr_ck_ver.krnr");
    write_bytes(vpath, {'K', 'R', 'N', 'R', 9, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    CHECK_THROWS_WITH_AS(load_checkpoint(vpath), doctest::Contains("version"), Error);
}

TEST_CASE("load_idx_dataset: seeded subsets with disjoint splits") {
    Rng rng(37);
    Tensor images({30, 6, 6});
    for (auto& v : images.data) v = static_cast<double>(rng.below(256)) / 255.0;
    std::vector<std::int64_t> labels;
    for (int i = 0; i < 30; ++i) labels.push_back(rng.below(10));
    std::string ipath = tmp_path("kr_ds_img.idx"), lpath = tmp_path("kr_ds_lbl.idx");
    save_idx_images(ipath, images);
    save_idx_labels(lpath, labels);

    Dataset ds = load_idx_dataset(ipath, lpath, 15, 5, 8, 99);
    CHECK(ds.inputs.shape == Shape{30, 1, 6, 6});
    CHECK(ds.train_idx.size() == 15);
    CHECK(ds.val_idx.size() == 5);
    CHECK(ds.test_idx.size() == 8);
    ds.check_splits();

    Dataset ds2 = load_idx_dataset(ipath, lpath, 15, 5, 8, 99);
    CHECK(ds.train_idx == ds2.train_idx);
    Dataset ds3 = load_idx_dataset(ipath, lpath, 15, 5, 8, 100);
    CHECK(ds.train_idx != ds3.train_idx);

    CHECK_THROWS_AS(load_idx_dataset(ipath, lpath, 25, 5, 8, 0), Error);
}
