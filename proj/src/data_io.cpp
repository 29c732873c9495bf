#include "kernreg/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace kernreg {

bool Dataset::binary() const {
    for (auto y : labels)
        if (y != 1 && y != -1) return false;
    return !labels.empty();
}

std::int64_t Dataset::n_classes() const {
    if (binary()) return 2;
    std::int64_t k = 0;
    for (auto y : labels) k = std::max(k, y + 1);
    return k;
}

Tensor Dataset::gather_inputs(const std::vector<std::int64_t>& idx) const {
    Shape s = inputs.shape;
    s[0] = static_cast<std::int64_t>(idx.size());
    Tensor out(s);
    std::int64_t stride = inputs.size() / inputs.shape[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(inputs.data.begin() + idx[i] * stride, inputs.data.begin() + (idx[i] + 1) * stride,
                  out.data.begin() + static_cast<std::int64_t>(i) * stride);
    return out;
}

std::vector<std::int64_t> Dataset::gather_labels(const std::vector<std::int64_t>& idx) const {
    std::vector<std::int64_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
}

void Dataset::check_splits() const {
    std::set<std::int64_t> seen;
    auto walk = [&](const std::vector<std::int64_t>& v, const char* name) {
        for (auto i : v) {
            check(i >= 0 && i < n(), Error::Kind::data, std::string(name) + " split index out of range");
            check(seen.insert(i).second, Error::Kind::data, "dataset splits overlap at index " + std::to_string(i));
        }
    };
    walk(train_idx, "train");
    walk(val_idx, "val");
    walk(test_idx, "test");
}

// ---------------------------------------------------------------------------
// IDX format

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::string& path, std::int64_t offset) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    check(in.gcount() == 4, Error::Kind::io, path + ": truncated at offset " + std::to_string(offset));
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Tensor load_idx(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), Error::Kind::io, path + ": cannot open");
    std::uint32_t magic = read_be32(in, path, 0);
    int ndim;
    if (magic == kIdxImagesMagic) {
        ndim = 3;
    } else if (magic == kIdxLabelsMagic) {
        ndim = 1;
    } else {
        std::ostringstream os;
        os << path << ": bad magic 0x" << std::hex << magic << " (expected 0x00000803 for images or 0x00000801 for labels)";
        throw_io(os.str());
    }
    Shape shape;
    std::int64_t offset = 4;
    for (int i = 0; i < ndim; ++i) {
        shape.push_back(static_cast<std::int64_t>(read_be32(in, path, offset)));
        offset += 4;
    }
    std::int64_t count = shape_numel(shape);
    std::vector<unsigned char> raw(static_cast<std::size_t>(count));
    in.read(reinterpret_cast<char*>(raw.data()), count);
    check(in.gcount() == count, Error::Kind::io,
          path + ": truncated payload at offset " + std::to_string(offset + in.gcount()) + " (expected " +
              std::to_string(count) + " bytes)");
    Tensor out(shape);
    if (magic == kIdxImagesMagic) {
        for (std::int64_t i = 0; i < count; ++i) out.data[i] = static_cast<double>(raw[static_cast<std::size_t>(i)]) / 255.0;
    } else {
        for (std::int64_t i = 0; i < count; ++i) out.data[i] = static_cast<double>(raw[static_cast<std::size_t>(i)]);
    }
    return out;
}

void save_idx_images(const std::string& path, const Tensor& images) {
    check(images.rank() == 3, Error::Kind::shape, "save_idx_images: need (n,h,w)");
    std::ofstream out(path, std::ios::binary);
    check(out.good(), Error::Kind::io, path + ": cannot open for writing");
    write_be32(out, kIdxImagesMagic);
    for (auto d : images.shape) write_be32(out, static_cast<std::uint32_t>(d));
    for (double v : images.data) {
        double clamped = std::clamp(v, 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
    }
    check(out.good(), Error::Kind::io, path + ": write failed");
}

void save_idx_labels(const std::string& path, const std::vector<std::int64_t>& labels) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), Error::Kind::io, path + ": cannot open for writing");
    write_be32(out, kIdxLabelsMagic);
    write_be32(out, static_cast<std::uint32_t>(labels.size()));
    for (auto y : labels) {
        check(y >= 0 && y <= 255, Error::Kind::data, "save_idx_labels: label out of byte range");
        out.put(static_cast<char>(static_cast<unsigned char>(y)));
    }
    check(out.good(), Error::Kind::io, path + ": write failed");
}

// ---------------------------------------------------------------------------
// synthetic datasets

namespace {

void split_sequentially(Dataset& ds, std::int64_t train_n, std::int64_t val_n, std::int64_t test_n) {
    for (std::int64_t i = 0; i < train_n; ++i) ds.train_idx.push_back(i);
    for (std::int64_t i = 0; i < val_n; ++i) ds.val_idx.push_back(train_n + i);
    for (std::int64_t i = 0; i < test_n; ++i) ds.test_idx.push_back(train_n + val_n + i);
}

Dataset make_gaussian_blobs(std::int64_t n, std::uint64_t seed, double separation) {
    Rng rng(seed);
    Dataset ds;
    ds.inputs = Tensor({n, 2});
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t y = rng.below(2) == 0 ? -1 : 1;
        double cx = static_cast<double>(y) * separation / 2.0;
        ds.inputs.data[i * 2] = cx + rng.normal();
        ds.inputs.data[i * 2 + 1] = rng.normal();
        ds.labels.push_back(y);
    }
    ds.provenance = "gaussian-blobs-2d(n=" + std::to_string(n) + ",sep=" + std::to_string(separation) +
                    ",seed=" + std::to_string(seed) + ")";
    return ds;
}

Dataset make_ring_vs_blob(std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset ds;
    ds.inputs = Tensor({n, 2});
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t y = rng.below(2) == 0 ? -1 : 1;
        double px, py;
        if (y < 0) {  // center blob
            px = 0.5 * rng.normal();
            py = 0.5 * rng.normal();
        } else {  // ring of radius 3
            double ang = rng.uniform(0, 2 * 3.14159265358979323846);
            double rad = 3.0 + 0.3 * rng.normal();
            px = rad * std::cos(ang);
            py = rad * std::sin(ang);
        }
        ds.inputs.data[i * 2] = px;
        ds.inputs.data[i * 2 + 1] = py;
        ds.labels.push_back(y);
    }
    ds.provenance = "ring-vs-blob-2d(n=" + std::to_string(n) + ",seed=" + std::to_string(seed) + ")";
    return ds;
}

Dataset make_onehot_sequences(std::int64_t n, std::uint64_t seed, const SynthParams& p) {
    Rng rng(seed);
    Dataset ds;
    ds.inputs = Tensor({n, p.alphabet, 1, p.length});
    // class-determining motif
    std::vector<std::int64_t> motif;
    for (std::int64_t i = 0; i < p.motif_length; ++i) motif.push_back(rng.below(p.alphabet));
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t y = rng.below(2) == 0 ? -1 : 1;
        std::vector<std::int64_t> seq(static_cast<std::size_t>(p.length));
        for (auto& s : seq) s = rng.below(p.alphabet);
        if (y > 0) {
            std::int64_t pos = rng.below(p.length - p.motif_length + 1);
            for (std::int64_t j = 0; j < p.motif_length; ++j) seq[static_cast<std::size_t>(pos + j)] = motif[static_cast<std::size_t>(j)];
        }
        for (std::int64_t j = 0; j < p.length; ++j)
            ds.inputs.at({i, seq[static_cast<std::size_t>(j)], 0, j}) = 1.0;
        ds.labels.push_back(y);
    }
    ds.provenance = "onehot-sequences(n=" + std::to_string(n) + ",len=" + std::to_string(p.length) +
                    ",alphabet=" + std::to_string(p.alphabet) + ",seed=" + std::to_string(seed) + ")";
    return ds;
}

}  // namespace

Dataset make_synthetic(const std::string& kind, std::int64_t n, std::uint64_t seed, const SynthParams& p) {
    check(n >= 1, Error::Kind::data, "make_synthetic: n must be positive");
    Dataset ds;
    if (kind == "gaussian-blobs-2d")
        ds = make_gaussian_blobs(n, seed, p.separation);
    else if (kind == "ring-vs-blob-2d")
        ds = make_ring_vs_blob(n, seed);
    else if (kind == "onehot-sequences")
        ds = make_onehot_sequences(n, seed, p);
    else
        throw_config("unknown synthetic dataset kind '" + kind + "'");
    std::int64_t train_n = (n * 6) / 10, val_n = (n * 2) / 10;
    split_sequentially(ds, train_n, val_n, n - train_n - val_n);
    return ds;
}

Tensor mutate_sequence(const Tensor& onehot, double p, Rng& rng) {
    check(onehot.rank() >= 2, Error::Kind::shape, "mutate_sequence: need (alphabet, ..., length)");
    check(p >= 0 && p <= 1, Error::Kind::data, "mutate_sequence: probability out of [0,1]");
    std::int64_t alphabet = onehot.shape[0];
    std::int64_t positions = onehot.size() / alphabet;
    Tensor out = onehot;
    for (std::int64_t pos = 0; pos < positions; ++pos) {
        std::int64_t cur = -1;
        for (std::int64_t a = 0; a < alphabet; ++a) {
            if (onehot.data[a * positions + pos] == 1.0) {
                check(cur < 0, Error::Kind::data, "mutate_sequence: input is not one-hot");
                cur = a;
            } else {
                check(onehot.data[a * positions + pos] == 0.0, Error::Kind::data, "mutate_sequence: input is not one-hot");
            }
        }
        check(cur >= 0, Error::Kind::data, "mutate_sequence: empty one-hot column");
        if (rng.uniform() < p) {
            std::int64_t next = rng.below(alphabet - 1);  // never resamples the same symbol
            if (next >= cur) ++next;
            out.data[cur * positions + pos] = 0.0;
            out.data[next * positions + pos] = 1.0;
        }
    }
    return out;
}

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path, std::int64_t train_n,
                         std::int64_t val_n, std::int64_t test_n, std::uint64_t seed) {
    Tensor images = load_idx(images_path);
    Tensor labels_t = load_idx(labels_path);
    check(images.rank() == 3, Error::Kind::data, images_path + ": expected an image file");
    check(labels_t.rank() == 1, Error::Kind::data, labels_path + ": expected a label file");
    check(images.shape[0] == labels_t.shape[0], Error::Kind::data, "image/label counts differ");
    std::int64_t total = images.shape[0];
    check(train_n + val_n + test_n <= total, Error::Kind::data,
          "requested splits need " + std::to_string(train_n + val_n + test_n) + " examples, file has " +
              std::to_string(total));

    Dataset ds;
    ds.inputs = images.reshaped({total, 1, images.shape[1], images.shape[2]});
    for (std::int64_t i = 0; i < total; ++i) ds.labels.push_back(static_cast<std::int64_t>(labels_t.data[i]));

    Rng rng(seed);
    auto perm = rng.permutation(total);
    for (std::int64_t i = 0; i < train_n; ++i) ds.train_idx.push_back(perm[static_cast<std::size_t>(i)]);
    for (std::int64_t i = 0; i < val_n; ++i) ds.val_idx.push_back(perm[static_cast<std::size_t>(train_n + i)]);
    for (std::int64_t i = 0; i < test_n; ++i) ds.test_idx.push_back(perm[static_cast<std::size_t>(train_n + val_n + i)]);
    ds.provenance = "idx(" + images_path + ",train=" + std::to_string(train_n) + ",val=" + std::to_string(val_n) +
                    ",test=" + std::to_string(test_n) + ",seed=" + std::to_string(seed) + ")";
    return ds;
}

// ---------------------------------------------------------------------------
// checkpoints: "KRNR", u32 version, length-prefixed spec, parameter records,
// then the step counter and rng state. All integers little-endian.

namespace {

template <typename T>
void write_le(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& path) {
    unsigned char b[sizeof(T)];
    in.read(reinterpret_cast<char*>(b), sizeof(T));
    check(in.gcount() == static_cast<std::streamsize>(sizeof(T)), Error::Kind::io,
          path + ": truncated at offset " + std::to_string(static_cast<std::int64_t>(in.tellg())));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_le<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const std::string& path, std::uint64_t limit = 1ull << 30) {
    std::uint64_t len = read_le<std::uint64_t>(in, path);
    check(len <= limit, Error::Kind::io, path + ": corrupt length field");
    std::string s(static_cast<std::size_t>(len), '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    check(static_cast<std::uint64_t>(in.gcount()) == len, Error::Kind::io, path + ": truncated string payload");
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), Error::Kind::io, path + ": cannot open for writing");
    out.write("KRNR", 4);
    write_le<std::uint32_t>(out, ck.version);
    write_string(out, ck.spec_text);
    write_le<std::uint64_t>(out, ck.params.count());
    for (std::size_t i = 0; i < ck.params.count(); ++i) {
        write_string(out, ck.params.names[i]);
        const Tensor& t = ck.params.tensors[i];
        write_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.rank()));
        for (auto d : t.shape) write_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        for (double v : t.data) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            write_le<std::uint64_t>(out, bits);
        }
    }
    write_le<std::uint64_t>(out, ck.step);
    write_string(out, ck.rng_state);
    check(out.good(), Error::Kind::io, path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), Error::Kind::io, path + ": cannot open");
    char magic[4];
    in.read(magic, 4);
    check(in.gcount() == 4 && std::memcmp(magic, "KRNR", 4) == 0, Error::Kind::io,
          path + ": bad magic (expected KRNR)");
    Checkpoint ck;
    ck.version = read_le<std::uint32_t>(in, path);
    check(ck.version == 1, Error::Kind::io, path + ": unsupported version " + std::to_string(ck.version));
    ck.spec_text = read_string(in, path);
    std::uint64_t n_params = read_le<std::uint64_t>(in, path);
    check(n_params < (1ull << 20), Error::Kind::io, path + ": corrupt parameter count");
    for (std::uint64_t i = 0; i < n_params; ++i) {
        std::string name = read_string(in, path, 1 << 16);
        std::uint64_t ndim = read_le<std::uint64_t>(in, path);
        check(ndim >= 1 && ndim <= 8, Error::Kind::io, path + ": corrupt rank for parameter " + name);
        Shape shape;
        for (std::uint64_t d = 0; d < ndim; ++d) {
            std::uint64_t dim = read_le<std::uint64_t>(in, path);
            check(dim >= 1 && dim <= (1ull << 32), Error::Kind::io, path + ": corrupt dimension for " + name);
            shape.push_back(static_cast<std::int64_t>(dim));
        }
        Tensor t(shape);
        for (auto& v : t.data) {
            std::uint64_t bits = read_le<std::uint64_t>(in, path);
            std::memcpy(&v, &bits, 8);
        }
        ck.params.names.push_back(std::move(name));
        ck.params.tensors.push_back(std::move(t));
    }
    ck.step = read_le<std::uint64_t>(in, path);
    ck.rng_state = read_string(in, path);
    return ck;
}

}  // namespace kernreg
