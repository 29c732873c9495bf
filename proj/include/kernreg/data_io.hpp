#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kernreg/network.hpp"
#include "kernreg/rng.hpp"
#include "kernreg/tensor.hpp"

namespace kernreg {

struct Dataset {
    Tensor inputs;                       // (n, ...)
    std::vector<std::int64_t> labels;    // class indices or +-1
    std::vector<std::int64_t> train_idx, val_idx, test_idx;
    std::string provenance;

    std::int64_t n() const { return inputs.rank() ? inputs.shape[0] : 0; }
    bool binary() const;
    std::int64_t n_classes() const;

    Tensor gather_inputs(const std::vector<std::int64_t>& idx) const;
    std::vector<std::int64_t> gather_labels(const std::vector<std::int64_t>& idx) const;
    void check_splits() const;  // disjoint and within range
};

// IDX files, big-endian. Magic 0x00000803 (3-d unsigned-byte images, scaled to
// [0,1]) or 0x00000801 (1-d labels, raw values).
Tensor load_idx(const std::string& path);
void save_idx_images(const std::string& path, const Tensor& images);  // (n,h,w), values in [0,1]
void save_idx_labels(const std::string& path, const std::vector<std::int64_t>& labels);

struct SynthParams {
    double separation = 4.0;       // gaussian-blobs-2d: center distance in sigmas
    std::int64_t length = 64;      // onehot-sequences
    std::int64_t motif_length = 5; // onehot-sequences
    std::int64_t alphabet = 20;    // onehot-sequences
};

// kinds: gaussian-blobs-2d, ring-vs-blob-2d, onehot-sequences
Dataset make_synthetic(const std::string& kind, std::int64_t n, std::uint64_t seed, const SynthParams& p = {});

// Each position switches to a different symbol with probability p.
Tensor mutate_sequence(const Tensor& onehot, double p, Rng& rng);

// Image dataset from IDX files with seeded subset selection and splits.
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path, std::int64_t train_n,
                         std::int64_t val_n, std::int64_t test_n, std::uint64_t seed);

struct Checkpoint {
    std::uint32_t version = 1;
    std::string spec_text;  // serialized NetworkSpec
    ParamSet params;
    std::uint64_t step = 0;
    std::string rng_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace kernreg
