#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qunet/tensor.hpp"

namespace qunet {

// One preprocessed image-mask-label triple. image in [0,1], mask in {0,1},
// both [1,H,W]. label: 0 benign, 1 malignant, 2 normal.
struct Sample {
    Tensor<float> image;
    Tensor<float> mask;
    int label = 0;
    std::string id;
};

// A raw BUSI record before resizing: 8-bit pixels plus the merged mask.
struct RawRecord {
    int width = 0, height = 0;
    std::vector<uint8_t> pixels;
    std::vector<uint8_t> mask;  // same dims; empty mask files become zeros
    int label = 0;
    std::string id;
};

struct SplitSpec {
    double train_frac = 0.70;
    double val_frac = 0.15;
    double test_frac = 0.15;
    uint64_t seed = 0;
};

struct DataSplits {
    std::vector<Sample> train, val, test;
};

struct SynthConfig {
    int n_samples = 100;
    int image_size = 64;
    double noise = 0.08;
    double frac_benign = 0.4;
    double frac_malignant = 0.4;  // remainder is normal
    uint64_t seed = 0;
};

inline const char* class_name(int label) {
    switch (label) {
        case 0: return "benign";
        case 1: return "malignant";
        case 2: return "normal";
    }
    return "?";
}

// Ingest a BUSI-layout tree: root/{benign,malignant,normal}/*.png with
// companion masks named <stem>_mask.png, <stem>_mask_1.png, ... Multiple
// masks merge by pixelwise union; images without masks get blank masks.
// Records come back sorted by path. Throws with the offending path(s).
std::vector<RawRecord> load_busi(const std::string& root_dir);

// Resize (bilinear image / nearest+rebinarize mask), scale to [0,1], add the
// channel dimension.
Sample preprocess(const RawRecord& rec, int target_size = 128);

std::vector<Sample> load_and_preprocess(const std::string& root_dir, int target_size = 128);

// Per class: shuffle by seed, floor(test_frac*n) to test, floor(val_frac*n)
// to val, remainder to train. Deterministic, disjoint, exhaustive.
DataSplits stratified_split(std::vector<Sample> samples, const SplitSpec& spec);

// Deterministic synthetic shapes: bright elliptical blobs on a noisy dark
// background, mask = exact blob support, "normal" samples have no blobs.
std::vector<Sample> generate_synthetic(const SynthConfig& cfg);

// Write samples back out as a BUSI-layout PNG tree (normal samples get no
// mask file), so the loader can be exercised end to end.
void write_busi_tree(const std::string& dir, const std::vector<Sample>& samples);

// Shuffled batch index order for (seed, epoch); the final partial batch is
// included.
std::vector<std::vector<int>> make_batch_order(int n, int batch_size, uint64_t seed, int epoch);

// Stack samples into [N,1,H,W] image/mask tensors.
std::pair<Tensor<float>, Tensor<float>> assemble_batch(const std::vector<Sample>& samples,
                                                       const std::vector<int>& indices);

// Exact-support ellipse rasterization used by the generator (exposed for
// area checks): sets mask pixels with ((x-cx)/rx)^2 + ((y-cy)/ry)^2 <= 1.
void rasterize_ellipse(Tensor<float>& mask_1hw, double cx, double cy, double rx, double ry);

// Half-pixel-center resamplers shared by preprocess and the CLI.
std::vector<float> bilinear_resize(const std::vector<float>& src, int sw, int sh, int dw, int dh);
std::vector<float> nearest_resize(const std::vector<float>& src, int sw, int sh, int dw, int dh);

}  // namespace qunet
