#include "qunet/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <map>
#include <stdexcept>

#include "qunet/png_io.hpp"

namespace fs = std::filesystem;

namespace qunet {

namespace {

// "<base>_mask" or "<base>_mask_<k>" -> base; empty string when not a mask.
std::string mask_base(const std::string& stem) {
    auto pos = stem.rfind("_mask");
    if (pos == std::string::npos) return "";
    std::string tail = stem.substr(pos + 5);
    if (tail.empty()) return stem.substr(0, pos);
    if (tail[0] != '_') return "";
    for (size_t i = 1; i < tail.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(tail[i]))) return "";
    return stem.substr(0, pos);
}

}  // namespace

std::vector<RawRecord> load_busi(const std::string& root_dir) {
    const char* classes[3] = {"benign", "malignant", "normal"};
    if (!fs::is_directory(root_dir))
        throw std::runtime_error("ingestion error: missing dataset root " + root_dir);

    std::string missing;
    for (const char* c : classes) {
        if (!fs::is_directory(fs::path(root_dir) / c)) missing += std::string(" ") + root_dir + "/" + c;
    }
    if (!missing.empty())
        throw std::runtime_error("ingestion error: missing class directories:" + missing);

    std::vector<RawRecord> records;
    std::string empty_classes;
    for (int label = 0; label < 3; ++label) {
        const fs::path dir = fs::path(root_dir) / classes[label];
        std::vector<std::string> stems;
        std::map<std::string, std::vector<std::string>> masks;  // base stem -> mask paths
        for (const auto& e : fs::directory_iterator(dir)) {
            if (!e.is_regular_file() || e.path().extension() != ".png") continue;
            const std::string stem = e.path().stem().string();
            const std::string base = mask_base(stem);
            if (base.empty())
                stems.push_back(stem);
            else
                masks[base].push_back(e.path().string());
        }
        std::sort(stems.begin(), stems.end());
        if (stems.empty()) empty_classes += std::string(" ") + dir.string();

        for (const auto& stem : stems) {
            const std::string img_path = (dir / (stem + ".png")).string();
            GrayImage img = read_png_gray(img_path);
            RawRecord rec;
            rec.width = img.width;
            rec.height = img.height;
            rec.pixels = std::move(img.pixels);
            rec.label = label;
            rec.id = std::string(classes[label]) + "/" + stem;
            rec.mask.assign(rec.pixels.size(), 0);

            auto it = masks.find(stem);
            if (it != masks.end()) {
                std::sort(it->second.begin(), it->second.end());
                for (const auto& mp : it->second) {
                    GrayImage m = read_png_gray(mp);
                    if (m.width != rec.width || m.height != rec.height)
                        throw std::runtime_error("ingestion error: mask size " +
                                                 std::to_string(m.width) + "x" +
                                                 std::to_string(m.height) + " does not match image in " + mp);
                    // pixelwise union
                    for (size_t i = 0; i < rec.mask.size(); ++i)
                        rec.mask[i] = std::max(rec.mask[i], m.pixels[i]);
                }
            }
            records.push_back(std::move(rec));
        }
    }
    if (!empty_classes.empty())
        throw std::runtime_error("ingestion error: no images in:" + empty_classes);
    return records;
}

std::vector<float> bilinear_resize(const std::vector<float>& src, int sw, int sh, int dw, int dh) {
    std::vector<float> dst(static_cast<size_t>(dw) * dh);
    const double sx = static_cast<double>(sw) / dw;
    const double sy = static_cast<double>(sh) / dh;
    for (int y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(sh - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(sw - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            const double v00 = src[static_cast<size_t>(y0) * sw + x0];
            const double v01 = src[static_cast<size_t>(y0) * sw + x1];
            const double v10 = src[static_cast<size_t>(y1) * sw + x0];
            const double v11 = src[static_cast<size_t>(y1) * sw + x1];
            const double top = v00 + wx * (v01 - v00);
            const double bot = v10 + wx * (v11 - v10);
            dst[static_cast<size_t>(y) * dw + x] = static_cast<float>(top + wy * (bot - top));
        }
    }
    return dst;
}

std::vector<float> nearest_resize(const std::vector<float>& src, int sw, int sh, int dw, int dh) {
    std::vector<float> dst(static_cast<size_t>(dw) * dh);
    const double sx = static_cast<double>(sw) / dw;
    const double sy = static_cast<double>(sh) / dh;
    for (int y = 0; y < dh; ++y) {
        int iy = std::min(static_cast<int>((y + 0.5) * sy), sh - 1);
        for (int x = 0; x < dw; ++x) {
            int ix = std::min(static_cast<int>((x + 0.5) * sx), sw - 1);
            dst[static_cast<size_t>(y) * dw + x] = src[static_cast<size_t>(iy) * sw + ix];
        }
    }
    return dst;
}

Sample preprocess(const RawRecord& rec, int target_size) {
    if (rec.width <= 0 || rec.height <= 0 || rec.pixels.empty())
        throw std::invalid_argument("preprocess: zero-sized image " + rec.id);
    if (target_size < 1) throw std::invalid_argument("preprocess: bad target size");

    std::vector<float> img(rec.pixels.size());
    for (size_t i = 0; i < img.size(); ++i) img[i] = rec.pixels[i] / 255.0f;
    std::vector<float> msk(rec.mask.size());
    for (size_t i = 0; i < msk.size(); ++i) msk[i] = rec.mask[i] / 255.0f;

    std::vector<float> rimg = bilinear_resize(img, rec.width, rec.height, target_size, target_size);
    std::vector<float> rmsk = nearest_resize(msk, rec.width, rec.height, target_size, target_size);
    for (auto& v : rmsk) v = v >= 0.5f ? 1.0f : 0.0f;

    Sample s;
    s.image = Tensor<float>({1, target_size, target_size}, std::move(rimg));
    s.mask = Tensor<float>({1, target_size, target_size}, std::move(rmsk));
    s.label = rec.label;
    s.id = rec.id;
    return s;
}

std::vector<Sample> load_and_preprocess(const std::string& root_dir, int target_size) {
    std::vector<Sample> out;
    for (const auto& rec : load_busi(root_dir)) out.push_back(preprocess(rec, target_size));
    return out;
}

DataSplits stratified_split(std::vector<Sample> samples, const SplitSpec& spec) {
    if (std::abs(spec.train_frac + spec.val_frac + spec.test_frac - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must sum to 1");

    std::vector<std::vector<int>> by_class(3);
    for (int i = 0; i < static_cast<int>(samples.size()); ++i)
        by_class[static_cast<size_t>(samples[static_cast<size_t>(i)].label)].push_back(i);

    for (int label = 0; label < 3; ++label) {
        if (!by_class[static_cast<size_t>(label)].empty() &&
            by_class[static_cast<size_t>(label)].size() < 3)
            throw std::runtime_error(std::string("split error: class ") + class_name(label) +
                                     " has fewer than 3 samples");
    }

    DataSplits out;
    Rng rng(spec.seed);
    for (int label = 0; label < 3; ++label) {
        auto& idx = by_class[static_cast<size_t>(label)];
        rng.shuffle(idx.begin(), idx.end());
        const int64_t n = static_cast<int64_t>(idx.size());
        const int64_t n_test = static_cast<int64_t>(std::floor(spec.test_frac * double(n)));
        const int64_t n_val = static_cast<int64_t>(std::floor(spec.val_frac * double(n)));
        for (int64_t i = 0; i < n; ++i) {
            Sample& s = samples[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            if (i < n_test)
                out.test.push_back(std::move(s));
            else if (i < n_test + n_val)
                out.val.push_back(std::move(s));
            else
                out.train.push_back(std::move(s));
        }
    }
    return out;
}

void rasterize_ellipse(Tensor<float>& mask_1hw, double cx, double cy, double rx, double ry) {
    const int64_t h = mask_1hw.shape[1], w = mask_1hw.shape[2];
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double dx = (x - cx) / rx;
            const double dy = (y - cy) / ry;
            if (dx * dx + dy * dy <= 1.0)
                mask_1hw.data[static_cast<size_t>(y * w + x)] = 1.0f;
        }
    }
}

std::vector<Sample> generate_synthetic(const SynthConfig& cfg) {
    if (cfg.n_samples < 0 || cfg.image_size < 8)
        throw std::invalid_argument("synth: bad config");

    // exact class counts, then a seed-keyed assignment order
    const int n = cfg.n_samples;
    const int nb = static_cast<int>(std::floor(cfg.frac_benign * n));
    const int nm = static_cast<int>(std::floor(cfg.frac_malignant * n));
    std::vector<int> labels;
    labels.insert(labels.end(), static_cast<size_t>(nb), 0);
    labels.insert(labels.end(), static_cast<size_t>(nm), 1);
    labels.insert(labels.end(), static_cast<size_t>(n - nb - nm), 2);
    Rng lrng(cfg.seed);
    lrng.shuffle(labels.begin(), labels.end());

    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    const int s = cfg.image_size;
    for (int i = 0; i < n; ++i) {
        Rng rng(cfg.seed ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(i + 1)));
        Sample smp;
        smp.label = labels[static_cast<size_t>(i)];
        smp.id = std::string(class_name(smp.label)) + " (" + std::to_string(i + 1) + ")";
        smp.image = Tensor<float>({1, s, s});
        smp.mask = Tensor<float>({1, s, s});

        for (auto& v : smp.image.data)
            v = static_cast<float>(clamp_val(0.12 + cfg.noise * (rng.uniform() - 0.5), 0.0, 1.0));

        const int blobs = smp.label == 2 ? 0 : (smp.label == 0 ? 1 : 2);
        for (int b = 0; b < blobs; ++b) {
            const double cx = rng.uniform(0.25, 0.75) * s;
            const double cy = rng.uniform(0.25, 0.75) * s;
            const double rx = std::max(2.0, rng.uniform(0.08, 0.20) * s);
            const double ry = std::max(2.0, rng.uniform(0.08, 0.20) * s);
            const double intensity = rng.uniform(0.72, 0.92);
            Tensor<float> blob({1, s, s});
            rasterize_ellipse(blob, cx, cy, rx, ry);
            for (int64_t p = 0; p < blob.numel(); ++p) {
                if (blob.data[static_cast<size_t>(p)] > 0) {
                    smp.mask.data[static_cast<size_t>(p)] = 1.0f;
                    const double v = intensity + cfg.noise * (rng.uniform() - 0.5);
                    smp.image.data[static_cast<size_t>(p)] = static_cast<float>(clamp_val(v, 0.0, 1.0));
                }
            }
        }
        out.push_back(std::move(smp));
    }
    return out;
}

void write_busi_tree(const std::string& dir, const std::vector<Sample>& samples) {
    const char* classes[3] = {"benign", "malignant", "normal"};
    for (const char* c : classes) fs::create_directories(fs::path(dir) / c);

    std::vector<int> counter(3, 0);
    for (const auto& s : samples) {
        const int k = ++counter[static_cast<size_t>(s.label)];
        const std::string cls = classes[static_cast<size_t>(s.label)];
        const std::string stem = cls + " (" + std::to_string(k) + ")";
        const int64_t h = s.image.shape[1], w = s.image.shape[2];

        GrayImage img;
        img.width = static_cast<int>(w);
        img.height = static_cast<int>(h);
        img.pixels.resize(static_cast<size_t>(w * h));
        for (int64_t i = 0; i < w * h; ++i)
            img.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(
                clamp_val(std::lround(s.image.data[static_cast<size_t>(i)] * 255.0f), 0l, 255l));
        write_png_gray((fs::path(dir) / cls / (stem + ".png")).string(), img);

        if (s.label != 2) {
            GrayImage m;
            m.width = img.width;
            m.height = img.height;
            m.pixels.resize(img.pixels.size());
            for (int64_t i = 0; i < w * h; ++i)
                m.pixels[static_cast<size_t>(i)] = s.mask.data[static_cast<size_t>(i)] > 0 ? 255 : 0;
            write_png_gray((fs::path(dir) / cls / (stem + "_mask.png")).string(), m);
        }
    }
}

std::vector<std::vector<int>> make_batch_order(int n, int batch_size, uint64_t seed, int epoch) {
    if (n <= 0) throw std::invalid_argument("batch_iter: empty split");
    if (batch_size < 1) throw std::invalid_argument("batch_iter: batch_size must be >= 1");

    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    Rng rng(seed ^ (0xA24BAED4963EE407ull * static_cast<uint64_t>(epoch + 1)));
    rng.shuffle(perm.begin(), perm.end());

    std::vector<std::vector<int>> batches;
    for (int i = 0; i < n; i += batch_size) {
        const int end = std::min(n, i + batch_size);
        batches.emplace_back(perm.begin() + i, perm.begin() + end);
    }
    return batches;
}

std::pair<Tensor<float>, Tensor<float>> assemble_batch(const std::vector<Sample>& samples,
                                                       const std::vector<int>& indices) {
    if (indices.empty()) throw std::invalid_argument("assemble_batch: empty index list");
    const auto& first = samples.at(static_cast<size_t>(indices[0]));
    const int64_t h = first.image.shape[1], w = first.image.shape[2];
    const int64_t n = static_cast<int64_t>(indices.size());
    Tensor<float> imgs({n, 1, h, w});
    Tensor<float> msks({n, 1, h, w});
    for (int64_t i = 0; i < n; ++i) {
        const auto& s = samples.at(static_cast<size_t>(indices[static_cast<size_t>(i)]));
        if (s.image.shape[1] != h || s.image.shape[2] != w)
            throw std::invalid_argument("assemble_batch: mixed sample sizes");
        std::copy(s.image.data.begin(), s.image.data.end(), imgs.data.begin() + i * h * w);
        std::copy(s.mask.data.begin(), s.mask.data.end(), msks.data.begin() + i * h * w);
    }
    return {std::move(imgs), std::move(msks)};
}

}  // namespace qunet
