#include "qunet/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace qunet {

namespace {

std::string fmt4(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::string fmt_g9(float v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

std::string fmt_g17(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Tensor<float> slice_sample(const Tensor<float>& batch, int64_t n) {
    const int64_t hw = batch.shape[2] * batch.shape[3];
    Tensor<float> out({1, 1, batch.shape[2], batch.shape[3]});
    std::copy(batch.data.begin() + n * hw, batch.data.begin() + (n + 1) * hw, out.data.begin());
    return out;
}

}  // namespace

double TrainEpochStats::total() const { return bce + dice + bitwidth; }

Adam::Adam(QuantUNet<float>& model, const TrainConfig& cfg)
    : beta1_(float(cfg.beta1)), beta2_(float(cfg.beta2)), eps_(float(cfg.adam_eps)) {
    const float wlr = float(cfg.lr);
    const float blr = cfg.bitwidth_lr < 0 ? wlr : float(cfg.bitwidth_lr);
    for (auto& l : model.layers) {
        slots_.push_back({l.weight, Tensor<float>::zeros(l.weight->value.shape),
                          Tensor<float>::zeros(l.weight->value.shape), wlr});
        slots_.push_back({l.bias, Tensor<float>::zeros(l.bias->value.shape),
                          Tensor<float>::zeros(l.bias->value.shape), wlr});
        slots_.push_back({l.qp.b_param, Tensor<float>::zeros({1}), Tensor<float>::zeros({1}), blr});
    }
}

void Adam::step() {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, float(t_));
    const float bc2 = 1.0f - std::pow(beta2_, float(t_));
    for (auto& s : slots_) {
        if (!s.param->has_grad()) continue;
        float* p = s.param->value.ptr();
        const float* g = s.param->grad.ptr();
        float* m = s.m.ptr();
        float* v = s.v.ptr();
        const int64_t n = s.param->value.numel();
        for (int64_t i = 0; i < n; ++i) {
            m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            p[i] -= s.lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.param->grad = Tensor<float>();
}

TrainEpochStats train_epoch(QuantUNet<float>& model, const std::vector<Sample>& train,
                            const TrainConfig& cfg, int epoch, Adam& opt) {
    if (train.empty()) throw std::invalid_argument("train_epoch: empty split");
    auto params = bitwidth_params(model);
    auto batches = make_batch_order(int(train.size()), cfg.batch_size, cfg.seed, epoch);

    TrainEpochStats stats;
    double wsum = 0;
    int batch_index = 0;
    for (const auto& idxs : batches) {
        auto [x, t] = assemble_batch(train, idxs);
        auto pred = forward(model, x, true);
        auto loss = total_loss(pred, t, params, cfg.lambda, float(cfg.smooth));
        if (!std::isfinite(loss.parts.total))
            throw std::runtime_error("training aborted: non-finite loss at epoch " +
                                     std::to_string(epoch) + " batch " +
                                     std::to_string(batch_index));
        backward(loss.total);
        opt.step();
        opt.zero_grad();

        const double w = double(idxs.size());
        stats.bce += w * loss.parts.bce;
        stats.dice += w * loss.parts.dice;
        stats.bitwidth += w * loss.parts.lambda * loss.parts.bitwidth;
        wsum += w;
        ++batch_index;
    }
    stats.bce /= wsum;
    stats.dice /= wsum;
    stats.bitwidth /= wsum;
    return stats;
}

ValStats validate(QuantUNet<float>& model, const std::vector<Sample>& val,
                  const TrainConfig& cfg) {
    if (val.empty()) throw std::invalid_argument("validate: empty split");
    ValStats v;
    int64_t count = 0;
    for (size_t start = 0; start < val.size(); start += size_t(cfg.batch_size)) {
        std::vector<int> idxs;
        for (size_t i = start; i < std::min(val.size(), start + size_t(cfg.batch_size)); ++i)
            idxs.push_back(int(i));
        auto [x, t] = assemble_batch(val, idxs);
        auto pred = forward(model, x, false);
        for (int64_t n = 0; n < int64_t(idxs.size()); ++n) {
            Tensor<float> p = slice_sample(pred->value, n);
            Tensor<float> y = slice_sample(t, n);
            Tensor<float> mask = threshold_mask(p);
            NoGradGuard ng;
            v.bce += double(bce_loss(make_const(p), y)->value.data[0]);
            v.dice_loss_v += double(dice_loss(make_const(p), y, float(cfg.smooth))->value.data[0]);
            v.dice += dice_coeff(mask, y, cfg.smooth);
            v.accuracy += pixel_accuracy(mask, y);
            ++count;
        }
    }
    v.bce /= double(count);
    v.dice_loss_v /= double(count);
    v.dice /= double(count);
    v.accuracy /= double(count);
    return v;
}

FitResult fit(QuantUNet<float>& model, const DataSplits& data, const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw std::invalid_argument("fit: epochs must be >= 1");
    if (cfg.lambda < 0) throw std::invalid_argument("fit: lambda must be >= 0");

    Adam opt(model, cfg);
    auto params = bitwidth_params(model);
    FitResult res;

    std::ofstream metrics_csv, bits_csv, comps_csv;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        metrics_csv.open(fs::path(cfg.out_dir) / "metrics.csv");
        bits_csv.open(fs::path(cfg.out_dir) / "layer_bitwidths.csv");
        comps_csv.open(fs::path(cfg.out_dir) / "loss_components.csv");
        metrics_csv << "epoch,train_loss,val_loss,val_dice,val_accuracy,avg_bitwidth\n";
        bits_csv << "epoch,layer,bitwidth\n";
        comps_csv << "epoch,bce,dice,bitwidth_term\n";
    }

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        TrainEpochStats tr = train_epoch(model, data.train, cfg, epoch, opt);
        ValStats va = validate(model, data.val, cfg);
        const double avg_bw = double(avg_bitwidth_value(params));

        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = tr.total();
        em.val_loss = va.bce + va.dice_loss_v + cfg.lambda * avg_bw;
        em.val_dice = va.dice;
        em.val_accuracy = va.accuracy;
        em.avg_bitwidth = avg_bw;
        res.history.push_back(em);

        TraceEpoch te;
        te.epoch = epoch;
        for (auto& l : model.layers)
            te.layer_bits.emplace_back(l.name, double(l.qp.clamped()));
        te.bce = tr.bce;
        te.dice = tr.dice;
        te.bitwidth_term = tr.bitwidth;
        res.trace.push_back(std::move(te));

        if (metrics_csv.is_open()) {
            metrics_csv << epoch << ',' << fmt4(em.train_loss) << ',' << fmt4(em.val_loss) << ','
                        << fmt4(em.val_dice) << ',' << fmt4(em.val_accuracy) << ','
                        << fmt4(em.avg_bitwidth) << '\n';
            for (auto& [name, bw] : res.trace.back().layer_bits)
                bits_csv << epoch << ',' << name << ',' << fmt4(bw) << '\n';
            comps_csv << epoch << ',' << fmt4(tr.bce) << ',' << fmt4(tr.dice) << ','
                      << fmt4(tr.bitwidth) << '\n';
            metrics_csv.flush();
            bits_csv.flush();
            comps_csv.flush();
        }

        if (em.val_dice > res.best_val_dice) {
            res.best_val_dice = em.val_dice;
            res.best_epoch = epoch;
            if (!cfg.out_dir.empty()) {
                res.best_checkpoint = (fs::path(cfg.out_dir) / "best.ckpt").string();
                save_checkpoint(model, res.best_checkpoint);
            }
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

void save_checkpoint(const QuantUNet<float>& model, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
        const auto& c = model.cfg;
        f << "QUNETCKPT 1\n";
        f << "in_channels " << c.in_channels << "\n";
        f << "base_channels " << c.base_channels << "\n";
        f << "depth " << c.depth << "\n";
        f << "out_channels " << c.out_channels << "\n";
        f << "quantized " << (c.quantized ? 1 : 0) << "\n";
        f << "act_bits " << c.act_bits << "\n";
        f << "init_bitwidth " << fmt_g17(c.init_bitwidth) << "\n";
        f << "input_act " << fmt_g9(model.input_act.running_max) << " "
          << (model.input_act.frozen ? 1 : 0) << "\n";
        f << "output_act " << fmt_g9(model.output_act.running_max) << " "
          << (model.output_act.frozen ? 1 : 0) << "\n";
        f << "layers " << model.layers.size() << "\n";
        int64_t blob_floats = 0;
        for (const auto& l : model.layers) {
            const auto& ws = l.weight->value.shape;
            f << "layer " << l.name << " " << layer_kind_name(l.kind) << " " << ws[0] << " "
              << ws[1] << " " << ws[2] << " " << ws[3] << " " << fmt_g9(l.qp.value()) << " "
              << fmt_g9(l.act.running_max) << " " << (l.act.frozen ? 1 : 0) << "\n";
            blob_floats += l.weight->value.numel() + l.bias->value.numel();
        }
        f << "blob_bytes " << blob_floats * 4 << "\n";
        for (const auto& l : model.layers) {
            f.write(reinterpret_cast<const char*>(l.weight->value.data.data()),
                    std::streamsize(l.weight->value.data.size() * 4));
            f.write(reinterpret_cast<const char*>(l.bias->value.data.data()),
                    std::streamsize(l.bias->value.data.size() * 4));
        }
        if (!f) throw std::runtime_error("checkpoint write failed: " + path);
    }
    fs::rename(tmp, path);
}

namespace {

std::string next_token(std::istream& f, const std::string& path) {
    std::string t;
    if (!(f >> t)) throw std::runtime_error("checkpoint load error: truncated manifest in " + path);
    return t;
}

void expect_key(std::istream& f, const std::string& key, const std::string& path) {
    std::string t = next_token(f, path);
    if (t != key)
        throw std::runtime_error("checkpoint load error: expected field '" + key + "', got '" + t +
                                 "' in " + path);
}

}  // namespace

QuantUNet<float> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);

    expect_key(f, "QUNETCKPT", path);
    int version = std::stoi(next_token(f, path));
    if (version != 1)
        throw std::runtime_error("checkpoint load error: unsupported version " +
                                 std::to_string(version) + " in " + path);

    UNetConfig cfg;
    expect_key(f, "in_channels", path);
    cfg.in_channels = std::stoi(next_token(f, path));
    expect_key(f, "base_channels", path);
    cfg.base_channels = std::stoi(next_token(f, path));
    expect_key(f, "depth", path);
    cfg.depth = std::stoi(next_token(f, path));
    expect_key(f, "out_channels", path);
    cfg.out_channels = std::stoi(next_token(f, path));
    expect_key(f, "quantized", path);
    cfg.quantized = std::stoi(next_token(f, path)) != 0;
    expect_key(f, "act_bits", path);
    cfg.act_bits = std::stoi(next_token(f, path));
    expect_key(f, "init_bitwidth", path);
    cfg.init_bitwidth = std::stod(next_token(f, path));

    QuantUNet<float> model = build_unet<float>(cfg, 0);

    expect_key(f, "input_act", path);
    model.input_act.running_max = std::stof(next_token(f, path));
    model.input_act.frozen = std::stoi(next_token(f, path)) != 0;
    expect_key(f, "output_act", path);
    model.output_act.running_max = std::stof(next_token(f, path));
    model.output_act.frozen = std::stoi(next_token(f, path)) != 0;

    expect_key(f, "layers", path);
    const size_t n_layers = size_t(std::stoul(next_token(f, path)));
    if (n_layers != model.layers.size())
        throw std::runtime_error("checkpoint load error: layer count " +
                                 std::to_string(n_layers) + " does not match architecture in " +
                                 path);

    int64_t blob_floats = 0;
    for (auto& l : model.layers) {
        expect_key(f, "layer", path);
        const std::string name = next_token(f, path);
        const std::string kind = next_token(f, path);
        int64_t d[4];
        for (auto& x : d) x = std::stoll(next_token(f, path));
        if (name != l.name)
            throw std::runtime_error("checkpoint load error: layer name mismatch, expected " +
                                     l.name + ", got " + name + " in " + path);
        if (kind != layer_kind_name(l.kind))
            throw std::runtime_error("checkpoint load error: layer kind mismatch for " + name +
                                     " in " + path);
        const auto& ws = l.weight->value.shape;
        if (d[0] != ws[0] || d[1] != ws[1] || d[2] != ws[2] || d[3] != ws[3])
            throw std::runtime_error("checkpoint load error: kernel shape mismatch for " + name +
                                     " in " + path);
        l.qp.b_param->value.data[0] = std::stof(next_token(f, path));
        l.act.running_max = std::stof(next_token(f, path));
        l.act.frozen = std::stoi(next_token(f, path)) != 0;
        blob_floats += l.weight->value.numel() + l.bias->value.numel();
    }

    expect_key(f, "blob_bytes", path);
    const int64_t blob_bytes = std::stoll(next_token(f, path));
    if (blob_bytes != blob_floats * 4)
        throw std::runtime_error("checkpoint load error: blob size field " +
                                 std::to_string(blob_bytes) + " does not match layer table in " +
                                 path);
    f.get();  // consume the newline before the binary section

    for (auto& l : model.layers) {
        f.read(reinterpret_cast<char*>(l.weight->value.data.data()),
               std::streamsize(l.weight->value.data.size() * 4));
        f.read(reinterpret_cast<char*>(l.bias->value.data.data()),
               std::streamsize(l.bias->value.data.size() * 4));
        if (!f)
            throw std::runtime_error("checkpoint load error: truncated weight blob (layer " +
                                     l.name + ") in " + path);
    }
    return model;
}

QuantUNet<float> load_checkpoint(const std::string& path, const UNetConfig& expect) {
    QuantUNet<float> m = load_checkpoint(path);
    const UNetConfig& c = m.cfg;
    auto fail = [&](const std::string& field) {
        throw std::runtime_error("checkpoint config mismatch on field '" + field + "' in " + path);
    };
    if (c.in_channels != expect.in_channels) fail("in_channels");
    if (c.base_channels != expect.base_channels) fail("base_channels");
    if (c.depth != expect.depth) fail("depth");
    if (c.out_channels != expect.out_channels) fail("out_channels");
    if (c.quantized != expect.quantized) fail("quantized");
    if (c.act_bits != expect.act_bits) fail("act_bits");
    return m;
}

}  // namespace qunet
