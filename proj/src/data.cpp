#include "denseshift/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "denseshift/rng.hpp"

namespace denseshift {

namespace {

uint32_t read_u32_be(std::istream& is, const std::string& what) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw DataError("truncated " + what);
    return (uint32_t(buf[0]) << 24) | (uint32_t(buf[1]) << 16) | (uint32_t(buf[2]) << 8) |
           uint32_t(buf[3]);
}

void write_u32_be(std::ostream& os, uint32_t v) {
    const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(buf), 4);
}

} // namespace

ChannelStats compute_channel_stats(const Dataset& d) {
    const int64_t n = d.images.shape[0], c = d.images.shape[1];
    const int64_t per = d.images.numel() / (n * c);
    ChannelStats stats;
    stats.mean.assign(static_cast<size_t>(c), 0.0);
    stats.stddev.assign(static_cast<size_t>(c), 0.0);
    for (int64_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, sq = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double* p = d.images.data.data() + (i * c + ch) * per;
            for (int64_t j = 0; j < per; ++j) {
                sum += p[j];
                sq += p[j] * p[j];
            }
        }
        const double m = sum / static_cast<double>(n * per);
        const double var = sq / static_cast<double>(n * per) - m * m;
        stats.mean[static_cast<size_t>(ch)] = m;
        stats.stddev[static_cast<size_t>(ch)] = std::sqrt(std::max(var, 1e-12));
    }
    return stats;
}

void apply_standardization(Dataset& d, const ChannelStats& stats) {
    const int64_t n = d.images.shape[0], c = d.images.shape[1];
    if (static_cast<int64_t>(stats.mean.size()) != c)
        throw ShapeError("standardization stats do not match channel count");
    const int64_t per = d.images.numel() / (n * c);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            double* p = d.images.data.data() + (i * c + ch) * per;
            const double m = stats.mean[static_cast<size_t>(ch)];
            const double inv = 1.0 / stats.stddev[static_cast<size_t>(ch)];
            for (int64_t j = 0; j < per; ++j) p[j] = (p[j] - m) * inv;
        }
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw DataError("cannot open IDX image file: " + images_path);
    if (read_u32_be(imgs, "IDX image header") != 0x00000803u)
        throw DataError("bad IDX image magic in " + images_path);
    const uint32_t n = read_u32_be(imgs, "IDX image header");
    const uint32_t rows = read_u32_be(imgs, "IDX image header");
    const uint32_t cols = read_u32_be(imgs, "IDX image header");

    std::ifstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw DataError("cannot open IDX label file: " + labels_path);
    if (read_u32_be(lbls, "IDX label header") != 0x00000801u)
        throw DataError("bad IDX label magic in " + labels_path);
    const uint32_t ln = read_u32_be(lbls, "IDX label header");
    if (ln != n) throw DataError("IDX image/label counts differ");

    Dataset d;
    d.images = Tensor({static_cast<int64_t>(n), 1, static_cast<int64_t>(rows),
                       static_cast<int64_t>(cols)});
    d.labels.resize(n);
    std::vector<unsigned char> buf(static_cast<size_t>(rows) * cols);
    for (uint32_t i = 0; i < n; ++i) {
        imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!imgs) throw DataError("truncated IDX image payload in " + images_path);
        double* dst = d.images.data.data() + static_cast<int64_t>(i) * rows * cols;
        for (size_t j = 0; j < buf.size(); ++j) dst[j] = buf[j] / 255.0;
        char lb;
        lbls.read(&lb, 1);
        if (!lbls) throw DataError("truncated IDX label payload in " + labels_path);
        d.labels[i] = static_cast<unsigned char>(lb);
    }
    d.classes = 10;
    return d;
}

Dataset load_cifar10_batch(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open CIFAR-10 batch: " + path);
    f.seekg(0, std::ios::end);
    const int64_t size = f.tellg();
    f.seekg(0);
    constexpr int64_t record = 3073;
    if (size <= 0 || size % record != 0)
        throw DataError("CIFAR-10 batch size " + std::to_string(size) +
                        " is not a multiple of 3073: " + path);
    const int64_t n = size / record;
    Dataset d;
    d.images = Tensor({n, 3, 32, 32});
    d.labels.resize(static_cast<size_t>(n));
    d.classes = 10;
    std::vector<unsigned char> buf(record);
    for (int64_t i = 0; i < n; ++i) {
        f.read(reinterpret_cast<char*>(buf.data()), record);
        if (!f) throw DataError("truncated CIFAR-10 batch: " + path);
        if (buf[0] > 9) throw DataError("CIFAR-10 label out of range in " + path);
        d.labels[static_cast<size_t>(i)] = buf[0];
        double* dst = d.images.data.data() + i * 3 * 1024;
        for (int64_t j = 0; j < 3072; ++j) dst[j] = buf[static_cast<size_t>(1 + j)] / 255.0;
    }
    return d;
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
    int64_t total = 0;
    for (const auto& p : parts) total += p.size();
    Dataset out;
    auto shape = parts.front().images.shape;
    shape[0] = total;
    out.images = Tensor(shape);
    out.classes = parts.front().classes;
    double* dst = out.images.data.data();
    for (auto& p : parts) {
        std::copy(p.images.data.begin(), p.images.data.end(), dst);
        dst += p.images.numel();
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

} // namespace

TrainTest load_cifar10(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<Dataset> parts;
    for (int b = 1; b <= 5; ++b)
        parts.push_back(load_cifar10_batch((fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string()));
    TrainTest tt;
    tt.train = concat(std::move(parts));
    tt.test = load_cifar10_batch((fs::path(dir) / "test_batch.bin").string());
    return tt;
}

Dataset synthetic_blobs(int classes, int64_t dim, int64_t n_per_class, uint64_t seed) {
    if (classes < 2) throw ConfigError("synthetic_blobs needs at least 2 classes");
    Rng rng = Rng::for_stream(seed, 0xb10b);
    // Deterministic centers with pairwise distance >= 4 (sigma = 1).
    std::vector<std::vector<double>> centers;
    while (static_cast<int>(centers.size()) < classes) {
        std::vector<double> c(static_cast<size_t>(dim));
        if (static_cast<int64_t>(centers.size()) < dim) {
            c[centers.size()] = 4.0;
        } else {
            for (auto& v : c) v = rng.normal(0.0, 4.0);
        }
        bool ok = true;
        for (const auto& o : centers) {
            double d2 = 0.0;
            for (int64_t j = 0; j < dim; ++j) d2 += (c[static_cast<size_t>(j)] - o[static_cast<size_t>(j)]) * (c[static_cast<size_t>(j)] - o[static_cast<size_t>(j)]);
            if (d2 < 16.0) {
                ok = false;
                break;
            }
        }
        if (ok) centers.push_back(std::move(c));
    }

    Dataset d;
    d.images = Tensor({static_cast<int64_t>(classes) * n_per_class, dim, 1, 1});
    d.classes = classes;
    for (int c = 0; c < classes; ++c)
        for (int64_t i = 0; i < n_per_class; ++i) {
            const int64_t idx = c * n_per_class + i;
            double* p = d.images.data.data() + idx * dim;
            for (int64_t j = 0; j < dim; ++j)
                p[j] = centers[static_cast<size_t>(c)][static_cast<size_t>(j)] + rng.normal(0, 1);
            d.labels.push_back(c);
        }
    return d;
}

std::pair<Dataset, Dataset> transfer_split(const Dataset& d,
                                           const std::vector<int>& pretrain_classes,
                                           const std::vector<int>& finetune_classes) {
    std::set<int> pre(pretrain_classes.begin(), pretrain_classes.end());
    std::set<int> fin(finetune_classes.begin(), finetune_classes.end());
    for (int c : fin)
        if (pre.count(c)) throw ConfigError("transfer_split: class sets overlap");
    if (pre.empty() || fin.empty()) throw ConfigError("transfer_split: empty class set");

    auto build = [&](const std::vector<int>& cls) {
        std::vector<int> remap(static_cast<size_t>(d.classes), -1);
        for (size_t i = 0; i < cls.size(); ++i) {
            if (cls[i] < 0 || cls[i] >= d.classes)
                throw ConfigError("transfer_split: class id out of range");
            remap[static_cast<size_t>(cls[i])] = static_cast<int>(i);
        }
        std::vector<int64_t> keep;
        for (int64_t i = 0; i < d.size(); ++i)
            if (remap[static_cast<size_t>(d.labels[static_cast<size_t>(i)])] >= 0) keep.push_back(i);
        if (keep.empty()) throw DataError("transfer_split: no samples for class subset");
        Dataset out;
        auto shape = d.images.shape;
        shape[0] = static_cast<int64_t>(keep.size());
        out.images = Tensor(shape);
        out.classes = static_cast<int>(cls.size());
        const int64_t per = d.images.numel() / d.size();
        for (size_t k = 0; k < keep.size(); ++k) {
            std::copy_n(d.images.data.begin() + keep[k] * per, per,
                        out.images.data.begin() + static_cast<int64_t>(k) * per);
            out.labels.push_back(remap[static_cast<size_t>(d.labels[static_cast<size_t>(keep[k])])]);
        }
        return out;
    };
    return {build(pretrain_classes), build(finetune_classes)};
}

Dataset take_prefix(const Dataset& d, int64_t n) {
    if (n <= 0 || n >= d.size()) return d;
    Dataset out;
    auto shape = d.images.shape;
    shape[0] = n;
    out.images = Tensor(shape);
    const int64_t per = d.images.numel() / d.size();
    std::copy_n(d.images.data.begin(), n * per, out.images.data.begin());
    out.labels.assign(d.labels.begin(), d.labels.begin() + n);
    out.classes = d.classes;
    return out;
}

namespace {

void add_bump(std::vector<double>& img, int side, double cy, double cx, double s, double amp) {
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            img[static_cast<size_t>(y * side + x)] +=
                amp * std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (2 * s * s));
}

void add_stroke_segment(std::vector<double>& img, int side, double y0, double x0, double y1,
                        double x1, double thick, double amp) {
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double vy = y1 - y0, vx = x1 - x0;
            const double len2 = vy * vy + vx * vx + 1e-9;
            double t = ((y - y0) * vy + (x - x0) * vx) / len2;
            t = std::clamp(t, 0.0, 1.0);
            const double dy = y - (y0 + t * vy), dx = x - (x0 + t * vx);
            img[static_cast<size_t>(y * side + x)] +=
                amp * std::exp(-(dy * dy + dx * dx) / (2 * thick * thick));
        }
}

// Class templates mix class-specific structure with bumps drawn from a pool
// shared by all classes, so classes overlap and stay confusable. Each class
// gets several variants; samples add jitter, occlusion, and pixel noise.
struct TwinHardness {
    int variants;
    double noise;
    double occl_prob;
    double shared_amp_lo, shared_amp_hi;
    double amp_lo, amp_hi;
};

// The 32x32 twin is kept harder than the 28x28 one: the freezing experiment
// needs gradients that stay alive for the whole run.
constexpr TwinHardness kIdxHardness{3, 0.11, 0.3, 0.25, 0.45, 0.6, 1.4};
constexpr TwinHardness kCifarHardness{4, 0.16, 0.4, 0.5, 0.9, 0.5, 1.4};

std::vector<double> class_template(int side, uint64_t seed, int cls, int variant,
                                   const TwinHardness& hard) {
    // Every class draws the same part shapes (sizes, amplitudes, stroke
    // geometry) from a shared pool; class identity is only the arrangement.
    // First-layer features then generalize across classes and the deeper
    // layers carry the discriminative work.
    Rng pool = Rng::for_stream(seed, 0x9001);
    Rng rng = Rng::for_stream(seed, 0x7e000 + static_cast<uint64_t>(cls) * 64 +
                                        static_cast<uint64_t>(variant));
    std::vector<double> img(static_cast<size_t>(side) * side, 0.0);
    const int parts = 4;
    for (int b = 0; b < parts; ++b) {
        const double sigma = pool.uniform(side * 0.05, side * 0.11);
        const double amp = pool.uniform(hard.shared_amp_lo, hard.shared_amp_hi);
        add_bump(img, side, rng.uniform(side * 0.18, side * 0.82),
                 rng.uniform(side * 0.18, side * 0.82), sigma, amp);
    }
    const double len = pool.uniform(side * 0.3, side * 0.55);
    const double thick = pool.uniform(side * 0.04, side * 0.07);
    const double cy = rng.uniform(side * 0.3, side * 0.7);
    const double cx = rng.uniform(side * 0.3, side * 0.7);
    const double ang = rng.uniform(0.0, 3.14159265);
    add_stroke_segment(img, side, cy - std::sin(ang) * len / 2, cx - std::cos(ang) * len / 2,
                       cy + std::sin(ang) * len / 2, cx + std::cos(ang) * len / 2, thick, 0.9);
    double lo = 1e9, hi = -1e9;
    for (double v : img) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double& v : img) v = (v - lo) / std::max(hi - lo, 1e-9);
    return img;
}

unsigned char render_pixel(double v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void render_sample(const std::vector<double>& tmpl, int side, Rng& rng, unsigned char* out,
                   const TwinHardness& hard) {
    const int max_shift = side / 7;
    const int dy = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    const int dx = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    const double amp = rng.uniform(hard.amp_lo, hard.amp_hi);
    int oy = -100, ox = -100, osz = 0;
    if (rng.uniform(0, 1) < hard.occl_prob) {
        osz = static_cast<int>(rng.uniform_int(side / 8, side / 5));
        oy = static_cast<int>(rng.uniform_int(0, side - osz));
        ox = static_cast<int>(rng.uniform_int(0, side - osz));
    }
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const int sy = y - dy, sx = x - dx;
            double v = (sy >= 0 && sy < side && sx >= 0 && sx < side)
                           ? tmpl[static_cast<size_t>(sy * side + sx)]
                           : 0.0;
            if (y >= oy && y < oy + osz && x >= ox && x < ox + osz) v = 0.0;
            v = amp * v + rng.normal(0.0, hard.noise);
            out[y * side + x] = render_pixel(v);
        }
}

void write_idx_pair(const std::string& images_path, const std::string& labels_path,
                    int64_t count, int side, uint64_t seed, uint64_t stream) {
    const TwinHardness& hard = kIdxHardness;
    Rng rng = Rng::for_stream(seed, stream);
    std::vector<std::vector<double>> templates; // class-major, one per variant
    for (int c = 0; c < 10; ++c)
        for (int v = 0; v < hard.variants; ++v)
            templates.push_back(class_template(side, seed, c, v, hard));

    std::ofstream imgs(images_path, std::ios::binary);
    std::ofstream lbls(labels_path, std::ios::binary);
    if (!imgs || !lbls) throw DataError("cannot write twin IDX files");
    write_u32_be(imgs, 0x00000803u);
    write_u32_be(imgs, static_cast<uint32_t>(count));
    write_u32_be(imgs, static_cast<uint32_t>(side));
    write_u32_be(imgs, static_cast<uint32_t>(side));
    write_u32_be(lbls, 0x00000801u);
    write_u32_be(lbls, static_cast<uint32_t>(count));

    std::vector<unsigned char> buf(static_cast<size_t>(side) * side);
    for (int64_t i = 0; i < count; ++i) {
        const int cls = static_cast<int>(i % 10);
        const int variant = static_cast<int>(rng.uniform_int(0, hard.variants - 1));
        render_sample(templates[static_cast<size_t>(cls * hard.variants + variant)], side, rng,
                      buf.data(), hard);
        imgs.write(reinterpret_cast<const char*>(buf.data()),
                   static_cast<std::streamsize>(buf.size()));
        const char lb = static_cast<char>(cls);
        lbls.write(&lb, 1);
    }
}

} // namespace

void write_mnist_twin(const std::string& dir, int64_t n_train, int64_t n_test, uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_idx_pair((fs::path(dir) / "train-images-idx3-ubyte").string(),
                   (fs::path(dir) / "train-labels-idx1-ubyte").string(), n_train, 28, seed, 1);
    write_idx_pair((fs::path(dir) / "t10k-images-idx3-ubyte").string(),
                   (fs::path(dir) / "t10k-labels-idx1-ubyte").string(), n_test, 28, seed, 2);
}

void write_cifar10_twin(const std::string& dir, int64_t n_per_train_batch, int64_t n_test,
                        uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    constexpr int side = 32;
    const TwinHardness& hard = kCifarHardness;
    std::vector<std::vector<double>> templates; // class-major, one per variant
    for (int c = 0; c < 10; ++c)
        for (int v = 0; v < hard.variants; ++v)
            templates.push_back(class_template(side, seed + 7, c, v, hard));
    auto write_batch = [&](const std::string& path, int64_t count, uint64_t stream) {
        Rng rng = Rng::for_stream(seed, stream);
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot write twin CIFAR batch: " + path);
        std::vector<unsigned char> gray(static_cast<size_t>(side) * side);
        for (int64_t i = 0; i < count; ++i) {
            const int cls = static_cast<int>(i % 10);
            const int variant = static_cast<int>(rng.uniform_int(0, hard.variants - 1));
            render_sample(templates[static_cast<size_t>(cls * hard.variants + variant)], side,
                          rng, gray.data(), hard);
            const char lb = static_cast<char>(cls);
            f.write(&lb, 1);
            for (int ch = 0; ch < 3; ++ch) {
                // per-sample channel gain jitter; no class-specific color cue
                const double a = rng.uniform(0.5, 1.2);
                std::vector<unsigned char> plane(gray.size());
                for (size_t j = 0; j < gray.size(); ++j) {
                    const double v = a * (gray[j] / 255.0) + rng.normal(0.0, 0.06);
                    plane[j] = render_pixel(v);
                }
                f.write(reinterpret_cast<const char*>(plane.data()),
                        static_cast<std::streamsize>(plane.size()));
            }
        }
    };
    for (int b = 1; b <= 5; ++b)
        write_batch((fs::path(dir) / ("data_batch_" + std::to_string(b) + ".bin")).string(),
                    n_per_train_batch, static_cast<uint64_t>(10 + b));
    write_batch((fs::path(dir) / "test_batch.bin").string(), n_test, 20);
}

TrainTest load_dataset(const DatasetConfig& cfg) {
    namespace fs = std::filesystem;
    TrainTest tt;
    if (cfg.kind == "mnist" || cfg.kind == "mnist_twin") {
        if (cfg.kind == "mnist_twin" &&
            !fs::exists(fs::path(cfg.dir) / "train-images-idx3-ubyte"))
            write_mnist_twin(cfg.dir, cfg.twin_train, cfg.twin_test, cfg.twin_seed);
        tt.train = load_idx((fs::path(cfg.dir) / "train-images-idx3-ubyte").string(),
                            (fs::path(cfg.dir) / "train-labels-idx1-ubyte").string());
        tt.test = load_idx((fs::path(cfg.dir) / "t10k-images-idx3-ubyte").string(),
                           (fs::path(cfg.dir) / "t10k-labels-idx1-ubyte").string());
    } else if (cfg.kind == "cifar10" || cfg.kind == "cifar10_twin") {
        if (cfg.kind == "cifar10_twin" && !fs::exists(fs::path(cfg.dir) / "data_batch_1.bin"))
            write_cifar10_twin(cfg.dir, (cfg.twin_train + 4) / 5, cfg.twin_test, cfg.twin_seed);
        tt = load_cifar10(cfg.dir);
    } else if (cfg.kind == "blobs") {
        tt.train = synthetic_blobs(cfg.blob_classes, cfg.blob_dim, cfg.blob_n_per_class,
                                   cfg.twin_seed);
        tt.test = synthetic_blobs(cfg.blob_classes, cfg.blob_dim,
                                  std::max<int64_t>(cfg.blob_n_per_class / 4, 8),
                                  cfg.twin_seed + 1);
    } else {
        throw ConfigError("unknown dataset kind: " + cfg.kind);
    }
    tt.train = take_prefix(tt.train, cfg.limit_train);
    tt.test = take_prefix(tt.test, cfg.limit_test);
    return tt;
}

} // namespace denseshift
