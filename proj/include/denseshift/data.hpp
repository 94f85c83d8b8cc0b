#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "denseshift/tensor.hpp"

namespace denseshift {

struct Dataset {
    Tensor images; // (N,C,H,W)
    std::vector<int> labels;
    int classes = 0;

    int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

ChannelStats compute_channel_stats(const Dataset& d);
void apply_standardization(Dataset& d, const ChannelStats& stats);

// IDX files as published: big-endian magic 0x00000803 (images) / 0x00000801
// (labels). Pixels come back scaled to [0,1]; standardization is a separate step.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// One CIFAR-10 batch file: records of 3073 bytes (label + 3x32x32).
Dataset load_cifar10_batch(const std::string& path);

struct TrainTest {
    Dataset train, test;
};

// data_batch_1..5.bin + test_batch.bin under dir.
TrainTest load_cifar10(const std::string& dir);

// Gaussian clusters with pairwise center separation >= 4 sigma; deterministic.
Dataset synthetic_blobs(int classes, int64_t dim, int64_t n_per_class, uint64_t seed);

// Disjoint class subsets relabeled onto [0, k).
std::pair<Dataset, Dataset> transfer_split(const Dataset& d,
                                           const std::vector<int>& pretrain_classes,
                                           const std::vector<int>& finetune_classes);

Dataset take_prefix(const Dataset& d, int64_t n);

// Deterministic procedural datasets written in the exact IDX / CIFAR-10
// binary layouts, for use where the real corpora are not on disk.
void write_mnist_twin(const std::string& dir, int64_t n_train, int64_t n_test, uint64_t seed);
void write_cifar10_twin(const std::string& dir, int64_t n_per_train_batch, int64_t n_test,
                        uint64_t seed);

struct DatasetConfig {
    std::string kind = "mnist_twin"; // mnist | cifar10 | blobs | mnist_twin | cifar10_twin
    std::string dir = "data";
    uint64_t twin_seed = 1;
    int64_t twin_train = 12000, twin_test = 2000;
    int64_t limit_train = 0, limit_test = 0; // 0 = all
    int blob_classes = 2;
    int64_t blob_dim = 16;
    int64_t blob_n_per_class = 64;
};

// Resolves a config to train/test sets (twin kinds generate files on first
// use, then go through the binary loaders like the real data would).
TrainTest load_dataset(const DatasetConfig& cfg);

} // namespace denseshift
