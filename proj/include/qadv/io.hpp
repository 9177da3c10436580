#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "qadv/dataset.hpp"
#include "qadv/model.hpp"

namespace qadv {

// IDX array: big-endian magic (0, 0, type, rank), rank big-endian u32 extents,
// then the payload. Elements are widened to double without scaling.
struct IdxArray {
    std::uint8_t type = 0x08;
    Shape dims;
    std::vector<double> values;
};

IdxArray read_idx(const std::filesystem::path& path);
// type 0x08 rounds and range-checks into unsigned bytes; 0x0E stores doubles.
void write_idx(const std::filesystem::path& path, const IdxArray& array);

// Images as [N, 1, H, W] (rank-3 files) or [N, D] (rank-2). Byte images are
// divided by 255; floating payloads are taken as is and must lie in [0,1].
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t classes);
// Stores features as 0x0E doubles (exact) and labels as bytes.
void save_idx_dataset(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes
// (channel-major 32x32), loaded as [N, 3, 32, 32] / 255.
Dataset load_cifar_binary(const std::vector<std::filesystem::path>& files);

enum class DataSource { idx, cifar, blobs };

struct DatasetSpec {
    DataSource source = DataSource::blobs;
    std::filesystem::path train_images, train_labels, test_images, test_labels;  // idx
    std::vector<std::filesystem::path> train_files, test_files;                  // cifar
    std::size_t classes = 10;
    // blobs
    Shape blob_shape{4};
    double blob_spread = 0.05;
    std::size_t train_size = 400;
    std::size_t test_size = 200;
    std::uint64_t blob_seed = 7;
    // Optional caps applied to file-backed sets (0 keeps everything).
    std::size_t train_limit = 0;
    std::size_t test_limit = 0;
};

std::pair<Dataset, Dataset> load_dataset(const DatasetSpec& spec);

// Rounds master parameters and batch-norm statistics to the nearest float so
// that a checkpoint round trip is exact.
void snap_to_float32(Model& model);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes to a sibling temporary and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace qadv
