#pragma once

// Binary dataset/checkpoint formats (little-endian, fixed layout), PPM/PGM
// rasters and JSON config conversions.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmld/diffusion.hpp"

namespace mmld::io {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- dataset file -------------------------------------------------------------
inline constexpr char kDatasetMagic[4] = {'A', 'M', 'M', 'C'};
inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderSize = 4 + 2 + 8 + 4 * 4 + 8;
inline constexpr std::size_t kViewFields = 5;

struct DatasetHeader {
    std::uint16_t version = kDatasetVersion;
    std::uint64_t count = 0;
    std::uint32_t k = 0, d = 0, image_size = 0, n_attr = 0;
    std::uint64_t seed = 0;

    std::size_t record_size() const;
    std::size_t file_size() const { return kDatasetHeaderSize + count * record_size(); }
    toygen::ToyGenConfig generator_config() const;
};

struct Dataset {
    DatasetHeader header;
    std::vector<toygen::DatasetRecord> records;
};

void write_dataset(const std::filesystem::path& path, const toygen::ToyGenConfig& cfg,
                   const std::vector<toygen::DatasetRecord>& records);
Dataset read_dataset(const std::filesystem::path& path);

// --- checkpoint ---------------------------------------------------------------
inline constexpr char kCheckpointMagic[4] = {'A', 'M', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensorf value;
};

struct Checkpoint {
    diffusion::ModelConfig config;
    std::uint64_t init_seed = 0;
    long step = 0;
    std::optional<diffusion::TrainConfig> train;
    std::vector<NamedTensor> params;
    toygen::NormStats norm;
    std::optional<AdamState<float>> adam;
};

Checkpoint capture(const diffusion::DiffusionModel& m, std::uint64_t init_seed, long step,
                   const diffusion::TrainConfig* train = nullptr, const AdamState<float>* adam = nullptr);
// Builds a model and loads weights and normalization; names and shapes must match.
std::unique_ptr<diffusion::DiffusionModel> instantiate(const Checkpoint& ck);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Generic named-tensor file with JSON metadata and a checksum.
inline constexpr char kBlobMagic[4] = {'A', 'M', 'T', 'B'};
inline constexpr std::uint16_t kBlobVersion = 1;

struct TensorBlob {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_blob(const TensorBlob& b);
TensorBlob decode_blob(const std::vector<std::uint8_t>& bytes);

// A single raw latent [k, d] stored as a blob of kind "latent".
void write_latent(const std::filesystem::path& path, const Tensorf& latent, const nlohmann::json& meta = nlohmann::json::object());
Tensorf read_latent(const std::filesystem::path& path);

// --- rasters ------------------------------------------------------------------
struct Raster {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> data;  // row-major, interleaved channels
};

void write_ppm(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, int width, int height);
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray, int width, int height);
Raster read_pnm(const std::filesystem::path& path);  // P5 or P6, maxval 255

// Segmentation labels are stored scaled by 40 for visibility.
inline constexpr int kSegScale = 40;
std::vector<std::uint8_t> seg_to_gray(const std::vector<std::uint8_t>& seg);
std::vector<std::uint8_t> gray_to_seg(const std::vector<std::uint8_t>& gray);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

// --- JSON config --------------------------------------------------------------
nlohmann::json to_json(const diffusion::ModelConfig& c);
diffusion::ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const diffusion::TrainConfig& c);
diffusion::TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const toygen::ToyGenConfig& c);
toygen::ToyGenConfig gen_config_from_json(const nlohmann::json& j);

}  // namespace mmld::io
