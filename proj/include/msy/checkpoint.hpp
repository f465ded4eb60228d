#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "msy/models.hpp"

namespace msy {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary checkpoint: magic, JSON header (architecture spec, user metadata and
// a tensor index), then raw little-endian f32 payloads in index order.
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const nlohmann::json& meta = nlohmann::json::object());

struct LoadedCheckpoint {
  std::unique_ptr<Model<float>> model;
  nlohmann::json meta;
};

// Rebuilds the model from the embedded spec and restores every tensor.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Restores tensors into an existing model. Names and shapes must match exactly.
void load_weights(const std::filesystem::path& path, Model<float>& model);

// Copies "encoder.*" tensors of a weight file onto "<prefix>.*" entries of the
// store. Used for optional pretrained encoders.
template <typename T>
void load_encoder_weights(ParamStore<T>& store, const std::string& prefix, const std::filesystem::path& path);

nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace msy
