#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "modeforge/tensor.hpp"

namespace modeforge {

/// Named tensors of a model in registration order. Buffers (batch-norm
/// running statistics) are saved with the parameters but never trained.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  /// Trainable tensor drawn from N(0, std^2).
  Tensor normal(const std::string& name, Shape shape, double std, std::mt19937_64& rng);
  Tensor constant(const std::string& name, Shape shape, double value);
  Tensor from(const std::string& name, Shape shape, Eigen::ArrayXd values);
  Tensor buffer(const std::string& name, Shape shape, double value);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;
  /// Number of trainable scalars.
  Eigen::Index parameter_count() const;

  /// Copies values (not handles) from another store with identical layout.
  void copy_values_from(const ParamStore& other);
  void zero_grad();

 private:
  Tensor add(const std::string& name, Tensor t, bool trainable);
  std::vector<Entry> entries_;
};

/// Thrown for malformed or mismatched checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout: "RFCK", u16 version, u32 index length, JSON index
/// [{name, shape, offset, count}], then little-endian f64 values.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& store);

/// Loads into an existing store; names and shapes must match exactly.
void load_checkpoint(const std::filesystem::path& path, ParamStore& store);

}  // namespace modeforge
