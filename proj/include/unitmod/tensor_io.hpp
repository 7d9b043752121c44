#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "unitmod/tensor.hpp"

UNITMOD_BEGIN_NAMESPACE

// Tensor file: "UMT1", u32 ndim, ndim × u32 dims, then float32 data, all
// little-endian, row-major.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Checkpoint file: "UMCK", u32 entry count, then per entry u32 name length,
// UTF-8 name bytes, and an embedded tensor record.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

UNITMOD_END_NAMESPACE
