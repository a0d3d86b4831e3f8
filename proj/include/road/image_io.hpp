#pragma once

#include "road/scene.hpp"

#include <filesystem>
#include <cstdint>
#include <functional>
#include <vector>

namespace road {

void write_rgb_png(const std::filesystem::path& path, const RgbImage& image);
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);
RgbImage read_rgb_png(const std::filesystem::path& path);
LabelMap read_label_png(const std::filesystem::path& path);

/// Encodes a label map to PNG bytes in memory (used for round-trip checks).
std::vector<std::uint8_t> encode_label_png(const LabelMap& labels);
LabelMap decode_label_png(const std::vector<std::uint8_t>& bytes);

/// Every PNG read is reported to the installed observer. Used by tests to
/// audit which dataset files a code path touches. Pass nullptr to clear.
using ReadObserver = std::function<void(const std::filesystem::path&)>;
void set_read_observer(ReadObserver observer);

}  // namespace road
