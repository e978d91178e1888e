#pragma once

// File formats: binary PPM/PGM images, the ESNW weights container and the
// JSON network config.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "esnet/network.hpp"

namespace esnet {

/// Malformed file contents. `offset` is the byte position where parsing stopped.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

// Images --------------------------------------------------------------------

/// 8-bit interleaved pixels; channels is 3 (PPM) or 1 (PGM).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;

    bool operator==(const Image8&) const = default;
};

/// Accepts "P6" or "P5" with '#' comments in the header; maxval must be 255.
Image8 parse_pnm(const std::string& bytes);
/// Canonical header "P6\n<w> <h>\n255\n" (P5 for one channel) plus payload.
std::string encode_pnm(const Image8& img);

Image8 read_pnm(const std::string& path);
void write_pnm(const std::string& path, const Image8& img);

/// (1, 3, H, W) tensor with values byte / 255.
Tensor4d image_to_tensor(const Image8& img);
/// Single-channel image of class indices; throws when a label is outside [0, 255].
Image8 labels_to_image(const LabelMap& labels, std::size_t index = 0);
LabelMap image_to_labels(const Image8& img);

/// Class c of C maps to hue 360 c / C at full saturation and value.
std::array<std::uint8_t, 3> palette_color(std::size_t cls, std::size_t classes);
Image8 colorize(const LabelMap& labels, std::size_t classes, std::size_t index = 0);

// Weights -------------------------------------------------------------------

struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    bool operator==(const NamedArray&) const = default;
};

std::string encode_weights(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> decode_weights(const std::string& bytes);

/// Every layout entry (running statistics included) in layout order.
/// Convolution weights are rank 4, per-channel vectors rank 1.
template <typename T>
std::vector<NamedArray> to_named_arrays(const ParamStore<T>& store);

/// Fills `store` by name. Throws PreconditionError listing missing and
/// unexpected names, or naming the first tensor whose dims disagree.
template <typename T>
void from_named_arrays(ParamStore<T>& store, const std::vector<NamedArray>& arrays);

template <typename T>
void save_weights(const std::string& path, const ParamStore<T>& store);
template <typename T>
void load_weights(const std::string& path, ParamStore<T>& store);

// Config --------------------------------------------------------------------

/// The config document describing build_esnet(20).
std::string default_config_json();

/// Parses a config document; unknown keys and invalid values throw
/// PreconditionError naming the offending key.
NetworkSpec parse_config(const std::string& text);
NetworkSpec load_config(const std::string& path);

/// Serializes a spec, collapsing consecutive identical stages into groups.
std::string config_to_json(const NetworkSpec& spec);

}  // namespace esnet
