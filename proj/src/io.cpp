#include "esnet/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"

namespace esnet {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path + " for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write to " + path + " failed");
}

// Images --------------------------------------------------------------------

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderReader {
public:
    HeaderReader(const std::string& b, std::size_t start) : bytes_(b), pos_(start) {}

    std::size_t pos() const { return pos_; }

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (is_space(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number(const char* what) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        std::size_t v = 0;
        while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
            v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
            if (v > (1u << 24)) throw FormatError(std::string(what) + " is too large", start);
            ++pos_;
        }
        if (pos_ == start) {
            throw FormatError(std::string("expected ") + what + (pos_ >= bytes_.size() ? ", found end of file" : ""),
                              pos_);
        }
        return v;
    }

    void single_space() {
        if (pos_ >= bytes_.size() || !is_space(bytes_[pos_])) {
            throw FormatError("expected one whitespace byte before the pixel data", pos_);
        }
        ++pos_;
    }

private:
    const std::string& bytes_;
    std::size_t pos_;
};

}  // namespace

Image8 parse_pnm(const std::string& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
        throw FormatError("bad magic: expected P6 (PPM) or P5 (PGM)", 0);
    }
    Image8 img;
    img.channels = bytes[1] == '6' ? 3 : 1;
    if (bytes.size() > 2 && !is_space(bytes[2]) && bytes[2] != '#') {
        throw FormatError("bad magic: expected whitespace after P" + std::string(1, bytes[1]), 2);
    }
    HeaderReader r(bytes, 2);
    img.width = r.number("width");
    img.height = r.number("height");
    const std::size_t maxval_at = (r.skip_space_and_comments(), r.pos());
    const std::size_t maxval = r.number("maxval");
    if (maxval != 255) throw FormatError("maxval must be 255, got " + std::to_string(maxval), maxval_at);
    r.single_space();
    if (img.width == 0 || img.height == 0) throw FormatError("image has zero width or height", r.pos());
    const std::size_t need = img.width * img.height * img.channels;
    const std::size_t have = bytes.size() - r.pos();
    if (have < need) {
        throw FormatError("truncated payload: expected " + std::to_string(need) + " bytes, found " +
                              std::to_string(have),
                          bytes.size());
    }
    if (have > need) throw FormatError("trailing bytes after the pixel data", r.pos() + need);
    img.pixels.resize(need);
    std::memcpy(img.pixels.data(), bytes.data() + r.pos(), need);
    return img;
}

std::string encode_pnm(const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw PreconditionError("image must have 1 or 3 channels");
    if (img.pixels.size() != img.width * img.height * img.channels) {
        throw ShapeError("image pixel buffer does not match its dimensions");
    }
    std::string out = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    return out;
}

Image8 read_pnm(const std::string& path) {
    try {
        return parse_pnm(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what(), e.offset());
    }
}

void write_pnm(const std::string& path, const Image8& img) { write_file(path, encode_pnm(img)); }

Tensor4d image_to_tensor(const Image8& img) {
    if (img.channels != 3) throw PreconditionError("expected an RGB (P6) image");
    Tensor4d t(1, 3, img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) t(0, c, y, x) = img.pixels[(y * img.width + x) * 3 + c] / 255.0;
        }
    }
    return t;
}

Image8 labels_to_image(const LabelMap& labels, std::size_t index) {
    if (index >= labels.n) throw PreconditionError("label map index out of range");
    Image8 img{labels.w, labels.h, 1, std::vector<std::uint8_t>(labels.w * labels.h)};
    for (std::size_t y = 0; y < labels.h; ++y) {
        for (std::size_t x = 0; x < labels.w; ++x) {
            const int v = labels(index, y, x);
            if (v < 0 || v > 255) throw PreconditionError("label " + std::to_string(v) + " does not fit in a PGM byte");
            img.pixels[y * labels.w + x] = static_cast<std::uint8_t>(v);
        }
    }
    return img;
}

LabelMap image_to_labels(const Image8& img) {
    if (img.channels != 1) throw PreconditionError("expected a grayscale (P5) label map");
    LabelMap m(1, img.height, img.width);
    std::copy(img.pixels.begin(), img.pixels.end(), m.data.begin());
    return m;
}

std::array<std::uint8_t, 3> palette_color(std::size_t cls, std::size_t classes) {
    if (classes == 0 || cls >= classes) throw PreconditionError("palette: class index out of range");
    // HSV -> RGB with S = V = 1.
    const double h = 6.0 * static_cast<double>(cls) / static_cast<double>(classes);
    const int sector = static_cast<int>(std::floor(h)) % 6;
    const double f = h - std::floor(h);
    const auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * v)); };
    const std::uint8_t full = 255, rise = byte(f), fall = byte(1.0 - f);
    switch (sector) {
        case 0: return {full, rise, 0};
        case 1: return {fall, full, 0};
        case 2: return {0, full, rise};
        case 3: return {0, fall, full};
        case 4: return {rise, 0, full};
        default: return {full, 0, fall};
    }
}

Image8 colorize(const LabelMap& labels, std::size_t classes, std::size_t index) {
    if (index >= labels.n) throw PreconditionError("label map index out of range");
    Image8 img{labels.w, labels.h, 3, std::vector<std::uint8_t>(labels.w * labels.h * 3)};
    for (std::size_t y = 0; y < labels.h; ++y) {
        for (std::size_t x = 0; x < labels.w; ++x) {
            const int v = labels(index, y, x);
            if (v < 0) throw PreconditionError("negative label in colorize");
            const auto rgb = palette_color(static_cast<std::size_t>(v), classes);
            std::copy(rgb.begin(), rgb.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>((y * labels.w + x) * 3));
        }
    }
    return img;
}

// Weights -------------------------------------------------------------------

namespace {

constexpr std::uint32_t kWeightsVersion = 1;

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
public:
    explicit ByteReader(const std::string& b) : bytes_(b) {}
    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

    template <typename U>
    U le(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
        }
        pos_ += sizeof(U);
        return v;
    }

    std::string take(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint32_t> dims_of(const ParamInfo& info) {
    const Shape4& s = info.shape;
    if (info.rank == 1) return {static_cast<std::uint32_t>(s.n)};
    return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
            static_cast<std::uint32_t>(s.w)};
}

std::string dims_string(const std::vector<std::uint32_t>& d) {
    std::string s = "(";
    for (std::size_t i = 0; i < d.size(); ++i) s += (i ? ", " : "") + std::to_string(d[i]);
    return s + ")";
}

}  // namespace

std::string encode_weights(const std::vector<NamedArray>& arrays) {
    std::set<std::string> seen;
    std::string out = "ESNW";
    put_le<std::uint32_t>(out, kWeightsVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
    for (const NamedArray& a : arrays) {
        if (!seen.insert(a.name).second) throw PreconditionError("duplicate tensor name " + a.name);
        if (a.name.size() > 0xFFFF) throw PreconditionError("tensor name too long: " + a.name.substr(0, 32));
        if (a.dims.size() > 0xFF) throw PreconditionError("tensor rank too large: " + a.name);
        std::size_t numel = 1;
        for (std::uint32_t d : a.dims) numel *= d;
        if (numel != a.data.size()) {
            throw ShapeError("tensor " + a.name + " has " + std::to_string(a.data.size()) + " values but dims " +
                             dims_string(a.dims));
        }
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(a.name.size()));
        out += a.name;
        put_le<std::uint8_t>(out, 0);
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(a.dims.size()));
        for (std::uint32_t d : a.dims) put_le<std::uint32_t>(out, d);
        for (float f : a.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, sizeof bits);
            put_le<std::uint32_t>(out, bits);
        }
    }
    return out;
}

std::vector<NamedArray> decode_weights(const std::string& bytes) {
    ByteReader r(bytes);
    if (r.take(std::min<std::size_t>(4, bytes.size()), "magic") != "ESNW") throw FormatError("bad magic: expected ESNW", 0);
    const std::size_t version_at = r.pos();
    const auto version = r.le<std::uint32_t>("version");
    if (version != kWeightsVersion) {
        throw FormatError("unsupported weights version " + std::to_string(version), version_at);
    }
    const auto count = r.le<std::uint32_t>("tensor count");
    std::vector<NamedArray> out;
    std::set<std::string> seen;
    for (std::uint32_t t = 0; t < count; ++t) {
        NamedArray a;
        const std::size_t entry_at = r.pos();
        const auto name_len = r.le<std::uint16_t>("name length");
        a.name = r.take(name_len, "name");
        if (!seen.insert(a.name).second) throw FormatError("duplicate tensor name " + a.name, entry_at);
        const std::size_t dtype_at = r.pos();
        const auto dtype = r.le<std::uint8_t>("dtype");
        if (dtype != 0) throw FormatError("tensor " + a.name + ": unsupported dtype " + std::to_string(dtype), dtype_at);
        const auto rank = r.le<std::uint8_t>("rank");
        std::size_t numel = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            a.dims.push_back(r.le<std::uint32_t>("dims"));
            numel *= a.dims.back();
        }
        if (numel > (bytes.size() - r.pos()) / 4) {
            throw FormatError("tensor " + a.name + ": truncated payload for dims " + dims_string(a.dims), r.pos());
        }
        a.data.resize(numel);
        for (float& f : a.data) {
            const auto bits = r.le<std::uint32_t>("payload");
            std::memcpy(&f, &bits, sizeof f);
        }
        out.push_back(std::move(a));
    }
    if (!r.done()) throw FormatError("trailing bytes after the last tensor", r.pos());
    return out;
}

template <typename T>
std::vector<NamedArray> to_named_arrays(const ParamStore<T>& store) {
    std::vector<NamedArray> out;
    const ParamLayout& layout = store.layout();
    out.reserve(layout.size());
    for (std::size_t i = 0; i < layout.size(); ++i) {
        NamedArray a{layout[i].name, dims_of(layout[i]), {}};
        a.data.reserve(store[i].size());
        for (T v : store[i].values()) a.data.push_back(static_cast<float>(v));
        out.push_back(std::move(a));
    }
    return out;
}

template <typename T>
void from_named_arrays(ParamStore<T>& store, const std::vector<NamedArray>& arrays) {
    const ParamLayout& layout = store.layout();
    std::vector<std::string> missing, extra;
    std::vector<const NamedArray*> found(layout.size(), nullptr);
    for (const NamedArray& a : arrays) {
        if (!layout.contains(a.name)) {
            extra.push_back(a.name);
            continue;
        }
        found[layout.index_of(a.name)] = &a;
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (!found[i]) missing.push_back(layout[i].name);
    }
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "weights do not match the network:";
        const auto list = [&msg](const char* label, const std::vector<std::string>& names) {
            if (names.empty()) return;
            msg += std::string(" ") + label + " [";
            for (std::size_t i = 0; i < names.size(); ++i) msg += (i ? ", " : "") + names[i];
            msg += "]";
        };
        list("missing", missing);
        list("unexpected", extra);
        throw PreconditionError(msg);
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto want = dims_of(layout[i]);
        if (found[i]->dims != want) {
            throw PreconditionError("tensor " + layout[i].name + " has dims " + dims_string(found[i]->dims) +
                                    ", network expects " + dims_string(want));
        }
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        std::transform(found[i]->data.begin(), found[i]->data.end(), store[i].data(),
                       [](float f) { return static_cast<T>(f); });
    }
}

template <typename T>
void save_weights(const std::string& path, const ParamStore<T>& store) {
    write_file(path, encode_weights(to_named_arrays(store)));
}

template <typename T>
void load_weights(const std::string& path, ParamStore<T>& store) {
    std::vector<NamedArray> arrays;
    try {
        arrays = decode_weights(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what(), e.offset());
    }
    from_named_arrays(store, arrays);
}

#define ESNET_INSTANTIATE_IO(T)                                                                   \
    template std::vector<NamedArray> to_named_arrays<T>(const ParamStore<T>&);                     \
    template void from_named_arrays<T>(ParamStore<T>&, const std::vector<NamedArray>&);            \
    template void save_weights<T>(const std::string&, const ParamStore<T>&);                      \
    template void load_weights<T>(const std::string&, ParamStore<T>&);

ESNET_INSTANTIATE_IO(float)
ESNET_INSTANTIATE_IO(double)

// Config --------------------------------------------------------------------

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::size_t positive_int(const json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<long long>() <= 0) {
        throw PreconditionError("config: \"" + key + "\" must be a positive integer");
    }
    return v.get<std::size_t>();
}

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; })) {
            throw PreconditionError("config: unknown key \"" + it.key() + "\" in " + where);
        }
    }
}

std::vector<StageGroup> stages_to_groups(const NetworkSpec& spec) {
    std::vector<StageGroup> groups;
    for (const StageSpec& s : spec.stages) {
        StageGroup g;
        g.kind = s.block.kind;
        g.K = s.block.kind == BlockKind::FCU ? s.block.K : 3;
        g.rates = s.block.kind == BlockKind::PFCU ? s.block.rates : std::vector<std::size_t>{2, 5, 9};
        g.dilation = s.block.kind == BlockKind::NonBt1D ? s.block.dilation : 1;
        if (!groups.empty()) {
            StageGroup prev = groups.back();
            prev.count = 1;
            if (prev == g && is_residual(g.kind)) {
                ++groups.back().count;
                continue;
            }
        }
        groups.push_back(g);
    }
    return groups;
}

bool same_topology(const NetworkSpec& a, const NetworkSpec& b) { return stages_to_groups(a) == stages_to_groups(b); }

}  // namespace

std::string default_config_json() { return config_to_json(build_esnet(20)); }

NetworkSpec parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("config is not valid JSON: ") + e.what(), e.byte);
    }
    if (!doc.is_object()) throw PreconditionError("config: top level must be an object");
    reject_unknown(doc, {"num_classes", "input", "width_scale", "widths", "stages"}, "the top level");

    const std::size_t classes = doc.contains("num_classes") ? positive_int(doc["num_classes"], "num_classes") : 20;
    InputDims input{3, 1024, 512};
    if (doc.contains("input")) {
        const json& in = doc["input"];
        if (!in.is_array() || in.size() != 3) throw PreconditionError("config: \"input\" must be [c, h, w]");
        for (std::size_t i = 0; i < 3; ++i) input[i] = positive_int(in[i], "input");
    }
    std::vector<std::size_t> widths = kEsnetWidths;
    if (doc.contains("widths")) {
        if (doc.contains("width_scale")) throw PreconditionError("config: give either \"widths\" or \"width_scale\"");
        const json& w = doc["widths"];
        if (!w.is_array() || w.empty()) throw PreconditionError("config: \"widths\" must be a non-empty array");
        widths.clear();
        for (const json& v : w) widths.push_back(positive_int(v, "widths"));
    } else if (doc.contains("width_scale")) {
        const json& s = doc["width_scale"];
        if (!s.is_number() || !(s.get<double>() > 0.0)) {
            throw PreconditionError("config: \"width_scale\" must be a positive number");
        }
        widths = scaled_widths(s.get<double>());
    }

    std::vector<StageGroup> groups;
    if (doc.contains("stages")) {
        const json& st = doc["stages"];
        if (!st.is_array() || st.empty()) throw PreconditionError("config: \"stages\" must be a non-empty array");
        for (std::size_t i = 0; i < st.size(); ++i) {
            const json& g = st[i];
            const std::string where = "stages[" + std::to_string(i) + "]";
            if (!g.is_object()) throw PreconditionError("config: " + where + " must be an object");
            reject_unknown(g, {"kind", "count", "K", "rates", "dilation"}, where);
            if (!g.contains("kind") || !g["kind"].is_string()) {
                throw PreconditionError("config: " + where + " needs a string \"kind\"");
            }
            StageGroup sg;
            sg.kind = parse_block_kind(g["kind"].get<std::string>());
            sg.count = g.contains("count") ? positive_int(g["count"], where + ".count") : 1;
            if (g.contains("K")) sg.K = positive_int(g["K"], where + ".K");
            if (g.contains("dilation")) sg.dilation = positive_int(g["dilation"], where + ".dilation");
            if (g.contains("rates")) {
                const json& r = g["rates"];
                if (!r.is_array() || r.size() != 3) throw PreconditionError("config: " + where + ".rates must have 3 entries");
                sg.rates.clear();
                for (const json& v : r) sg.rates.push_back(positive_int(v, where + ".rates"));
            }
            groups.push_back(sg);
        }
    } else {
        groups = esnet_stage_groups();
    }

    NetworkSpec spec = assemble_network("custom", groups, widths, classes, input);
    const NetworkSpec esnet = build_esnet(classes);
    const NetworkSpec erfnet = build_erfnet_reference(classes);
    if (same_topology(spec, esnet)) {
        spec.label = esnet.label;
        spec.published_accounting_total = esnet.published_accounting_total;
    } else if (same_topology(spec, erfnet)) {
        spec.label = erfnet.label;
        spec.published_accounting_total = erfnet.published_accounting_total;
    }
    return spec;
}

NetworkSpec load_config(const std::string& path) { return parse_config(read_file(path)); }

std::string config_to_json(const NetworkSpec& spec) {
    ordered_json doc;
    doc["num_classes"] = spec.num_classes;
    doc["input"] = {spec.input[0], spec.input[1], spec.input[2]};
    std::vector<std::size_t> widths;
    for (const StageSpec& s : spec.stages) {
        if (s.block.kind == BlockKind::Downsample) widths.push_back(s.block.channels_out);
    }
    if (widths == kEsnetWidths) {
        doc["width_scale"] = 1.0;
    } else {
        doc["widths"] = widths;
    }
    ordered_json stages = ordered_json::array();
    for (const StageGroup& g : stages_to_groups(spec)) {
        ordered_json e;
        e["kind"] = block_kind_name(g.kind);
        e["count"] = g.count;
        if (g.kind == BlockKind::FCU) e["K"] = g.K;
        if (g.kind == BlockKind::PFCU) e["rates"] = g.rates;
        if (g.kind == BlockKind::NonBt1D && g.dilation != 1) e["dilation"] = g.dilation;
        stages.push_back(std::move(e));
    }
    doc["stages"] = std::move(stages);
    return doc.dump(2) + "\n";
}

}  // namespace esnet
