#include "ebt/model/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ebt/errors.hpp"

namespace ebt {

namespace {

constexpr const char* kMagic = "EBTCKPT";

std::string shape_text(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out.empty() ? "scalar" : out;
}

Shape parse_shape(const std::string& text) {
    if (text == "scalar") return {};
    Shape s;
    std::stringstream in(text);
    for (std::string part; std::getline(in, part, 'x');) s.push_back(ini::parse_int("shape", part));
    return s;
}

template <class U>
void put_le(std::string& out, U bits) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::string& kind, ini::Document header,
                      const std::vector<Parameter>& params) {
    const bool f32 = precision() == Precision::F32;
    ini::Document doc;
    auto& meta = doc.section("checkpoint");
    meta.set("version", "1");
    meta.set("dtype", f32 ? "f32" : "f64");
    meta.set("kind", kind);
    for (auto& s : header.sections) doc.sections.push_back(std::move(s));
    auto& tensors = doc.section("tensors");
    std::string payload;
    for (const auto& p : params) {
        tensors.set(p.name, shape_text(p.slot->shape()) + " @ " + std::to_string(payload.size()));
        for (double v : p.slot->data()) {
            if (f32) put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            else put_le(payload, std::bit_cast<std::uint64_t>(v));
        }
    }
    const auto text = ini::serialize(doc);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
    out << kMagic << ' ' << text.size() << '\n' << text;
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw ConfigError("failed writing checkpoint '" + path + "'");
}

CheckpointFile read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
    std::string magic;
    std::size_t header_size = 0;
    in >> magic >> header_size;
    if (magic != kMagic || in.get() != '\n') throw ConfigError("'" + path + "' is not a checkpoint");
    std::string text(header_size, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_size));
    if (!in) throw ConfigError("checkpoint header of '" + path + "' is truncated");

    CheckpointFile f;
    f.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    f.header = ini::parse(text);
    const auto* meta = f.header.find("checkpoint");
    if (!meta || !f.header.find("tensors")) throw ConfigError("checkpoint header is missing sections");
    const auto dtype = meta->get("dtype").value_or("");
    if (dtype != "f32" && dtype != "f64") throw ConfigError("unsupported checkpoint dtype '" + dtype + "'");
    f.width = dtype == "f32" ? 4 : 8;
    f.kind = meta->get("kind").value_or("ebt");
    return f;
}

void CheckpointFile::restore(const std::vector<Parameter>& params) const {
    const auto* tensors = header.find("tensors");
    for (const auto& p : params) {
        const auto entry = tensors->get(p.name);
        if (!entry) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
        const auto at = entry->find(" @ ");
        if (at == std::string::npos) throw ConfigError("malformed tensor entry for '" + p.name + "'");
        const auto shape = parse_shape(entry->substr(0, at));
        const auto offset = static_cast<std::size_t>(ini::parse_int(p.name, entry->substr(at + 3)));
        if (shape != p.slot->shape()) {
            throw ConfigError("parameter '" + p.name + "' has shape " + shape_str(shape) + ", model expects " +
                              shape_str(p.slot->shape()));
        }
        const auto n = static_cast<std::size_t>(numel(shape));
        if (offset + n * width > payload.size()) throw ConfigError("checkpoint truncated at '" + p.name + "'");
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            const char* src = payload.data() + offset + i * width;
            values[i] = width == 4 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(src)))
                                   : std::bit_cast<double>(get_le<std::uint64_t>(src));
        }
        *p.slot = Tensor::from_data(shape, std::move(values), p.slot->requires_grad());
    }
}

}  // namespace ebt
