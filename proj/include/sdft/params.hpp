#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "sdft/tensor.hpp"

namespace sdft {

/// Which learning-rate group a tensor belongs to.
enum class ParamGroup : std::uint8_t { encoder = 0, head = 1 };

inline const char* to_string(ParamGroup g) { return g == ParamGroup::head ? "head" : "encoder"; }

template <typename Real>
struct Parameter {
    Tensor<Real> value;
    ParamGroup group = ParamGroup::encoder;
    bool decay = false;  // receives decoupled weight decay

    friend bool operator==(const Parameter&, const Parameter&) = default;
};

template <typename Real>
Tensor<Real>& tensor_ref(Parameter<Real>& p) {
    return p.value;
}

/// Named flat collection of model tensors. Ordered by name so iteration,
/// serialization and averaging are deterministic.
template <typename Real>
class ParameterSet {
   public:
    using Map = std::map<std::string, Parameter<Real>>;
    using real_type = Real;

    void add(std::string name, Tensor<Real> value, ParamGroup group, bool decay) {
        auto [it, inserted] = entries_.emplace(std::move(name), Parameter<Real>{std::move(value), group, decay});
        if (!inserted) throw ContractError("duplicate parameter name '" + it->first + "'");
    }

    const Parameter<Real>& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("no parameter named '" + name + "'");
        return it->second;
    }
    Parameter<Real>& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("no parameter named '" + name + "'");
        return it->second;
    }
    const Tensor<Real>& tensor(const std::string& name) const { return at(name).value; }
    Tensor<Real>& tensor(const std::string& name) { return at(name).value; }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : entries_) n += p.value.size();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    /// Same names and shapes.
    bool compatible(const ParameterSet& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (auto a = entries_.begin(), b = o.entries_.begin(); a != entries_.end(); ++a, ++b) {
            if (a->first != b->first || a->second.value.shape() != b->second.value.shape()) return false;
        }
        return true;
    }

    void require_compatible(const ParameterSet& o, const char* what) const {
        if (!compatible(o)) throw ShapeError(std::string(what) + ": parameter sets differ in names or shapes");
    }

    /// this += alpha * o
    void axpy(Real alpha, const ParameterSet& o) {
        require_compatible(o, "axpy");
        auto b = o.entries_.begin();
        for (auto& [_, p] : entries_) sdft::axpy(alpha, (b++)->second.value, p.value);
    }

    void scale(Real alpha) {
        for (auto& [_, p] : entries_) scale_inplace(p.value, alpha);
    }

    void fill(Real v) {
        for (auto& [_, p] : entries_) p.value.fill(v);
    }

    ParameterSet zeros_like() const {
        ParameterSet out = *this;
        out.fill(Real(0));
        return out;
    }

    friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

   private:
    Map entries_;
};

template <typename Real>
Real max_abs_diff(const ParameterSet<Real>& a, const ParameterSet<Real>& b) {
    a.require_compatible(b, "max_abs_diff");
    Real m = 0;
    auto ib = b.begin();
    for (const auto& [_, p] : a) m = std::max(m, max_abs_diff(p.value, (ib++)->second.value));
    return m;
}

// ----------------------------- checkpoint format -----------------------------
//
// Little-endian binary:
//   magic "SDFTCKPT" | u32 version (1) | u8 real width (4 or 8) | u64 count
//   count x { u32 name_len | name bytes | u8 group | u8 decay | u32 rank |
//             rank x u64 dims | prod(dims) x IEEE-754 values }

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated checkpoint: " + path);
    return v;
}

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'F', 'T', 'C', 'K', 'P', 'T'};

}  // namespace detail

template <typename Real>
void write_checkpoint(std::ostream& os, const ParameterSet<Real>& params) {
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, 1);
    detail::write_pod<std::uint8_t>(os, sizeof(Real));
    detail::write_pod<std::uint64_t>(os, params.size());
    for (const auto& [name, p] : params) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p.group));
        detail::write_pod<std::uint8_t>(os, p.decay ? 1 : 0);
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
        for (auto d : p.value.shape()) detail::write_pod<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(Real)));
    }
}

template <typename Real>
ParameterSet<Real> read_checkpoint(std::istream& is, const std::string& path = "<stream>") {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
        throw IoError("not a checkpoint file: " + path);
    }
    if (auto v = detail::read_pod<std::uint32_t>(is, path); v != 1) {
        throw IoError("unsupported checkpoint version " + std::to_string(v) + ": " + path);
    }
    if (auto w = detail::read_pod<std::uint8_t>(is, path); w != sizeof(Real)) {
        throw IoError("checkpoint stores " + std::to_string(8 * w) + "-bit values, expected " +
                      std::to_string(8 * sizeof(Real)) + ": " + path);
    }
    const auto count = detail::read_pod<std::uint64_t>(is, path);
    ParameterSet<Real> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = detail::read_pod<std::uint32_t>(is, path);
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError("truncated checkpoint: " + path);
        const auto group = detail::read_pod<std::uint8_t>(is, path);
        const auto decay = detail::read_pod<std::uint8_t>(is, path);
        const auto rank = detail::read_pod<std::uint32_t>(is, path);
        Shape shape(rank);
        for (auto& d : shape) d = detail::read_pod<std::uint64_t>(is, path);
        Tensor<Real> t(shape);
        if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Real)))) {
            throw IoError("truncated checkpoint: " + path);
        }
        out.add(std::move(name), std::move(t), group ? ParamGroup::head : ParamGroup::encoder, decay != 0);
    }
    return out;
}

template <typename Real>
void save_checkpoint(const std::string& path, const ParameterSet<Real>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_checkpoint(os, params);
    if (!os) throw IoError("write failed: " + path);
}

template <typename Real>
ParameterSet<Real> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    return read_checkpoint<Real>(is, path);
}

}  // namespace sdft
