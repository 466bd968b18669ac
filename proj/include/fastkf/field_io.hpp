#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "fast_filter.hpp"
#include "grid.hpp"

namespace fastkf {

static_assert(std::endian::native == std::endian::little,
              "field formats are little-endian; big-endian hosts are unsupported");

struct Field {
    int nx = 0;
    int ny = 0;
    Vector data;
};

namespace detail {

inline std::ofstream open_binary_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    return out;
}

inline std::ifstream open_binary_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    return in;
}

template <class T>
void write_pod(std::ofstream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error("truncated file: " + path.string());
    return value;
}

inline void write_doubles(std::ofstream& out, const double* data, std::size_t count) {
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(count * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, double* data, std::size_t count,
                         const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(data),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw std::runtime_error("truncated file: " + path.string());
}

}  // namespace detail

/// Binary field snapshot: magic "FKF1", uint32 nx, uint32 ny, then nx·ny
/// little-endian float64 values in row-major (x-major) order.
inline void write_field(const std::filesystem::path& path, int nx, int ny,
                        const Vector& data) {
    if (data.size() != static_cast<Index>(nx) * ny)
        throw std::invalid_argument("write_field: data length does not match " +
                                    std::to_string(nx) + "x" + std::to_string(ny));
    auto out = detail::open_binary_out(path);
    out.write("FKF1", 4);
    detail::write_pod(out, static_cast<std::uint32_t>(nx));
    detail::write_pod(out, static_cast<std::uint32_t>(ny));
    detail::write_doubles(out, data.data(), static_cast<std::size_t>(data.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Field read_field(const std::filesystem::path& path) {
    auto in = detail::open_binary_in(path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "FKF1", 4) != 0)
        throw std::runtime_error("not a FKF1 field file: " + path.string());
    Field f;
    f.nx = static_cast<int>(detail::read_pod<std::uint32_t>(in, path));
    f.ny = static_cast<int>(detail::read_pod<std::uint32_t>(in, path));
    if (f.nx < 1 || f.ny < 1 || static_cast<long long>(f.nx) * f.ny > (1LL << 31))
        throw std::runtime_error("implausible field dimensions in " + path.string());
    f.data.resize(static_cast<Index>(f.nx) * f.ny);
    detail::read_doubles(in, f.data.data(), static_cast<std::size_t>(f.data.size()), path);
    return f;
}

/// Low-rank state snapshot: magic "FKS1", uint32 n_s, uint32 r,
/// uint32 step, float64 alpha, then mean (n_s), D (r), and W (n_s·r,
/// column-major), all little-endian float64.
inline void write_state(const std::filesystem::path& path, const LowRankState& state) {
    auto out = detail::open_binary_out(path);
    out.write("FKS1", 4);
    detail::write_pod(out, static_cast<std::uint32_t>(state.mean.size()));
    detail::write_pod(out, static_cast<std::uint32_t>(state.rank()));
    detail::write_pod(out, static_cast<std::uint32_t>(state.step));
    detail::write_pod(out, state.alpha);
    detail::write_doubles(out, state.mean.data(), static_cast<std::size_t>(state.mean.size()));
    detail::write_doubles(out, state.d.data(), static_cast<std::size_t>(state.d.size()));
    detail::write_doubles(out, state.w.data(), static_cast<std::size_t>(state.w.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline LowRankState read_state(const std::filesystem::path& path) {
    auto in = detail::open_binary_in(path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "FKS1", 4) != 0)
        throw std::runtime_error("not a FKS1 state file: " + path.string());
    const auto n = static_cast<Index>(detail::read_pod<std::uint32_t>(in, path));
    const auto r = static_cast<Index>(detail::read_pod<std::uint32_t>(in, path));
    const auto step = detail::read_pod<std::uint32_t>(in, path);
    LowRankState state;
    state.step = static_cast<int>(step);
    state.alpha = detail::read_pod<double>(in, path);
    state.mean.resize(n);
    state.d.resize(r);
    state.w.resize(n, r);
    detail::read_doubles(in, state.mean.data(), static_cast<std::size_t>(n), path);
    detail::read_doubles(in, state.d.data(), static_cast<std::size_t>(r), path);
    detail::read_doubles(in, state.w.data(), static_cast<std::size_t>(n * r), path);
    return state;
}

}  // namespace fastkf
