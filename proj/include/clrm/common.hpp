#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iomanip>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace clrm {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes (config -> 2, numerical -> 3).
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "shape"; }
};

class NumericalError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "numerical"; }
};

// Re-throws the active exception with `context` prepended, keeping its kind.
[[noreturn]] inline void rethrow_with_context(const std::string& context) {
    try {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError(context + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError(context + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(context + ": " + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(context + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(context + ": " + e.what());
    }
}

#define CLRM_REQUIRE(cond, ErrType, msg)                                  \
    do {                                                                  \
        if (!(cond)) {                                                    \
            std::ostringstream clrm_require_os_;                          \
            clrm_require_os_ << msg;                                      \
            throw ErrType(clrm_require_os_.str());                        \
        }                                                                 \
    } while (0)

// ---------------------------------------------------------------------------
// Seeding. Every stochastic choice draws from an engine seeded by hashing the
// global seed with a path of stream ids, so results never depend on the order
// in which work items execute.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = splitmix64(seed);
    for (auto id : path) h = splitmix64(h ^ splitmix64(id + 0x632BE59BD9B4E019ULL));
    return h;
}

constexpr std::uint64_t tag(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    return Rng(stream_seed(seed, path));
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double std_normal(Rng& rng) {
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

// ---------------------------------------------------------------------------
// Deterministic parallel loop: each index writes only its own slot, and the
// exception from the lowest failing index wins.
// ---------------------------------------------------------------------------

inline std::atomic<int>& thread_limit_storage() {
    static std::atomic<int> n{1};
    return n;
}

inline void set_thread_limit(int n) { thread_limit_storage() = std::max(1, n); }
inline int thread_limit() { return thread_limit_storage().load(); }

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const auto workers = static_cast<std::size_t>(std::min<std::size_t>(thread_limit(), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Small text helpers shared by the CSV writers.
// ---------------------------------------------------------------------------

inline std::string fmt12(double v) {
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    for (auto& s : out) {
        auto b = s.find_first_not_of(' ');
        auto e = s.find_last_not_of(' ');
        s = (b == std::string::npos) ? std::string{} : s.substr(b, e - b + 1);
    }
    return out;
}

inline double parse_double(const std::string& s, const std::string& context) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw IoError("cannot parse number '" + s + "' in " + context);
    }
}

inline std::ifstream open_in(const std::filesystem::path& p, bool binary = false) {
    std::ifstream in(p, binary ? std::ios::binary : std::ios::in);
    CLRM_REQUIRE(in.good(), IoError, "cannot open " << p.string());
    return in;
}

inline std::ofstream open_out(const std::filesystem::path& p, bool binary = false) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, binary ? std::ios::binary : std::ios::out);
    CLRM_REQUIRE(out.good(), IoError, "cannot write " << p.string());
    return out;
}

// Linear-interpolation percentile (q in [0,1]) of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
    CLRM_REQUIRE(!v.empty(), ShapeError, "percentile of empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    const double w = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - w) + v[hi] * w;
}

// Little-endian binary primitives (the supported targets are little-endian).
template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    CLRM_REQUIRE(is.good(), IoError, "truncated binary file");
    return v;
}

}  // namespace clrm
