#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace milab {

// Tensor workloads churn through multi-megabyte buffers; glibc's default
// mmap threshold hands each of them back to the kernel on free, so page
// faults dominate. Keep large blocks on the heap instead.
#if defined(__GLIBC__)
namespace detail {
inline const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
}();
}  // namespace detail
#endif

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor of 64-bit floats. Value type: copies copy the data.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {
        check_shape();
    }

    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        check_shape();
        if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
            throw std::runtime_error("Tensor: data size " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(shape));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    double item() const {
        if (data.size() != 1) {
            throw std::runtime_error("Tensor::item: tensor has " + std::to_string(data.size()) +
                                     " elements, expected 1");
        }
        return data[0];
    }

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    Tensor& set_requires_grad(bool flag) {
        requires_grad = flag;
        return *this;
    }

  private:
    void check_shape() const {
        for (int d : shape) {
            if (d <= 0) {
                throw std::runtime_error("Tensor: nonpositive extent in shape " + shape_str(shape));
            }
        }
    }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

// ---------------------------------------------------------------------------
// Counter-based splittable PRNG. Each stream is a (key, counter) pair fed
// through the splitmix64 finalizer; splitting derives an independent key, so
// per-stage and per-worker streams never share state.
// ---------------------------------------------------------------------------

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}
}  // namespace detail

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : key_(detail::splitmix64(seed ^ 0xA02BDBF7BB3C0A7ULL)) {}

    /// Independent stream derived from this one; does not advance this stream.
    Rng split(std::uint64_t stream) const {
        Rng r(0);
        r.key_ = detail::splitmix64(key_ ^ detail::splitmix64(stream + 0x1F123BB5159A55E5ULL));
        r.counter_ = 0;
        return r;
    }

    std::uint64_t next_u64() { return detail::splitmix64(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; consumes exactly two raw draws.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        u1 = std::max(u1, 0x1.0p-60);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    Tensor normal_tensor(const Shape& shape, double mean = 0.0, double stddev = 1.0) {
        Tensor t(shape);
        for (auto& v : t.data) v = normal(mean, stddev);
        return t;
    }

    Tensor uniform_tensor(const Shape& shape, double lo, double hi) {
        Tensor t(shape);
        for (auto& v : t.data) v = uniform(lo, hi);
        return t;
    }

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<std::int64_t> permutation(std::int64_t n) {
        std::vector<std::int64_t> p(static_cast<std::size_t>(n));
        std::iota(p.begin(), p.end(), 0);
        for (std::int64_t i = n - 1; i > 0; --i) {
            std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(uniform_int(i + 1))]);
        }
        return p;
    }

  private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Worker pool configuration. Parallel loops use static disjoint partitions so
// results are bitwise identical for any worker count.
// ---------------------------------------------------------------------------

inline std::atomic<int>& worker_count_storage() {
    static std::atomic<int> n{1};
    return n;
}

inline void set_worker_count(int n) { worker_count_storage().store(n < 1 ? 1 : n); }

inline int worker_count() { return worker_count_storage().load(); }

inline int default_worker_count() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
}

/// Runs fn(begin, end) over disjoint chunks of [0, n). Each index is touched by
/// exactly one worker, so any write pattern with per-index outputs is
/// deterministic regardless of worker count.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    int workers = worker_count();
    if (workers <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    std::int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    for (std::int64_t start = 0; start < n; start += chunk) {
        std::int64_t stop = std::min(n, start + chunk);
        threads.emplace_back([&fn, start, stop] { fn(start, stop); });
    }
    for (auto& t : threads) t.join();
}

}  // namespace milab
