#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "milab/serialize.hpp"
#include "milab/tensor.hpp"

namespace milab {

/// Labelled image collection; pixels normalized to [-1, 1] at ingestion so
/// the generator's tanh range and classifier inputs share one convention.
struct Dataset {
    Tensor images;               // [N, C, H, W]
    std::vector<int> labels;     // size N
    std::vector<int> class_set;  // sorted, unique

    int n() const { return images.shape.empty() ? 0 : images.shape[0]; }
    int channels() const { return images.shape[1]; }
    int height() const { return images.shape[2]; }
    int width() const { return images.shape[3]; }
    std::int64_t image_size() const {
        return static_cast<std::int64_t>(channels()) * height() * width();
    }

    Tensor image(int i) const {
        Tensor out({channels(), height(), width()});
        std::int64_t sz = image_size();
        for (std::int64_t j = 0; j < sz; ++j) out[j] = images[static_cast<std::int64_t>(i) * sz + j];
        return out;
    }

    /// Images for a list of indices as one [n, C, H, W] batch.
    Tensor batch(const std::vector<std::int64_t>& idx) const {
        Tensor out({static_cast<int>(idx.size()), channels(), height(), width()});
        std::int64_t sz = image_size();
        for (std::size_t k = 0; k < idx.size(); ++k) {
            for (std::int64_t j = 0; j < sz; ++j)
                out[static_cast<std::int64_t>(k) * sz + j] = images[idx[k] * sz + j];
        }
        return out;
    }

    std::vector<std::int64_t> indices_of_class(int cls) const {
        std::vector<std::int64_t> out;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) out.push_back(static_cast<std::int64_t>(i));
        return out;
    }

    void validate() const {
        if (images.shape.size() != 4) {
            throw std::runtime_error("Dataset: images must be [N,C,H,W], got " +
                                     shape_str(images.shape));
        }
        if (static_cast<int>(labels.size()) != n()) {
            throw std::runtime_error("Dataset: " + std::to_string(labels.size()) + " labels for " +
                                     std::to_string(n()) + " images");
        }
        std::set<int> cs(class_set.begin(), class_set.end());
        for (int l : labels) {
            if (!cs.count(l)) {
                throw std::runtime_error("Dataset: label " + std::to_string(l) +
                                         " not in class set");
            }
        }
        for (double v : images.data) {
            if (!(v >= -1.0 && v <= 1.0)) {
                throw std::runtime_error("Dataset: pixel value " + std::to_string(v) +
                                         " outside [-1,1]");
            }
        }
    }
};

struct SplitSpec {
    std::vector<int> private_classes;
    std::vector<int> public_classes;
};

struct SplitResult {
    Dataset private_set;             // labels re-indexed densely 0..K-1
    Dataset public_set;              // original labels retained
    std::map<int, int> index_map;    // original class id -> dense private label
};

namespace detail {

inline std::vector<int> sorted_unique(std::vector<int> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                               const std::string& path) {
    if (off + 4 > b.size()) {
        throw std::runtime_error("idx file truncated at byte offset " + std::to_string(off) + ": " +
                                 path);
    }
    return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
           (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

}  // namespace detail

/// Parses the IDX image/label pair (big-endian headers, ubyte payload) and
/// rescales pixels from [0,255] to [-1,1].
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
    auto img_bytes = read_file_bytes(images_path);
    auto lab_bytes = read_file_bytes(labels_path);

    std::uint32_t img_magic = detail::read_be32(img_bytes, 0, images_path.string());
    if (img_magic != 0x00000803u) {
        throw std::runtime_error("idx image file has wrong magic at byte offset 0 (got 0x" +
                                 hash_hex(img_magic).substr(8) + ", want 0x00000803): " +
                                 images_path.string());
    }
    std::uint32_t n = detail::read_be32(img_bytes, 4, images_path.string());
    std::uint32_t h = detail::read_be32(img_bytes, 8, images_path.string());
    std::uint32_t w = detail::read_be32(img_bytes, 12, images_path.string());
    std::size_t want = 16 + static_cast<std::size_t>(n) * h * w;
    if (img_bytes.size() < want) {
        throw std::runtime_error("idx image payload truncated at byte offset " +
                                 std::to_string(img_bytes.size()) + " (want " +
                                 std::to_string(want) + "): " + images_path.string());
    }

    std::uint32_t lab_magic = detail::read_be32(lab_bytes, 0, labels_path.string());
    if (lab_magic != 0x00000801u) {
        throw std::runtime_error("idx label file has wrong magic at byte offset 0 (got 0x" +
                                 hash_hex(lab_magic).substr(8) + ", want 0x00000801): " +
                                 labels_path.string());
    }
    std::uint32_t n_labels = detail::read_be32(lab_bytes, 4, labels_path.string());
    if (n_labels != n) {
        throw std::runtime_error("idx image/label count mismatch at byte offset 4: " +
                                 std::to_string(n) + " images vs " + std::to_string(n_labels) +
                                 " labels");
    }
    if (lab_bytes.size() < 8 + static_cast<std::size_t>(n_labels)) {
        throw std::runtime_error("idx label payload truncated at byte offset " +
                                 std::to_string(lab_bytes.size()) + ": " + labels_path.string());
    }

    Dataset ds;
    ds.images = Tensor({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)});
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * h * w; ++i) {
        ds.images[static_cast<std::int64_t>(i)] =
            static_cast<double>(img_bytes[16 + i]) / 255.0 * 2.0 - 1.0;
    }
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(lab_bytes[8 + i]);
    ds.class_set = detail::sorted_unique(ds.labels);
    return ds;
}

/// Class-disjoint split. Private labels are re-indexed densely (the target
/// model's output dimension equals the number of private classes); the public
/// side keeps its raw images and original labels.
inline SplitResult split_disjoint(const Dataset& ds, const SplitSpec& spec) {
    if (spec.private_classes.empty() || spec.public_classes.empty()) {
        throw std::runtime_error("split_disjoint: private and public class sets must be nonempty");
    }
    std::set<int> priv(spec.private_classes.begin(), spec.private_classes.end());
    std::set<int> pub(spec.public_classes.begin(), spec.public_classes.end());
    for (int c : priv) {
        if (pub.count(c)) {
            throw std::runtime_error("split_disjoint: class " + std::to_string(c) +
                                     " appears in both private and public sets");
        }
    }

    SplitResult out;
    int next = 0;
    for (int c : priv) out.index_map[c] = next++;

    std::vector<std::int64_t> priv_idx, pub_idx;
    for (std::size_t i = 0; i < ds.labels.size(); ++i) {
        if (priv.count(ds.labels[i])) priv_idx.push_back(static_cast<std::int64_t>(i));
        else if (pub.count(ds.labels[i])) pub_idx.push_back(static_cast<std::int64_t>(i));
    }
    if (priv_idx.empty()) throw std::runtime_error("split_disjoint: private split is empty");
    if (pub_idx.empty()) throw std::runtime_error("split_disjoint: public split is empty");

    out.private_set.images = ds.batch(priv_idx);
    for (std::int64_t i : priv_idx) out.private_set.labels.push_back(out.index_map.at(ds.labels[static_cast<std::size_t>(i)]));
    out.private_set.class_set.resize(static_cast<std::size_t>(next));
    for (int i = 0; i < next; ++i) out.private_set.class_set[static_cast<std::size_t>(i)] = i;

    out.public_set.images = ds.batch(pub_idx);
    for (std::int64_t i : pub_idx) out.public_set.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    out.public_set.class_set = detail::sorted_unique(out.public_set.labels);
    return out;
}

/// Seeded Gaussian-blob classes at class-specific positions with per-sample
/// jitter; linearly separable by a small CNN, used by the fast tests.
inline Dataset synth_blobs(int n_classes, int n_per_class, int image_size, std::uint64_t seed) {
    if (n_classes < 1 || n_per_class < 1 || image_size < 4) {
        throw std::runtime_error("synth_blobs: all counts must be positive (image_size >= 4)");
    }
    Rng rng(seed);
    Dataset ds;
    ds.images = Tensor({n_classes * n_per_class, 1, image_size, image_size});
    double radius = image_size * 0.28;
    double sigma = image_size / 7.0;
    std::int64_t px = static_cast<std::int64_t>(image_size) * image_size;
    for (int c = 0; c < n_classes; ++c) {
        double ang = 6.283185307179586 * c / n_classes;
        double cy0 = image_size / 2.0 + radius * std::sin(ang);
        double cx0 = image_size / 2.0 + radius * std::cos(ang);
        for (int s = 0; s < n_per_class; ++s) {
            double cy = cy0 + rng.normal(0.0, 0.8);
            double cx = cx0 + rng.normal(0.0, 0.8);
            std::int64_t base = (static_cast<std::int64_t>(c) * n_per_class + s) * px;
            for (int y = 0; y < image_size; ++y) {
                for (int x = 0; x < image_size; ++x) {
                    double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    double v = std::exp(-d2 / (2.0 * sigma * sigma));
                    v += rng.normal(0.0, 0.02);
                    v = std::clamp(v, 0.0, 1.0);
                    ds.images[base + y * image_size + x] = v * 2.0 - 1.0;
                }
            }
            ds.labels.push_back(c);
        }
    }
    for (int c = 0; c < n_classes; ++c) ds.class_set.push_back(c);
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset cache: flat binary of f64 pixels plus a JSON sidecar carrying shape,
// labels, class set, normalization tag and the payload hash.
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::filesystem::path& bin_path) {
    auto bytes = doubles_to_bytes(ds.images.data);
    write_file_atomic(bin_path, bytes);
    nlohmann::json side;
    side["shape"] = ds.images.shape;
    side["labels"] = ds.labels;
    side["class_set"] = ds.class_set;
    side["normalization"] = "pm1";
    side["content_hash"] = hash_hex(fnv1a64(bytes));
    write_file_atomic(bin_path.string() + ".json", side.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& bin_path) {
    auto bytes = read_file_bytes(bin_path);
    auto side = nlohmann::json::parse(read_file_bytes(bin_path.string() + ".json"));
    std::string want = side.at("content_hash").get<std::string>();
    std::string got = hash_hex(fnv1a64(bytes));
    if (want != got) {
        throw std::runtime_error("dataset cache hash mismatch for " + bin_path.string() + ": " +
                                 got + " vs recorded " + want);
    }
    Dataset ds;
    Shape shape = side.at("shape").get<Shape>();
    ds.images = Tensor(shape, doubles_from_bytes(bytes));
    ds.labels = side.at("labels").get<std::vector<int>>();
    ds.class_set = side.at("class_set").get<std::vector<int>>();
    ds.validate();
    return ds;
}

}  // namespace milab
