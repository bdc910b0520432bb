#pragma once

#include <string>
#include <vector>

#include "ctrldiff/blas.hpp"
#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/registry.hpp"

namespace ctrldiff {

// Low-rank additive weight update dW = (alpha/r) * B * A per target parameter.
// B starts at zero so a fresh adapter is an exact identity at attach time.
// Targets must have at least two axes; convolution kernels are treated as
// (out, in*kh*kw) matrices.
template <typename Real>
struct LoraAdapter {
    struct Entry {
        std::string target;
        Tensor<Real> A;  // (r, k)
        Tensor<Real> B;  // (d, r)
    };
    int rank = 1;
    Real alpha = Real(1);
    std::vector<Entry> entries;
};

template <typename Real>
LoraAdapter<Real> make_lora(const ParamRegistry<Real>& reg,
                            const std::vector<std::string>& target_patterns, int rank,
                            Real alpha, uint64_t seed) {
    check(rank >= 1, "lora rank must be >= 1");
    LoraAdapter<Real> ad;
    ad.rank = rank;
    ad.alpha = alpha;
    Rng rng(seed);
    for (const auto& p : reg.items()) {
        bool hit = false;
        for (const auto& pat : target_patterns) {
            if (glob_match(pat, p->name)) {
                hit = true;
                break;
            }
        }
        if (!hit) continue;
        check(p->value.ndim() >= 2, "shape-incompatible lora target " + p->name +
                                        " with shape " + p->value.shape_str());
        int64_t d = p->value.dim(0);
        int64_t k = p->value.numel() / d;
        typename LoraAdapter<Real>::Entry e;
        e.target = p->name;
        e.A = Tensor<Real>::randn({rank, k}, rng,
                                  static_cast<Real>(1.0 / std::sqrt(static_cast<double>(k))));
        e.B = Tensor<Real>::zeros({d, rank});
        ad.entries.push_back(std::move(e));
    }
    return ad;
}

// Attached state; detach() restores the saved bytes, so attach/detach is an
// exact involution on parameters.
template <typename Real>
class LoraHandle {
public:
    void detach() {
        for (auto& [p, saved] : saved_) p->value = saved;
        saved_.clear();
    }
    bool attached() const { return !saved_.empty(); }

private:
    template <typename R>
    friend LoraHandle<R> lora_attach(const LoraAdapter<R>& ad, ParamRegistry<R>& reg);
    std::vector<std::pair<ParamPtr<Real>, Tensor<Real>>> saved_;
};

template <typename Real>
LoraHandle<Real> lora_attach(const LoraAdapter<Real>& ad, ParamRegistry<Real>& reg) {
    LoraHandle<Real> handle;
    for (const auto& e : ad.entries) {
        ParamPtr<Real> p = reg.at(e.target);
        check(p->value.ndim() >= 2, "shape-incompatible lora target " + e.target);
        int64_t d = p->value.dim(0);
        int64_t k = p->value.numel() / d;
        check(e.B.ndim() == 2 && e.B.dim(0) == d && e.B.dim(1) == ad.rank &&
                  e.A.ndim() == 2 && e.A.dim(0) == ad.rank && e.A.dim(1) == k,
              "lora adapter shapes do not fit target " + e.target + " " + p->value.shape_str());
        handle.saved_.emplace_back(p, p->value);
        // W += (alpha/r) * B * A over the flattened (d, k) view
        Real scale = ad.alpha / static_cast<Real>(ad.rank);
        gemm(false, false, static_cast<int>(d), static_cast<int>(k), ad.rank, scale,
             e.B.data(), ad.rank, e.A.data(), static_cast<int>(k), Real(1), p->value.data(),
             static_cast<int>(k));
    }
    return handle;
}

template <typename Real>
void save_lora(const std::string& path, const LoraAdapter<Real>& ad) {
    Archive ar;
    std::vector<std::string> targets;
    for (const auto& e : ad.entries) targets.push_back(e.target);
    ar.meta = {{"kind", "lora"},
               {"format_version", 1},
               {"rank", ad.rank},
               {"alpha", static_cast<double>(ad.alpha)},
               {"targets", targets}};
    for (const auto& e : ad.entries) {
        ar.entries.push_back(entry_from_tensor("lora." + e.target + ".A", e.A));
        ar.entries.push_back(entry_from_tensor("lora." + e.target + ".B", e.B));
    }
    write_archive(path, ar);
}

template <typename Real>
LoraAdapter<Real> load_lora(const std::string& path) {
    Archive ar = read_archive(path);
    check(ar.meta.value("kind", "") == "lora", path + " is not a lora adapter archive");
    LoraAdapter<Real> ad;
    ad.rank = ar.meta.at("rank").get<int>();
    ad.alpha = static_cast<Real>(ar.meta.at("alpha").get<double>());
    for (const auto& t : ar.meta.at("targets")) {
        std::string name = t.get<std::string>();
        const ArchiveEntry* a = ar.find("lora." + name + ".A");
        const ArchiveEntry* b = ar.find("lora." + name + ".B");
        check(a && b, "lora archive missing tensors for target " + name);
        typename LoraAdapter<Real>::Entry e;
        e.target = name;
        e.A = tensor_from_entry<Real>(*a);
        e.B = tensor_from_entry<Real>(*b);
        ad.entries.push_back(std::move(e));
    }
    return ad;
}

}  // namespace ctrldiff
