#pragma once

#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctrldiff/common.hpp"
#include "ctrldiff/tensor.hpp"

namespace ctrldiff {

// A named model parameter. Gradients accumulate here during backprop, so a
// parameter can appear at several graph sites and sum naturally.
template <typename Real>
struct Parameter {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;
    bool trainable = true;

    void zero_grad() { grad.fill(Real(0)); }
};

template <typename Real>
using ParamPtr = std::shared_ptr<Parameter<Real>>;

// Flat, ordered, name-addressable catalog of parameters. Ordering follows
// creation order, which is fixed for a given config, so checkpoints and
// initialization are stable across runs.
template <typename Real>
class ParamRegistry {
public:
    ParamPtr<Real> add(const std::string& name, Tensor<Real> value) {
        check(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
        auto p = std::make_shared<Parameter<Real>>();
        p->name = name;
        p->grad = Tensor<Real>::zeros(value.shape());
        p->value = std::move(value);
        index_[name] = items_.size();
        items_.push_back(p);
        return p;
    }

    const std::vector<ParamPtr<Real>>& items() const { return items_; }

    ParamPtr<Real> find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : items_[it->second];
    }

    ParamPtr<Real> at(const std::string& name) const {
        auto p = find(name);
        check(p != nullptr, "no such parameter: " + name);
        return p;
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& p : items_) n += p->value.numel();
        return n;
    }

    int64_t count_matching(const std::set<std::string>& names) const {
        int64_t n = 0;
        for (const auto& p : items_) {
            if (names.count(p->name)) n += p->value.numel();
        }
        return n;
    }

    void set_all_trainable(bool t) {
        for (auto& p : items_) p->trainable = t;
    }

    void zero_grads() {
        for (auto& p : items_) p->zero_grad();
    }

private:
    std::vector<ParamPtr<Real>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Glob over parameter names: '*' matches any run (including '.'), '?' one char.
inline bool glob_match(const std::string& pattern, const std::string& name) {
    size_t p = 0, n = 0, star = std::string::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
            ++p;
            ++n;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

}  // namespace ctrldiff
