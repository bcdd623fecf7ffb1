#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "instructtime/common.hpp"
#include "instructtime/rng.hpp"

namespace instructtime::nn {

// Dense row-major tensor of Real. 1-D, 2-D and 3-D shapes are used; most of
// the code treats tensors as [rows, cols] matrices.
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(numel(shape), 0.0); }
    Tensor(std::vector<int> s, std::vector<Real> data) : shape(std::move(s)), v(std::move(data)) {
        assert(v.size() == numel(shape));
    }

    static size_t numel(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= static_cast<size_t>(d);
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor randn(std::vector<int> s, Rng& rng, Real stddev) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = rng.normal(0.0, stddev);
        return t;
    }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const {
        if (shape.size() < 2) return shape.size() == 1 ? shape[0] : 0;
        int c = 1;
        for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    Real& at(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
    Real at(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

    Real* row(int r) { return v.data() + static_cast<size_t>(r) * cols(); }
    const Real* row(int r) const { return v.data() + static_cast<size_t>(r) * cols(); }

    Real* data() { return v.data(); }
    const Real* data() const { return v.data(); }

    void fill(Real x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (Real x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    uint64_t content_hash() const {
        uint64_t h = fnv1a(shape.data(), shape.size() * sizeof(int));
        return fnv1a(v.data(), v.size() * sizeof(Real), h);
    }
};

// Trainable tensor with persistent gradient and Adam moments.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    Parameter() = default;
    Parameter(std::string n, Tensor init) : name(std::move(n)), value(std::move(init)) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { grad.fill(0.0); }
    size_t size() const { return value.size(); }
};

}  // namespace instructtime::nn
