#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "asw/ops.hpp"
#include "asw/rng.hpp"

namespace asw {

struct NamedParam {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline std::size_t param_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

inline void zero_grads(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv layers.
inline Tensor uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

struct Conv2d {
    Tensor weight;
    Tensor bias;
    std::size_t stride = 1;
    std::size_t pad = 0;

    static Conv2d make(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng, bool with_bias = true,
                       std::size_t stride = 1) {
        Conv2d c;
        const std::size_t fan_in = cin * k * k;
        c.weight = uniform_param({cout, cin, k, k}, fan_in, rng);
        if (with_bias) c.bias = uniform_param({cout}, fan_in, rng);
        c.stride = stride;
        c.pad = k / 2;
        return c;
    }

    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t out_channels() const { return weight.dim(0); }
    std::size_t kernel() const { return weight.dim(2); }
    bool has_bias() const { return bias.defined(); }

    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".weight", weight});
        if (bias.defined()) out.push_back({prefix + ".bias", bias});
    }
};

struct DepthwiseConv2d {
    Tensor weight;  // [C,1,k,k]

    static DepthwiseConv2d make(std::size_t channels, std::size_t k, Rng& rng) {
        return {uniform_param({channels, 1, k, k}, k * k, rng)};
    }

    std::size_t channels() const { return weight.dim(0); }
    std::size_t kernel() const { return weight.dim(2); }

    Tensor operator()(const Tensor& x) const { return dwconv2d(x, weight, kernel() / 2); }

    void collect(const std::string& prefix, ParamList& out) const { out.push_back({prefix + ".weight", weight}); }
};

}  // namespace asw
