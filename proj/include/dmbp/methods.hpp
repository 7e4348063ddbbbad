#pragma once

#include <string>
#include <vector>

#include "dmbp/baselines.hpp"
#include "dmbp/dmbp.hpp"

namespace dmbp {

enum class Method { dmbp, grad, ig, sg };

inline const char* to_string(Method m)
{
    switch (m) {
    case Method::dmbp: return "dmbp";
    case Method::grad: return "grad";
    case Method::ig: return "ig";
    case Method::sg: return "sg";
    }
    return "?";
}

inline Method parse_method(const std::string& s)
{
    if (s == "dmbp") return Method::dmbp;
    if (s == "grad") return Method::grad;
    if (s == "ig") return Method::ig;
    if (s == "sg") return Method::sg;
    throw ArgumentError("unknown method '" + s + "' (expected dmbp, grad, ig or sg)");
}

struct MethodConfig {
    DmbpConfig dmbp;
    BaselineConfig baseline;
};

struct MethodOutput {
    AttributionMap map;
    std::vector<LossRecord> loss_trace; // dmbp only
};

template <typename T>
MethodOutput compute_attribution(const NetworkDef<T>& net, const Tensor<T>& x, std::size_t target, Method method,
                                 const MethodConfig& cfg = {}, std::ostream* log = nullptr)
{
    MethodOutput out;
    switch (method) {
    case Method::grad:
        out.map = vanilla_attribution(net, x, target);
        break;
    case Method::ig:
        out.map = integrated_gradients(net, x, target, cfg.baseline);
        break;
    case Method::sg:
        out.map = smoothgrad(net, x, target, cfg.baseline);
        break;
    case Method::dmbp: {
        auto r = optimize(net, x, target, cfg.dmbp, log);
        out.map = attribution_map(x, r.decomposed).map;
        out.map.target = static_cast<int>(target);
        out.map.model_id = net.model_id;
        out.loss_trace = std::move(r.loss_trace);
        break;
    }
    }
    return out;
}

} // namespace dmbp
