#pragma once

#include <cmath>
#include <map>
#include <string>

#include "gazedetr/rng.hpp"
#include "gazedetr/tensor.hpp"

namespace gazedetr {

// Named parameter store. Ordered by name so checkpoint layout, optimizer
// iteration, and parameter-count accounting are deterministic.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t) {
    check(params_.find(name) == params_.end(), "duplicate parameter name: " + name);
    t.set_requires_grad(true);
    params_.emplace(name, t);
    return t;
  }

  // Xavier-uniform matrix [in x out].
  Tensor xavier(const std::string& name, int in, int out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (in + out));
    std::vector<double> v(static_cast<std::size_t>(in) * out);
    for (double& x : v) x = rng.uniform(-limit, limit);
    return add(name, Tensor::from_values({in, out}, std::move(v)));
  }

  // Xavier-uniform conv kernel bank [cout x cin x kh x kw].
  Tensor xavier_conv(const std::string& name, int cout, int cin, int kh, int kw, Rng& rng) {
    const double fan_in = static_cast<double>(cin) * kh * kw;
    const double fan_out = static_cast<double>(cout) * kh * kw;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> v(static_cast<std::size_t>(cout) * cin * kh * kw);
    for (double& x : v) x = rng.uniform(-limit, limit);
    return add(name, Tensor::from_values({cout, cin, kh, kw}, std::move(v)));
  }

  Tensor zeros(const std::string& name, Shape shape) {
    return add(name, Tensor::zeros(std::move(shape)));
  }

  Tensor ones(const std::string& name, Shape shape) {
    return add(name, Tensor::full(std::move(shape), 1.0));
  }

  // Unit-normal embedding (query slots).
  Tensor normal(const std::string& name, Shape shape, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.gaussian();
    return add(name, Tensor::from_values(std::move(shape), std::move(v)));
  }

  const std::map<std::string, Tensor>& params() const { return params_; }

  Tensor get(const std::string& name) const {
    auto it = params_.find(name);
    check(it != params_.end(), "unknown parameter: " + name);
    return it->second;
  }

  std::size_t count_with_prefix(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_)
      if (name.rfind(prefix, 0) == 0) n += t.size();
    return n;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

 private:
  std::map<std::string, Tensor> params_;
};

}  // namespace gazedetr
