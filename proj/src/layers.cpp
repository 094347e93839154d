#include "aop/layers.hpp"

#include <cmath>
#include <sstream>

namespace aop {

const char* param_kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::Weight:
      return "weight";
    case ParamKind::Buffer:
      return "buffer";
    case ParamKind::State:
      return "state";
  }
  return "?";
}

template <typename T>
std::string ParamStore<T>::qualified(const std::string& local_name) const {
  std::string out;
  for (const auto& s : scopes_) {
    out += s;
    out += '.';
  }
  return out + local_name;
}

template <typename T>
Tensor<T> ParamStore<T>::add(const std::string& local_name, Tensor<T> value, ParamKind kind) {
  const std::string name = qualified(local_name);
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(kind == ParamKind::Weight);
  entries_.push_back({name, kind, value});
  return value;
}

template <typename T>
Tensor<T> ParamStore<T>::add_uniform(const std::string& local_name, Shape shape, double bound) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng_.uniform(-bound, bound));
  return add(local_name, Tensor<T>::from_data(std::move(shape), std::move(data)), ParamKind::Weight);
}

template <typename T>
bool ParamStore<T>::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

template <typename T>
Tensor<T> ParamStore<T>::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw ContractError("no parameter named '" + name + "'");
}

template <typename T>
std::vector<Tensor<T>> ParamStore<T>::weights() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_)
    if (e.kind == ParamKind::Weight) out.push_back(e.tensor);
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

template <typename T>
std::size_t ParamStore<T>::weight_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.kind == ParamKind::Weight) n += e.tensor.numel();
  return n;
}

template <typename T>
std::string ParamStore<T>::manifest(bool include_state) const {
  std::ostringstream os;
  for (const auto& e : entries_) {
    if (e.kind == ParamKind::State && !include_state) continue;
    os << e.name << ' ' << param_kind_name(e.kind) << ' ';
    const auto& s = e.tensor.shape();
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << '\n';
  }
  return os.str();
}

template <typename Src, typename Dst>
void copy_params(const ParamStore<Src>& src, ParamStore<Dst>& dst) {
  for (const auto& e : src.entries()) {
    if (!dst.contains(e.name)) throw ContractError("copy_params: '" + e.name + "' missing in destination");
    Tensor<Dst> d = dst.get(e.name);
    if (d.shape() != e.tensor.shape()) throw ContractError("copy_params: shape mismatch for '" + e.name + "'");
    auto out = d.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Dst>(e.tensor[i]);
  }
}

namespace {
double fan_in_bound(int fan_in) { return std::sqrt(3.0 / static_cast<double>(fan_in)); }
}  // namespace

template <typename T>
Linear<T>::Linear(ParamStore<T>& ps, const std::string& name, int in, int out, bool with_bias, double init_scale) {
  typename ParamStore<T>::Scope scope(ps, name);
  weight = ps.add_uniform("weight", {in, out}, init_scale * fan_in_bound(in));
  if (with_bias) bias = ps.add("bias", Tensor<T>::zeros({out}));
}

template <typename T>
Conv2d<T>::Conv2d(ParamStore<T>& ps, const std::string& name, int in, int out, int kernel, int stride_,
                  bool with_bias, double init_scale)
    : stride(stride_), padding(kernel / 2) {
  typename ParamStore<T>::Scope scope(ps, name);
  weight = ps.add_uniform("weight", {out, in, kernel, kernel}, init_scale * fan_in_bound(in * kernel * kernel));
  if (with_bias) bias = ps.add("bias", Tensor<T>::zeros({out}));
}

template <typename T>
DepthwiseConv2d<T>::DepthwiseConv2d(ParamStore<T>& ps, const std::string& name, int channels, int kernel,
                                    double init_scale) {
  typename ParamStore<T>::Scope scope(ps, name);
  weight = ps.add_uniform("weight", {channels, 1, kernel, kernel}, init_scale * fan_in_bound(kernel * kernel));
  bias = ps.add("bias", Tensor<T>::zeros({channels}));
}

template <typename T>
Conv3d<T>::Conv3d(ParamStore<T>& ps, const std::string& name, int in, int out, std::array<int, 3> stride_,
                  bool with_bias)
    : stride(stride_) {
  typename ParamStore<T>::Scope scope(ps, name);
  weight = ps.add_uniform("weight", {out, in, 3, 3, 3}, fan_in_bound(in * 27));
  if (with_bias) bias = ps.add("bias", Tensor<T>::zeros({out}));
}

template <typename T>
BatchNorm<T>::BatchNorm(ParamStore<T>& ps, const std::string& name, int channels) {
  typename ParamStore<T>::Scope scope(ps, name);
  gamma = ps.add("gamma", Tensor<T>::full({channels}, T(1)));
  beta = ps.add("beta", Tensor<T>::zeros({channels}));
  running_mean = ps.add("running_mean", Tensor<T>::zeros({channels}), ParamKind::Buffer);
  running_var = ps.add("running_var", Tensor<T>::full({channels}, T(1)), ParamKind::Buffer);
}

template <typename T>
Tensor<T> BatchNorm<T>::operator()(const Tensor<T>& x, bool training, const ops::Mask* mask) {
  ops::BatchNormOptions opt;
  opt.training = training;
  opt.mask = mask;
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, opt);
}

template <typename T>
Tensor<T> BatchNorm<T>::rows(const Tensor<T>& x, bool training) {
  ops::BatchNormOptions opt;
  opt.training = training;
  return ops::batch_norm_rows(x, gamma, beta, running_mean, running_var, opt);
}

template <typename T>
ConvBlock2d<T>::ConvBlock2d(ParamStore<T>& ps, const std::string& name, int in, int out, int stride) {
  typename ParamStore<T>::Scope scope(ps, name);
  conv = Conv2d<T>(ps, "conv", in, out, 3, stride, false);
  bn = BatchNorm<T>(ps, "bn", out);
}

template <typename T>
Tensor<T> ConvBlock2d<T>::operator()(const Tensor<T>& x, bool training) {
  return ops::relu(bn(conv(x), training));
}

template class ParamStore<float>;
template class ParamStore<double>;
template void copy_params(const ParamStore<float>&, ParamStore<double>&);
template void copy_params(const ParamStore<double>&, ParamStore<float>&);
template void copy_params(const ParamStore<float>&, ParamStore<float>&);
template void copy_params(const ParamStore<double>&, ParamStore<double>&);
template struct Linear<float>;
template struct Linear<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct DepthwiseConv2d<float>;
template struct DepthwiseConv2d<double>;
template struct Conv3d<float>;
template struct Conv3d<double>;
template struct BatchNorm<float>;
template struct BatchNorm<double>;
template struct ConvBlock2d<float>;
template struct ConvBlock2d<double>;

}  // namespace aop
