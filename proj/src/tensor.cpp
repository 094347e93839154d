#include "aop/tensor.hpp"

#include <sstream>

namespace aop {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e < 0 ? 0 : e);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) throw ContractError("recording onto a tape that already ran backward; reset() it first");
  nodes_.push_back(std::move(backward_fn));
}

template <typename T>
void Tape::backward(const Tensor<T>& loss) {
  if (consumed_) throw ContractError("backward() called twice without reset()");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  consumed_ = true;
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

template void Tape::backward<float>(const Tensor<float>&);
template void Tape::backward<double>(const Tensor<double>&);

}  // namespace aop
