#include "volab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "volab/error.hpp"
#include "volab/rng.hpp"

namespace volab {
namespace {

thread_local Precision g_precision = Precision::Float32;
thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_id{1};

void round_to_precision(std::vector<double>& data) {
  if (g_precision == Precision::Float32) {
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Precision precision() { return g_precision; }

PrecisionScope::PrecisionScope(Precision p) : saved_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved_; }

Tensor::Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  round_to_precision(data);
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->id = g_next_id.fetch_add(1);
  impl_ = std::move(impl);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }
Tensor Tensor::as_leaf() const { return Tensor(impl_->shape, impl_->data, true); }

bool Tape::records(std::uint64_t id) const { return index_.count(id) != 0; }

void Tape::clear() {
  entries_.clear();
  index_.clear();
}

void Tape::record(Entry entry) {
  index_.emplace(entry.output_id, entries_.size());
  entries_.push_back(std::move(entry));
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : saved_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = saved_; }

Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      BackwardFn backward) {
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("primitive produced " + std::to_string(data.size()) +
                     " values for shape " + shape_str(shape));
  }
  round_to_precision(data);
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by primitive");
  }
  Tape* tape = g_active_tape;
  const bool track =
      tape != nullptr && std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
  auto impl = std::make_shared<Tensor::Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = track;
  impl->id = g_next_id.fetch_add(1);
  Tensor out(std::shared_ptr<const Tensor::Impl>(std::move(impl)));
  if (track) {
    tape->record(Tape::Entry{out.id(), out.numel(), std::move(inputs), std::move(backward)});
  }
  return out;
}

Tensor Gradients::of(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape());
  PrecisionScope keep(Precision::Float64);
  return Tensor(it->second.first, it->second.second);
}

Gradients backward(const Tape& tape, const Tensor& output) {
  if (output.numel() != 1 || output.rank() != 0) {
    throw ShapeError("backward requires a scalar output, got " + shape_str(output.shape()));
  }
  if (!output.requires_grad() || !tape.records(output.id())) {
    throw Error("backward: output is detached from the tape");
  }
  std::unordered_map<std::uint64_t, std::vector<double>> acc;
  std::unordered_map<std::uint64_t, Shape> leaf_shapes;
  std::unordered_set<std::uint64_t> produced;
  for (const auto& e : tape.entries()) produced.insert(e.output_id);

  acc[output.id()] = {1.0};
  const auto& entries = tape.entries();
  std::vector<std::span<double>> sinks;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    auto found = acc.find(it->output_id);
    if (found == acc.end()) continue;
    // Move out so later insertions into `acc` cannot invalidate the buffer.
    std::vector<double> grad_out = std::move(found->second);
    acc.erase(found);
    for (const Tensor& in : it->inputs) {
      if (!in.requires_grad()) continue;
      auto& buf = acc[in.id()];
      if (buf.empty()) buf.assign(in.numel(), 0.0);
      if (!produced.count(in.id())) leaf_shapes.emplace(in.id(), in.shape());
    }
    // Spans are taken after every buffer exists; a repeated input gets the
    // same span twice, which is what makes fan-out accumulate.
    sinks.clear();
    for (const Tensor& in : it->inputs) {
      if (!in.requires_grad()) {
        sinks.emplace_back();
      } else {
        sinks.emplace_back(acc[in.id()]);
      }
    }
    it->backward(grad_out, sinks);
  }

  Gradients result;
  for (auto& [id, shape] : leaf_shapes) {
    auto found = acc.find(id);
    if (found == acc.end()) continue;
    result.grads_.emplace(id, std::make_pair(shape, std::move(found->second)));
  }
  return result;
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw Error("grad_check: eps must be positive");
  PrecisionScope f64(Precision::Float64);

  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& x : inputs) leaves.push_back(x.as_leaf());

  Tape tape;
  Tensor out;
  {
    Tape::Scope scope(tape);
    out = f(leaves);
  }
  if (out.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  const Gradients grads = backward(tape, out);

  auto evaluate = [&](std::vector<Tensor>& probe) {
    const double v = f(probe).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  Rng rng(options.seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const Tensor analytic = grads.of(leaves[k]);
    std::vector<std::size_t> coords(leaves[k].numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords != 0 && coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    std::vector<Tensor> probe(leaves.begin(), leaves.end());
    for (std::size_t c : coords) {
      std::vector<double> values = leaves[k].values();
      const double x0 = values[c];
      values[c] = x0 + options.eps;
      probe[k] = Tensor(leaves[k].shape(), values);
      const double fp = evaluate(probe);
      values[c] = x0 - options.eps;
      probe[k] = Tensor(leaves[k].shape(), values);
      const double fm = evaluate(probe);
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double a = analytic[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    probe[k] = leaves[k];
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  GradCheckOptions options;
  options.eps = eps;
  return grad_check([&](const std::vector<Tensor>& in) { return f(in[0]); },
                    std::vector<Tensor>{x}, options);
}

}  // namespace volab
