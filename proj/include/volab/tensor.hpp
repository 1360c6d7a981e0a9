#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace volab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Storage precision for newly created tensors. Float32 rounds every stored
// value through float; Float64 keeps full doubles and is meant for gradient
// checking. The mode is thread-local.
enum class Precision { Float32, Float64 };

Precision precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

// Immutable dense N-d array. Copies share storage; every primitive returns a
// fresh tensor.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const double> data() const { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  std::uint64_t id() const { return impl_->id; }

  // Same values, new identity, no gradient tracking.
  Tensor detach() const;
  // Same values as a fresh leaf that requires grad.
  Tensor as_leaf() const;

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::uint64_t id = 0;
  };
  explicit Tensor(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(std::span<const double>,
                                                  std::span<const std::span<double>>)>);

  std::shared_ptr<const Impl> impl_;
};

// Per-input gradient accumulators handed to a backward closure. A span is
// empty when the corresponding input does not require grad.
using GradSinks = std::span<const std::span<double>>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSinks grad_in)>;

// Ordered record of primitive applications. Entries are appended in
// execution order, which is a topological order of the graph.
class Tape {
 public:
  struct Entry {
    std::uint64_t output_id;
    std::size_t output_size;
    std::vector<Tensor> inputs;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool records(std::uint64_t id) const;
  void clear();

  // The tape primitives record onto on this thread, or nullptr.
  static Tape* active();

  // Activates a tape for the current thread for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* saved_;
  };

 private:
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
  void record(Entry entry);

  std::vector<Entry> entries_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

// Gradients of a scalar output with respect to every leaf on the tape.
class Gradients {
 public:
  // Gradient for `leaf`; zeros of the leaf's shape if it did not contribute.
  Tensor of(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Tape& tape, const Tensor& output);
  std::unordered_map<std::uint64_t, std::pair<Shape, std::vector<double>>> grads_;
};

// Reverse sweep over the tape from a scalar output.
Gradients backward(const Tape& tape, const Tensor& output);

// Builds the result of a primitive: rounds to the storage precision, rejects
// non-finite values, and records the backward closure when a tape is active
// and any input requires grad.
Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      BackwardFn backward);

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates probed per input; 0 means all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  // Denominator floor; near-zero gradients are compared absolutely below it.
  double abs_floor = 1e-8;
};

// Max over probed coordinates of |analytic - numeric| /
// max(|analytic|, |numeric|, abs_floor), with central differences. Runs in
// Float64 mode.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, const GradCheckOptions& options = {});
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

}  // namespace volab
