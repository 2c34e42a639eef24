#pragma once

// Dense float64 tensors and a reverse-mode tape.
//
// A Tape owns every intermediate produced during one forward pass. Nodes are
// appended in evaluation order, so node ids are a topological order and
// backward is a single reverse sweep. Model parameters live outside the tape
// in Parameter objects; Tape::param binds one as a leaf and its gradient is
// read back with Tape::param_grad after backward.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace conslide {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d);
  explicit Tensor(Shape s);  // zero-filled

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Tensor&) const = default;
};

/// Throws NumericalError naming `where` if any value is NaN or Inf.
void require_finite(std::span<const double> values, const char* where);

enum class ParamGroup : std::uint8_t { kPatch, kInteraction, kRegion, kHead, kProjector };

const char* to_string(ParamGroup group);

/// Bitmask over ParamGroup values.
class GroupMask {
 public:
  constexpr GroupMask() = default;
  constexpr GroupMask(std::initializer_list<ParamGroup> groups) {
    for (auto g : groups) bits_ |= bit(g);
  }
  static constexpr GroupMask all() {
    GroupMask m;
    m.bits_ = 0x1f;
    return m;
  }
  constexpr bool contains(ParamGroup g) const { return (bits_ & bit(g)) != 0; }

 private:
  static constexpr std::uint8_t bit(ParamGroup g) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(g));
  }
  std::uint8_t bits_ = 0;
};

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kHead;
  Tensor value;
  std::vector<double> grad;  // same length as value.data

  Parameter(std::string n, ParamGroup g, Tensor v);
  void zero_grad();
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& tensor() const;
  const Shape& shape() const { return tensor().shape; }
  std::span<const double> value() const;
  /// Gradient from the most recent backward (empty if none reached this node).
  std::span<const double> grad() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const { return tensor().numel(); }
  bool requires_grad() const;
  /// Value of a single-element tensor.
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates gradient from node `self` to its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    const char* op = "leaf";
    /// Branch taken by a piecewise op (ReLU sign, max argmax) per element.
    std::vector<std::uint32_t> branch;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Free leaf whose gradient accumulates across backward calls.
  Var leaf(Tensor value);
  /// Binds `p` as a leaf; repeated calls return the same node.
  Var param(const Parameter& p);
  /// Same values as `v` with no path back to it.
  Var detach(Var v);

  /// Reverse sweep from a single-element `loss`. Gradients on intermediate and
  /// parameter nodes are recomputed on each call; leaf() gradients accumulate.
  void backward(Var loss);

  /// Gradient of the loss from the last backward w.r.t. `p`, if `p` is on this
  /// tape and was reached.
  std::optional<std::span<const double>> param_grad(const Parameter& p) const;

  /// Adds scale * param_grad into p.grad for every bound parameter whose group
  /// is in `mask`.
  void accumulate_param_grads(std::span<Parameter* const> params, GroupMask mask,
                              double scale) const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  /// Concatenated branch patterns of every piecewise op, in tape order. Two
  /// evaluations with equal signatures lie on the same linear piece.
  std::vector<std::uint32_t> branch_signature() const;

  // Used by op implementations.
  void set_branch(std::size_t id, std::vector<std::uint32_t> pattern) { nodes_.at(id).branch = std::move(pattern); }
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  /// Gradient buffer of node `id`, zero-initialized on first access.
  std::vector<double>& grad_buffer(std::size_t id);
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_ids_;
};

/// Ordered, address-stable collection of parameters owned by one component.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter& add(std::string name, ParamGroup group, Tensor value);
  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  std::size_t scalar_count() const;
  void zero_grad();
  std::vector<Parameter*> pointers();
  std::vector<const Parameter*> pointers() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
};

}  // namespace conslide
