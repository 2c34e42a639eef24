#include "conslide/tensor.hpp"

#include <cmath>
#include <sstream>

#include "conslide/errors.hpp"

namespace conslide {

const char* to_string(FormatErrorCode code) {
  switch (code) {
    case FormatErrorCode::kIo: return "io error";
    case FormatErrorCode::kBadMagic: return "bad magic";
    case FormatErrorCode::kUnsupportedVersion: return "unsupported version";
    case FormatErrorCode::kTruncated: return "truncated";
    case FormatErrorCode::kChecksumMismatch: return "checksum mismatch";
    case FormatErrorCode::kInvalidContent: return "invalid content";
  }
  return "format error";
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (conslide::numel(shape) != data.size())
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(conslide::numel(shape), 0.0) {}

void require_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value in ") + where);
  }
}

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::kPatch: return "pt";
    case ParamGroup::kInteraction: return "hi";
    case ParamGroup::kRegion: return "rt";
    case ParamGroup::kHead: return "head";
    case ParamGroup::kProjector: return "projector";
  }
  return "?";
}

Parameter::Parameter(std::string n, ParamGroup g, Tensor v)
    : name(std::move(n)), group(g), value(std::move(v)), grad(value.numel(), 0.0) {}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

// --- Var -------------------------------------------------------------------

const Tensor& Var::tensor() const { return tape_->value_of(id_); }

std::span<const double> Var::value() const { return tensor().data; }

std::span<const double> Var::grad() const { return tape_->node(id_).grad; }

bool Var::requires_grad() const { return tape_->needs_grad(id_); }

double Var::item() const {
  const auto& t = tensor();
  if (t.numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(t.shape));
  return t.data[0];
}

// --- Tape ------------------------------------------------------------------

Var Tape::constant(Tensor value) {
  require_finite(value.data, "constant");
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  require_finite(value.data, "leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
  require_finite(p.value.data, p.name.c_str());
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  n.op = "param";
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  param_ids_.emplace(&p, id);
  return {this, id};
}

Var Tape::detach(Var v) {
  Node n;
  n.value = v.tensor();
  n.op = "detach";
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs,
                 BackwardFn backward) {
  require_finite(value.data, op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

std::vector<std::uint32_t> Tape::branch_signature() const {
  std::vector<std::uint32_t> out;
  for (const auto& n : nodes_) out.insert(out.end(), n.branch.begin(), n.branch.end());
  return out;
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw StateError("backward: loss belongs to a different tape");
  const auto& root = nodes_[loss.id()];
  if (root.value.numel() != 1)
    throw DimensionError("backward requires a scalar loss, got shape " +
                         shape_string(root.value.shape));
  // Leaf gradients accumulate; everything else is recomputed.
  for (auto& n : nodes_) {
    const bool free_leaf = n.requires_grad && !n.backward && n.param == nullptr;
    if (!free_leaf) n.grad.clear();
  }
  if (!root.requires_grad) return;
  grad_buffer(loss.id())[0] += 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

std::optional<std::span<const double>> Tape::param_grad(const Parameter& p) const {
  auto it = param_ids_.find(&p);
  if (it == param_ids_.end()) return std::nullopt;
  const auto& g = nodes_[it->second].grad;
  if (g.empty()) return std::nullopt;
  return std::span<const double>(g);
}

void Tape::accumulate_param_grads(std::span<Parameter* const> params, GroupMask mask,
                                  double scale) const {
  for (Parameter* p : params) {
    if (!mask.contains(p->group)) continue;
    auto g = param_grad(*p);
    if (!g) continue;
    for (std::size_t i = 0; i < g->size(); ++i) p->grad[i] += scale * (*g)[i];
  }
}

// --- ParameterSet ----------------------------------------------------------

Parameter& ParameterSet::add(std::string name, ParamGroup group, Tensor value) {
  if (find(name)) throw ConfigError("duplicate parameter name " + name);
  params_.emplace_back(std::move(name), group, std::move(value));
  return params_.back();
}

Parameter* ParameterSet::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<Parameter*> ParameterSet::pointers() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterSet::pointers() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

}  // namespace conslide
