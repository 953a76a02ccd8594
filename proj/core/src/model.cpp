#include "fedrbn/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedrbn/errors.hpp"
#include "fedrbn/rng.hpp"

namespace fedrbn {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

std::size_t layer_in(const Layer& layer) {
  return std::visit(overloaded{[](const LinearLayer& l) { return l.in; },
                               [](const ReluLayer& l) { return l.width; },
                               [](const DBNState& l) { return l.channels; }},
                    layer);
}

std::size_t layer_out(const Layer& layer) {
  return std::visit(overloaded{[](const LinearLayer& l) { return l.out; },
                               [](const ReluLayer& l) { return l.width; },
                               [](const DBNState& l) { return l.channels; }},
                    layer);
}

struct Trace {
  std::vector<Tensor> inputs;          // input of each layer
  std::vector<DbnCache> bn_caches;     // indexed by layer, unused slots empty
  std::vector<BatchMoments> moments;   // indexed by layer, training only
};

Tensor linear_forward(const LinearLayer& l, const Tensor& x) {
  const std::size_t batch = x.rows();
  Tensor y({batch, l.out});
  for (std::size_t r = 0; r < batch; ++r) {
    const auto xr = x.row(r);
    for (std::size_t o = 0; o < l.out; ++o) {
      const double* w = l.weight.data() + o * l.in;
      double acc = l.bias[o];
      for (std::size_t i = 0; i < l.in; ++i) acc += w[i] * xr[i];
      y(r, o) = acc;
    }
  }
  return y;
}

Tensor run_forward(const Model& model, const Tensor& x, BnPath path, bool training, Trace* trace) {
  if (x.empty()) throw ArgumentError("forward needs a non-empty batch");
  if (x.rank() != 2) throw DimensionError("forward expects a rank-2 batch");
  if (x.cols() != model.input_dim())
    throw DimensionError("input has " + std::to_string(x.cols()) + " features, model expects " +
                         std::to_string(model.input_dim()));
  if (trace) {
    trace->inputs.clear();
    trace->bn_caches.assign(model.layers.size(), {});
    trace->moments.assign(model.layers.size(), {});
  }
  Tensor h = x;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (trace) trace->inputs.push_back(h);
    const auto& layer = model.layers[i];
    if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      h = linear_forward(*lin, h);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      for (auto& v : h.data()) v = v > 0.0 ? v : 0.0;
    } else {
      const auto& bn = std::get<DBNState>(layer);
      h = dbn_apply(bn, h, path, training, trace ? &trace->bn_caches[i] : nullptr,
                    trace ? &trace->moments[i] : nullptr);
    }
  }
  return h;
}

void apply_stat_updates(Model& model, const Trace& trace) {
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (auto* bn = std::get_if<DBNState>(&model.layers[i])) dbn_update_running(*bn, model.bn_mode, trace.moments[i]);
}

Tensor run_backward(const Model& model, const Trace& trace, Tensor grad, Gradients& grads) {
  grads.layers.assign(model.layers.size(), std::monostate{});
  for (std::size_t idx = model.layers.size(); idx-- > 0;) {
    const auto& layer = model.layers[idx];
    const Tensor& input = trace.inputs[idx];
    const std::size_t batch = input.rows();
    if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      LinearGrad g{std::vector<double>(lin->weight.size(), 0.0), std::vector<double>(lin->out, 0.0)};
      Tensor dx({batch, lin->in});
      for (std::size_t r = 0; r < batch; ++r) {
        const auto xr = input.row(r);
        auto dxr = dx.row(r);
        for (std::size_t o = 0; o < lin->out; ++o) {
          const double go = grad(r, o);
          if (go == 0.0) continue;
          g.bias[o] += go;
          double* gw = g.weight.data() + o * lin->in;
          const double* w = lin->weight.data() + o * lin->in;
          for (std::size_t i = 0; i < lin->in; ++i) {
            gw[i] += go * xr[i];
            dxr[i] += go * w[i];
          }
        }
      }
      grads.layers[idx] = std::move(g);
      grad = std::move(dx);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      auto in = input.data();
      auto gd = grad.data();
      for (std::size_t k = 0; k < gd.size(); ++k)
        if (!(in[k] > 0.0)) gd[k] = 0.0;
    } else {
      AffineGrad g;
      grad = dbn_backward(std::get<DBNState>(layer), trace.bn_caches[idx], grad, g.weight, g.bias);
      grads.layers[idx] = std::move(g);
    }
  }
  return grad;
}

void check_one_hot(const Tensor& y, std::size_t batch, std::size_t classes) {
  if (y.rank() != 2 || y.rows() != batch || y.cols() != classes)
    throw DimensionError("label matrix must be batch x classes");
  for (std::size_t r = 0; r < batch; ++r) {
    int ones = 0;
    for (double v : y.row(r)) {
      if (v == 1.0)
        ++ones;
      else if (v != 0.0)
        throw ArgumentError("labels must be one-hot rows");
    }
    if (ones != 1) throw ArgumentError("labels must be one-hot rows");
  }
}

// Mean cross-entropy and dloss/dlogits = (softmax - y) / B.
double softmax_xent(const Tensor& logits, const Tensor& y, Tensor* dlogits) {
  const std::size_t batch = logits.rows(), classes = logits.cols();
  double total = 0.0;
  if (dlogits) *dlogits = Tensor({batch, classes});
  std::vector<double> p(classes);
  for (std::size_t r = 0; r < batch; ++r) {
    const auto z = logits.row(r);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += (p[c] = std::exp(z[c] - zmax));
    const double log_sum = std::log(sum) + zmax;
    for (std::size_t c = 0; c < classes; ++c) {
      if (y(r, c) == 1.0) total += log_sum - z[c];
      if (dlogits) (*dlogits)(r, c) = (p[c] / sum - y(r, c)) / static_cast<double>(batch);
    }
  }
  return total / static_cast<double>(batch);
}

LossGrad loss_grad_impl(const Model& model, const Tensor& x, const Tensor& y, BnPath path, bool training,
                        Trace& trace) {
  Tensor logits = run_forward(model, x, path, training, &trace);
  check_one_hot(y, logits.rows(), logits.cols());
  Tensor dlogits;
  LossGrad out;
  out.loss = softmax_xent(logits, y, &dlogits);
  out.input_grad = run_backward(model, trace, std::move(dlogits), out.grads);
  return out;
}

}  // namespace

LinearLayer::LinearLayer(std::size_t in_, std::size_t out_)
    : in(in_), out(out_), weight(in_ * out_, 0.0), bias(out_, 0.0) {
  if (in == 0 || out == 0) throw DimensionError("linear layer dimensions must be positive");
}

std::size_t Model::input_dim() const {
  if (layers.empty()) throw DimensionError("model has no layers");
  return layer_in(layers.front());
}

std::size_t Model::output_dim() const {
  if (layers.empty()) throw DimensionError("model has no layers");
  return layer_out(layers.back());
}

std::size_t Model::dbn_count() const {
  return static_cast<std::size_t>(
      std::count_if(layers.begin(), layers.end(), [](const Layer& l) { return std::holds_alternative<DBNState>(l); }));
}

void Model::validate() const {
  if (layers.empty()) throw DimensionError("model has no layers");
  for (std::size_t i = 0; i + 1 < layers.size(); ++i)
    if (layer_out(layers[i]) != layer_in(layers[i + 1]))
      throw DimensionError("layer " + std::to_string(i) + " output width does not match layer " +
                           std::to_string(i + 1) + " input width");
  for (const auto& l : layers) {
    if (const auto* lin = std::get_if<LinearLayer>(&l)) {
      if (lin->weight.size() != lin->in * lin->out || lin->bias.size() != lin->out)
        throw DimensionError("linear layer parameter sizes are inconsistent");
    } else if (const auto* bn = std::get_if<DBNState>(&l)) {
      bn->validate();
    }
  }
}

Model make_mlp(const MlpSpec& spec, std::uint64_t seed) {
  if (spec.input_dim == 0 || spec.classes == 0) throw DimensionError("MLP dimensions must be positive");
  Rng rng = make_rng(seed, {stream::init});
  Model model;
  auto add_linear = [&](std::size_t in, std::size_t out) {
    LinearLayer lin(in, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : lin.weight) w = dist(rng);
    model.layers.emplace_back(std::move(lin));
  };
  std::size_t width = spec.input_dim;
  for (auto h : spec.hidden) {
    add_linear(width, h);
    model.layers.emplace_back(DBNState(h));
    model.layers.emplace_back(ReluLayer{h});
    width = h;
  }
  add_linear(width, spec.classes);
  model.validate();
  return model;
}

Gradients Gradients::zeros_like(const Model& model) {
  Gradients g;
  for (const auto& layer : model.layers) {
    if (const auto* lin = std::get_if<LinearLayer>(&layer))
      g.layers.emplace_back(LinearGrad{std::vector<double>(lin->weight.size()), std::vector<double>(lin->out)});
    else if (const auto* bn = std::get_if<DBNState>(&layer))
      g.layers.emplace_back(AffineGrad{std::vector<double>(bn->channels), std::vector<double>(bn->channels)});
    else
      g.layers.emplace_back(std::monostate{});
  }
  return g;
}

Gradients& Gradients::scale(double factor) {
  for (auto& l : layers)
    std::visit(overloaded{[](std::monostate) {},
                          [&](auto& g) {
                            for (auto& v : g.weight) v *= factor;
                            for (auto& v : g.bias) v *= factor;
                          }},
               l);
  return *this;
}

Gradients& Gradients::add_scaled(double factor, const Gradients& other) {
  if (other.layers.size() != layers.size()) throw DimensionError("gradient structures differ");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].index() != other.layers[i].index()) throw DimensionError("gradient structures differ");
    std::visit(overloaded{[](std::monostate) {},
                          [&](auto& g) {
                            const auto& o = std::get<std::decay_t<decltype(g)>>(other.layers[i]);
                            if (o.weight.size() != g.weight.size() || o.bias.size() != g.bias.size())
                              throw DimensionError("gradient structures differ");
                            for (std::size_t k = 0; k < g.weight.size(); ++k) g.weight[k] += factor * o.weight[k];
                            for (std::size_t k = 0; k < g.bias.size(); ++k) g.bias[k] += factor * o.bias[k];
                          }},
               layers[i]);
  }
  return *this;
}

std::vector<double> Gradients::flatten() const {
  std::vector<double> out;
  for (const auto& l : layers)
    std::visit(overloaded{[](std::monostate) {},
                          [&](const auto& g) {
                            out.insert(out.end(), g.weight.begin(), g.weight.end());
                            out.insert(out.end(), g.bias.begin(), g.bias.end());
                          }},
               l);
  return out;
}

Tensor forward(Model& model, const Tensor& x) {
  if (!model.training) return run_forward(model, x, model.bn_mode, false, nullptr);
  Trace trace;
  Tensor logits = run_forward(model, x, model.bn_mode, true, &trace);
  apply_stat_updates(model, trace);
  return logits;
}

Tensor eval_logits(const Model& model, const Tensor& x, BnPath path) {
  if (model.training) throw ContractError("eval_logits called on a model in training mode");
  return run_forward(model, x, path, false, nullptr);
}

LossGrad loss_and_grad(Model& model, const Tensor& x, const Tensor& one_hot) {
  Trace trace;
  LossGrad out = loss_grad_impl(model, x, one_hot, model.bn_mode, model.training, trace);
  if (model.training) apply_stat_updates(model, trace);
  return out;
}

LossGrad loss_and_grad_eval(const Model& model, const Tensor& x, const Tensor& one_hot) {
  if (model.training) throw ContractError("loss_and_grad_eval requires an eval-mode model");
  Trace trace;
  return loss_grad_impl(model, x, one_hot, model.bn_mode, false, trace);
}

void sgd_step(Model& model, const Gradients& grads, double lr) {
  if (!(lr >= 0.0)) throw ArgumentError("learning rate must be non-negative");
  if (grads.layers.size() != model.layers.size()) throw DimensionError("gradients do not match model");
  if (lr == 0.0) return;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& layer = model.layers[i];
    if (auto* lin = std::get_if<LinearLayer>(&layer)) {
      const auto* g = std::get_if<LinearGrad>(&grads.layers[i]);
      if (!g || g->weight.size() != lin->weight.size() || g->bias.size() != lin->bias.size())
        throw DimensionError("gradients do not match linear layer " + std::to_string(i));
      for (std::size_t k = 0; k < lin->weight.size(); ++k) lin->weight[k] -= lr * g->weight[k];
      for (std::size_t k = 0; k < lin->bias.size(); ++k) lin->bias[k] -= lr * g->bias[k];
    } else if (auto* bn = std::get_if<DBNState>(&layer)) {
      const auto* g = std::get_if<AffineGrad>(&grads.layers[i]);
      if (!g || g->weight.size() != bn->channels || g->bias.size() != bn->channels)
        throw DimensionError("gradients do not match dual BN layer " + std::to_string(i));
      for (std::size_t k = 0; k < bn->channels; ++k) {
        bn->weight[k] -= lr * g->weight[k];
        bn->bias[k] -= lr * g->bias[k];
      }
    }
  }
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  if (labels.empty()) throw ArgumentError("one_hot needs at least one label");
  Tensor y({labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= classes) throw ArgumentError("label out of range");
    y(r, labels[r]) = 1.0;
  }
  return y;
}

double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  return softmax_xent(logits, one_hot(labels, logits.cols()), nullptr);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto z = logits.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

std::vector<ParamRef> param_refs(Model& model) {
  std::vector<ParamRef> refs;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& layer = model.layers[i];
    if (auto* lin = std::get_if<LinearLayer>(&layer)) {
      refs.push_back({ParamKind::linear_weight, i, lin->weight});
      refs.push_back({ParamKind::linear_bias, i, lin->bias});
    } else if (auto* bn = std::get_if<DBNState>(&layer)) {
      refs.push_back({ParamKind::bn_weight, i, bn->weight});
      refs.push_back({ParamKind::bn_bias, i, bn->bias});
      refs.push_back({ParamKind::bn_mean, i, bn->mean});
      refs.push_back({ParamKind::bn_var, i, bn->var});
      refs.push_back({ParamKind::bn_noise_mean, i, bn->noise_mean});
      refs.push_back({ParamKind::bn_noise_var, i, bn->noise_var});
    }
  }
  return refs;
}

std::vector<ConstParamRef> param_refs(const Model& model) {
  std::vector<ConstParamRef> out;
  for (auto& r : param_refs(const_cast<Model&>(model))) out.push_back({r.kind, r.layer, r.values});
  return out;
}

}  // namespace fedrbn
