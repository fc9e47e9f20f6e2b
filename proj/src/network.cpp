#include "convshard/network.hpp"

#include <charconv>
#include <sstream>

#include "convshard/conv.hpp"
#include "convshard/rng.hpp"
#include "convshard/timer.hpp"

namespace convshard {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = s.find(sep, start);
    if (end == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

std::size_t parse_count(std::string_view s) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("expected a non-negative integer, got '" + std::string(s) + "'");
  return v;
}

double parse_real(std::string_view s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(s), &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + std::string(s) + "'");
  }
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::vector<Shape4> NetworkSpec::shapes(std::size_t batch) const {
  if (batch == 0) throw DimensionError("batch must be >= 1");
  Shape4 cur{batch, inChannels, inHeight, inWidth};
  if (!cur.all_positive()) throw DimensionError("network input " + cur.to_string() + " is empty");
  if (layers.size() < 2) throw ConfigError("network needs at least FullyConnected + SoftmaxLoss");

  std::vector<Shape4> out;
  out.reserve(layers.size() + 1);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back(cur);
    const bool last = i + 1 == layers.size();
    const bool beforeLast = i + 2 == layers.size();
    std::visit(
        Overloaded{
            [&](const ConvLayer& l) {
              if (l.numK == 0 || l.kH == 0 || l.kW == 0)
                throw ConfigError("conv layer " + std::to_string(i) + " has an empty kernel bank");
              if (cur.d2 < l.kH || cur.d3 < l.kW)
                throw DimensionError("conv layer " + std::to_string(i) + " kernel " +
                                     std::to_string(l.kH) + "x" + std::to_string(l.kW) +
                                     " larger than input " + cur.to_string());
              cur = {cur.d0, l.numK, cur.d2 - l.kH + 1, cur.d3 - l.kW + 1};
            },
            [&](const NormLayer& l) { l.params.validate(); },
            [&](const PoolLayer& l) {
              if (l.window != l.stride || l.stride == 0)
                throw ConfigError("pool layer " + std::to_string(i) + " needs window == stride");
              if (cur.d2 % l.stride != 0 || cur.d3 % l.stride != 0)
                throw DimensionError("pool layer " + std::to_string(i) + " input " +
                                     cur.to_string() + " not divisible by stride " +
                                     std::to_string(l.stride));
              cur = {cur.d0, cur.d1, cur.d2 / l.stride, cur.d3 / l.stride};
            },
            [&](const FullyConnectedLayer& l) {
              if (!beforeLast)
                throw ConfigError("fully connected layer must come right before the loss layer");
              if (l.outUnits == 0) throw ConfigError("fully connected layer has no outputs");
              cur = {cur.d0, l.outUnits, 1, 1};
            },
            [&](const SoftmaxLossLayer& l) {
              if (!last) throw ConfigError("softmax loss must be the last layer");
              if (!std::holds_alternative<FullyConnectedLayer>(layers[i - 1]))
                throw ConfigError("softmax loss must follow a fully connected layer");
              if (l.classes != cur.d1)
                throw DimensionError("softmax loss expects " + std::to_string(l.classes) +
                                     " classes but receives " + std::to_string(cur.d1));
            },
        },
        layers[i]);
  }
  out.push_back(cur);
  return out;
}

std::vector<std::size_t> NetworkSpec::conv_layers() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (std::holds_alternative<ConvLayer>(layers[i])) idx.push_back(i);
  return idx;
}

std::string NetworkSpec::to_string() const {
  std::ostringstream os;
  os << "in:" << inChannels << ':' << inHeight << ':' << inWidth;
  for (const auto& layer : layers) {
    os << ';';
    std::visit(Overloaded{
                   [&](const ConvLayer& l) { os << "conv:" << l.numK << ':' << l.kH << ':' << l.kW; },
                   [&](const NormLayer& l) {
                     os << "norm:" << l.params.depth << ':' << format_real(l.params.alpha) << ':'
                        << format_real(l.params.beta) << ':' << format_real(l.params.bias);
                   },
                   [&](const PoolLayer& l) { os << "pool:" << l.window << ':' << l.stride; },
                   [&](const FullyConnectedLayer& l) { os << "fc:" << l.outUnits; },
                   [&](const SoftmaxLossLayer& l) { os << "softmax:" << l.classes; },
               },
               layer);
  }
  return os.str();
}

NetworkSpec NetworkSpec::parse(std::string_view text) {
  NetworkSpec spec;
  spec.layers.clear();
  const auto items = split(text, ';');
  if (items.empty()) throw ConfigError("empty network description");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto f = split(items[i], ':');
    const auto need = [&](std::size_t n) {
      if (f.size() != n)
        throw ConfigError("malformed network entry '" + std::string(items[i]) + "'");
    };
    if (i == 0) {
      if (f[0] != "in") throw ConfigError("network description must start with 'in:'");
      need(4);
      spec.inChannels = parse_count(f[1]);
      spec.inHeight = parse_count(f[2]);
      spec.inWidth = parse_count(f[3]);
    } else if (f[0] == "conv") {
      need(4);
      spec.layers.push_back(ConvLayer{parse_count(f[1]), parse_count(f[2]), parse_count(f[3])});
    } else if (f[0] == "norm") {
      need(5);
      spec.layers.push_back(
          NormLayer{{parse_count(f[1]), parse_real(f[2]), parse_real(f[3]), parse_real(f[4])}});
    } else if (f[0] == "pool") {
      need(3);
      spec.layers.push_back(PoolLayer{parse_count(f[1]), parse_count(f[2])});
    } else if (f[0] == "fc") {
      need(2);
      spec.layers.push_back(FullyConnectedLayer{parse_count(f[1])});
    } else if (f[0] == "softmax") {
      need(2);
      spec.layers.push_back(SoftmaxLossLayer{parse_count(f[1])});
    } else {
      throw ConfigError("unknown layer kind '" + std::string(f[0]) + "'");
    }
  }
  spec.validate();
  return spec;
}

NetworkSpec reference_network(std::size_t conv1Kernels, std::size_t conv2Kernels) {
  NetworkSpec spec;
  spec.layers = {ConvLayer{conv1Kernels, 5, 5}, NormLayer{}, PoolLayer{2, 2},
                 ConvLayer{conv2Kernels, 5, 5}, NormLayer{}, PoolLayer{2, 2},
                 FullyConnectedLayer{10},       SoftmaxLossLayer{10}};
  spec.validate();
  return spec;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"50:500", "150:800", "300:1000", "500:1500"};
  return names;
}

NetworkSpec preset_network(std::string_view name) {
  for (const auto& n : preset_names()) {
    if (n != name) continue;
    const auto parts = split(name, ':');
    return reference_network(parse_count(parts[0]), parse_count(parts[1]));
  }
  throw ConfigError("unknown preset '" + std::string(name) +
                    "' (expected 50:500, 150:800, 300:1000 or 500:1500)");
}

Parameters init_parameters(const NetworkSpec& spec, std::uint64_t seed, double sigma) {
  const auto shapes = spec.shapes(1);
  Rng rng(seed);
  Parameters p;
  p.layers.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (const auto* conv = std::get_if<ConvLayer>(&spec.layers[i])) {
      KernelBank k(conv->numK, shapes[i].d1, conv->kH, conv->kW);
      for (auto& v : k.values()) v = rng.normal(0.0, sigma);
      p.layers[i] = std::move(k);
    } else if (const auto* fc = std::get_if<FullyConnectedLayer>(&spec.layers[i])) {
      const auto in = static_cast<Eigen::Index>(shapes[i].d1 * shapes[i].d2 * shapes[i].d3);
      DenseParams d{Matrix<double>(static_cast<Eigen::Index>(fc->outUnits), in),
                    Vector<double>::Zero(static_cast<Eigen::Index>(fc->outUnits))};
      // Row-major draw order so the stream does not depend on Eigen's storage order.
      for (Eigen::Index r = 0; r < d.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < d.weights.cols(); ++c) d.weights(r, c) = rng.normal(0.0, sigma);
      p.layers[i] = std::move(d);
    }
  }
  return p;
}

Tensor4 LocalConvExecutor::forward(std::size_t, const Tensor4& input, const KernelBank& kernels) {
  Stopwatch sw;
  auto out = conv2d_forward(input, kernels);
  convSeconds_ += sw.seconds();
  return out;
}

KernelBank LocalConvExecutor::backward_kernels(std::size_t, const Tensor4& input,
                                               const KernelBank& kernels, const Tensor4& gradOut) {
  Stopwatch sw;
  auto out = conv2d_backward_kernels(input, kernels, gradOut);
  convSeconds_ += sw.seconds();
  return out;
}

Tensor4 LocalConvExecutor::backward_data(std::size_t, const KernelBank& kernels,
                                         const Tensor4& gradOut) {
  Stopwatch sw;
  auto out = conv2d_backward_data(kernels, gradOut);
  convSeconds_ += sw.seconds();
  return out;
}

ForwardPass forward_pass(const NetworkSpec& spec, const Parameters& params, const Tensor4& images,
                         ConvExecutor& exec) {
  Stopwatch seg;
  const auto shapes = spec.shapes(images.n());
  if (images.shape() != shapes[0])
    throw DimensionError("images " + images.shape().to_string() + " do not match network input " +
                         shapes[0].to_string());
  ForwardPass fwd;
  fwd.poolIndices.resize(spec.layers.size());
  Tensor4 cur = images;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    if (std::holds_alternative<SoftmaxLossLayer>(layer)) break;
    fwd.inputs.push_back(cur);
    if (std::holds_alternative<ConvLayer>(layer)) {
      fwd.compSeconds += seg.seconds();
      Tensor4 out = exec.forward(i, cur, params.kernels(i));
      seg.restart();
      cur = std::move(out);
    } else if (const auto* norm = std::get_if<NormLayer>(&layer)) {
      cur = lrn_forward(cur, norm->params);
    } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
      auto r = maxpool_forward(cur, pool->window, pool->stride);
      cur = std::move(r.output);
      fwd.poolIndices[i] = std::move(r.indices);
    } else if (std::holds_alternative<FullyConnectedLayer>(layer)) {
      const auto& d = params.dense(i);
      fwd.logits = fc_forward(cur, d.weights, d.bias);
    }
  }
  fwd.compSeconds += seg.seconds();
  return fwd;
}

LossAndGradients backward_pass(const NetworkSpec& spec, const Parameters& params,
                               const ForwardPass& fwd, std::span<const int> labels,
                               ConvExecutor& exec, bool wantInputGradient) {
  Stopwatch seg;
  LossAndGradients r;
  r.grads.params.layers.resize(spec.layers.size());
  const auto loss = softmax_loss(fwd.logits, labels);
  r.loss = loss.loss;

  const std::size_t fcIndex = spec.layers.size() - 2;
  const auto& d = params.dense(fcIndex);
  auto fcg = fc_backward(fwd.inputs[fcIndex], d.weights, loss.gradLogits);
  r.grads.params.layers[fcIndex] = DenseParams{std::move(fcg.weights), std::move(fcg.bias)};
  Tensor4 grad = std::move(fcg.input);

  for (std::size_t i = fcIndex; i-- > 0;) {
    const auto& layer = spec.layers[i];
    const bool needInput = i > 0 || wantInputGradient;
    if (std::holds_alternative<ConvLayer>(layer)) {
      const auto& k = params.kernels(i);
      r.compSeconds += seg.seconds();
      KernelBank gk = exec.backward_kernels(i, fwd.inputs[i], k, grad);
      Tensor4 next = needInput ? exec.backward_data(i, k, grad) : Tensor4{};
      seg.restart();
      grad = std::move(next);
      r.grads.params.layers[i] = std::move(gk);
    } else if (const auto* norm = std::get_if<NormLayer>(&layer)) {
      grad = lrn_backward(fwd.inputs[i], grad, norm->params);
    } else if (std::holds_alternative<PoolLayer>(layer)) {
      grad = maxpool_backward(grad, fwd.poolIndices[i]);
    }
    if (!needInput) break;
  }
  if (wantInputGradient) r.grads.input = std::move(grad);
  else grad = Tensor4{};
  r.compSeconds += seg.seconds();
  return r;
}

void apply_sgd(Parameters& params, const Parameters& grads, double lr) {
  if (params.layers.size() != grads.layers.size())
    throw DimensionError("gradient bundle has " + std::to_string(grads.layers.size()) +
                         " layers, parameters have " + std::to_string(params.layers.size()));
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (auto* k = std::get_if<KernelBank>(&params.layers[i])) {
      sgd_step(*k, std::get<KernelBank>(grads.layers[i]), lr);
    } else if (auto* dp = std::get_if<DenseParams>(&params.layers[i])) {
      const auto& g = std::get<DenseParams>(grads.layers[i]);
      sgd_step(dp->weights, g.weights, lr);
      sgd_step(dp->bias, g.bias, lr);
    }
  }
}

std::size_t count_correct(const Matrix<double>& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return correct;
}

StepResult train_step(const NetworkSpec& spec, Parameters& params, const Tensor4& images,
                      std::span<const int> labels, double lr, ConvExecutor& exec) {
  Stopwatch total;
  exec.reset_timing();
  const auto fwd = forward_pass(spec, params, images, exec);
  auto lg = backward_pass(spec, params, fwd, labels, exec);
  Stopwatch tail;
  apply_sgd(params, lg.grads.params, lr);
  StepResult r;
  r.loss = lg.loss;
  r.correct = count_correct(fwd.logits, labels);
  r.timing.compS = fwd.compSeconds + lg.compSeconds + tail.seconds();
  r.timing.convS = exec.conv_seconds();
  r.timing.commS = exec.comm_seconds();
  r.timing.totalS = total.seconds();
  return r;
}

}  // namespace convshard
