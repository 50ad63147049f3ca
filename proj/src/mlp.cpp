#include "cbsde/mlp.hpp"

#include "cbsde/errors.hpp"

#include <cmath>
#include <cstdlib>
#include <malloc.h>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace cbsde {

namespace {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr const char* kCheckpointMagic = "cbsde-mlp";
constexpr int kCheckpointVersion = 2;

// Batch temporaries are a few hundred kB; above glibc's default mmap threshold every
// one of them is mapped and faulted in afresh, which costs more than the arithmetic.
[[maybe_unused]] const bool kHeapTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();

void apply_activation(Activation a, const MatrixXd& pre, MatrixXd& out, MatrixXd& slope) {
    switch (a) {
    case Activation::relu:
        out = pre.array().max(0.0).matrix();
        slope = (pre.array() > 0.0).cast<double>().matrix();
        break;
    case Activation::tanh:
        // Eigen's double tanh is not vectorized; exp is.
        out = (1.0 - 2.0 / ((2.0 * pre.array()).exp() + 1.0)).matrix();
        slope = (1.0 - out.array().square()).matrix();
        break;
    case Activation::elu:
        out = (pre.array() > 0.0).select(pre.array(), pre.array().exp() - 1.0).matrix();
        slope = (pre.array() > 0.0).select(ArrayXXd::Ones(pre.rows(), pre.cols()), out.array() + 1.0).matrix();
        break;
    }
}

// ρ''(a) expressed through the pre-activation and ρ(a).
ArrayXXd activation_curvature(Activation a, const MatrixXd& pre, const MatrixXd& out) {
    switch (a) {
    case Activation::relu:
        return ArrayXXd::Zero(pre.rows(), pre.cols());
    case Activation::tanh:
        return -2.0 * out.array() * (1.0 - out.array().square());
    case Activation::elu:
        return (pre.array() > 0.0).select(ArrayXXd::Zero(pre.rows(), pre.cols()), out.array() + 1.0);
    }
    return {};
}

// Forward pass record used by the reverse sweep.
struct Tape {
    std::vector<MatrixXd> pre;                     // a_l, hidden layers
    std::vector<MatrixXd> post;                    // h_0 = x, h_{l+1} = ρ(a_l)
    std::vector<MatrixXd> slope;                   // ρ'(a_l)
    std::vector<std::vector<MatrixXd>> tan_pre;    // ȧ_l^j
    std::vector<std::vector<MatrixXd>> tan_post;   // ḣ_{l+1}^j (ḣ_0^j = e_j is implicit)
};

NetOutputs run_forward(const Mlp& net, const MatrixXd& x, bool with_jacobian, Tape* tape) {
    const int n_layers = net.num_affine_layers();
    const int d = net.input_dim();
    const Eigen::Index n = x.cols();

    const VectorXd& scale = net.input_scale();
    MatrixXd h = (x.colwise() - net.input_shift()).array().colwise() / scale.array();
    std::vector<MatrixXd> th; // tangents of h, empty while h is the normalized input
    if (tape) tape->post.push_back(h);

    for (int l = 0; l + 1 < n_layers; ++l) {
        const auto W = net.weight(l);
        MatrixXd a = W * h;
        a.colwise() += net.bias(l);
        MatrixXd out, slope;
        apply_activation(net.activations()[l], a, out, slope);

        std::vector<MatrixXd> ta, tnext;
        if (with_jacobian) {
            ta.resize(d);
            tnext.resize(d);
            for (int j = 0; j < d; ++j) {
                if (l == 0) {
                    ta[j] = (W.col(j) / scale[j]).replicate(1, n);
                } else {
                    ta[j] = W * th[j];
                }
                tnext[j] = slope.cwiseProduct(ta[j]);
            }
        }
        if (tape) {
            tape->pre.push_back(std::move(a));
            tape->post.push_back(out);
            tape->slope.push_back(std::move(slope));
            tape->tan_pre.push_back(ta);
            tape->tan_post.push_back(tnext);
        }
        h = std::move(out);
        th = std::move(tnext);
    }

    const int last = n_layers - 1;
    const auto W = net.weight(last);
    NetOutputs result;
    result.values = W * h;
    result.values.colwise() += net.bias(last);
    if (with_jacobian) {
        result.jacobian.resize(d);
        for (int j = 0; j < d; ++j) {
            result.jacobian[j] = n_layers == 1 ? MatrixXd((W.col(j) / scale[j]).replicate(1, n)) : MatrixXd(W * th[j]);
        }
    }
    return result;
}

} // namespace

std::string to_string(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::elu: return "elu";
    }
    return "?";
}

Activation activation_from_string(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    if (name == "elu") return Activation::elu;
    throw ConfigError("unknown activation '" + name + "'");
}

double activation_slope_at_zero(Activation a) {
    return a == Activation::relu ? 0.0 : 1.0;
}

Mlp::Mlp(std::vector<int> layer_sizes, std::vector<Activation> activations)
    : sizes_(std::move(layer_sizes)), activations_(std::move(activations)) {
    if (sizes_.size() < 2) throw ConfigError("an MLP needs at least input and output sizes");
    for (int s : sizes_) {
        if (s < 1) throw ConfigError("layer sizes must be positive");
    }
    if (activations_.size() + 2 != sizes_.size()) {
        throw ConfigError("one activation per hidden layer is required");
    }
    build_offsets();
    params_ = VectorXd::Zero(offsets_.back());
    in_shift_ = VectorXd::Zero(sizes_.front());
    in_scale_ = VectorXd::Ones(sizes_.front());
}

Mlp Mlp::glorot(std::vector<int> layer_sizes, std::vector<Activation> activations, Rng& rng) {
    Mlp net(std::move(layer_sizes), std::move(activations));
    for (int l = 0; l < net.num_affine_layers(); ++l) {
        const int fan_in = net.sizes_[l];
        const int fan_out = net.sizes_[l + 1];
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> uniform(-limit, limit);
        auto W = net.weight(l);
        for (Eigen::Index c = 0; c < W.cols(); ++c) {
            for (Eigen::Index r = 0; r < W.rows(); ++r) W(r, c) = uniform(rng);
        }
    }
    return net;
}

Mlp Mlp::glorot(int input_dim, int width, int hidden, int output_dim, Activation activation, Rng& rng) {
    std::vector<int> sizes{input_dim};
    for (int i = 0; i < hidden; ++i) sizes.push_back(width);
    sizes.push_back(output_dim);
    return glorot(std::move(sizes), std::vector<Activation>(hidden, activation), rng);
}

void NetSpec::validate() const {
    if (width < 1 || hidden < 1) throw ConfigError("network width and depth must be >= 1");
}

Mlp NetSpec::build(int input_dim, int output_dim, Rng& rng) const {
    validate();
    return Mlp::glorot(input_dim, width, hidden, output_dim, activation, rng);
}

void Mlp::set_input_normalization(VectorXd shift, VectorXd scale) {
    if (shift.size() != input_dim() || scale.size() != input_dim()) {
        throw ContractError("input normalization: size mismatch");
    }
    if (!shift.allFinite() || !(scale.array() > 0.0).all() || !scale.allFinite()) {
        throw ConfigError("input normalization: shift must be finite and scale positive");
    }
    in_shift_ = std::move(shift);
    in_scale_ = std::move(scale);
}

void Mlp::build_offsets() {
    offsets_.assign(1, 0);
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        offsets_.push_back(offsets_.back() + static_cast<Eigen::Index>(sizes_[l + 1]) * (sizes_[l] + 1));
    }
}

void Mlp::set_params(const VectorXd& p) {
    if (p.size() != params_.size()) throw ContractError("set_params: parameter count mismatch");
    params_ = p;
}

Eigen::Map<const MatrixXd> Mlp::weight(int layer) const {
    return {params_.data() + offsets_[layer], sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<MatrixXd> Mlp::weight(int layer) {
    return {params_.data() + offsets_[layer], sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<const VectorXd> Mlp::bias(int layer) const {
    return {params_.data() + offsets_[layer] + static_cast<Eigen::Index>(sizes_[layer + 1]) * sizes_[layer],
            sizes_[layer + 1]};
}

Eigen::Map<VectorXd> Mlp::bias(int layer) {
    return {params_.data() + offsets_[layer] + static_cast<Eigen::Index>(sizes_[layer + 1]) * sizes_[layer],
            sizes_[layer + 1]};
}

void Mlp::check_input(const MatrixXd& x) const {
    if (sizes_.empty()) throw ContractError("network is empty");
    if (x.rows() != input_dim()) {
        throw ContractError("network input has " + std::to_string(x.rows()) + " rows, expected "
                            + std::to_string(input_dim()));
    }
}

MatrixXd Mlp::forward(const MatrixXd& x) const {
    check_input(x);
    return run_forward(*this, x, false, nullptr).values;
}

VectorXd Mlp::forward_point(const VectorXd& x) const {
    return forward(MatrixXd(x)).col(0);
}

NetOutputs Mlp::evaluate(const MatrixXd& x, bool with_jacobian) const {
    check_input(x);
    return run_forward(*this, x, with_jacobian, nullptr);
}

std::vector<MatrixXd> Mlp::input_gradient(const MatrixXd& x) const {
    check_input(x);
    Tape tape;
    run_forward(*this, x, false, &tape);
    const int n_layers = num_affine_layers();
    const Eigen::Index n = x.cols();
    std::vector<MatrixXd> jac(input_dim(), MatrixXd(output_dim(), n));
    for (int o = 0; o < output_dim(); ++o) {
        MatrixXd g = weight(n_layers - 1).row(o).transpose().replicate(1, n);
        for (int l = n_layers - 2; l >= 0; --l) {
            g = weight(l).transpose() * g.cwiseProduct(tape.slope[l]);
        }
        for (int j = 0; j < input_dim(); ++j) jac[j].row(o) = g.row(j) / in_scale_[j];
    }
    return jac;
}

MatrixXd Mlp::input_gradient_point(const VectorXd& x) const {
    const auto jac = input_gradient(MatrixXd(x));
    MatrixXd out(output_dim(), input_dim());
    for (int j = 0; j < input_dim(); ++j) out.col(j) = jac[j].col(0);
    return out;
}

bool Mlp::operator==(const Mlp& other) const {
    return sizes_ == other.sizes_ && activations_ == other.activations_ && params_ == other.params_
           && in_shift_ == other.in_shift_ && in_scale_ == other.in_scale_;
}

LossGradient loss_and_param_gradients(const Mlp& net, const MatrixXd& x, bool with_jacobian, const BatchLoss& loss) {
    if (x.rows() != net.input_dim()) throw ContractError("loss_and_param_gradients: input dimension mismatch");
    Tape tape;
    const NetOutputs outputs = run_forward(net, x, with_jacobian, &tape);

    const int d = net.input_dim();
    const Eigen::Index n = x.cols();
    NetOutputs adjoint;
    adjoint.values = MatrixXd::Zero(net.output_dim(), n);
    if (with_jacobian) adjoint.jacobian.assign(d, MatrixXd::Zero(net.output_dim(), n));

    LossGradient result;
    result.loss = loss(outputs, adjoint);
    if (adjoint.values.rows() != net.output_dim() || adjoint.values.cols() != n
        || adjoint.jacobian.size() != (with_jacobian ? static_cast<std::size_t>(d) : 0U)) {
        throw ContractError("loss_and_param_gradients: loss returned an adjoint of the wrong shape");
    }
    for (const auto& j : adjoint.jacobian) {
        if (j.rows() != net.output_dim() || j.cols() != n) {
            throw ContractError("loss_and_param_gradients: Jacobian adjoint of the wrong shape");
        }
    }

    Mlp grad_net = net; // same layout; receives the gradient
    grad_net.params().setZero();

    const int n_layers = net.num_affine_layers();
    const int last = n_layers - 1;
    MatrixXd h_bar = adjoint.values;
    std::vector<MatrixXd> th_bar = adjoint.jacobian;

    // Output layer: values = W h + b, jacobian_j = W ḣ^j.
    {
        auto gW = grad_net.weight(last);
        gW.noalias() = h_bar * tape.post[last].transpose();
        grad_net.bias(last) = h_bar.rowwise().sum();
        if (with_jacobian) {
            for (int j = 0; j < d; ++j) {
                if (last == 0) {
                    gW.col(j) += th_bar[j].rowwise().sum() / net.input_scale()[j];
                } else {
                    gW.noalias() += th_bar[j] * tape.tan_post[last - 1][j].transpose();
                }
            }
        }
        if (last > 0) {
            const auto W = net.weight(last);
            h_bar = W.transpose() * h_bar;
            for (int j = 0; j < static_cast<int>(th_bar.size()); ++j) th_bar[j] = W.transpose() * th_bar[j];
        }
    }

    for (int l = last - 1; l >= 0; --l) {
        const MatrixXd& slope = tape.slope[l];
        MatrixXd a_bar = h_bar.cwiseProduct(slope);
        std::vector<MatrixXd> ta_bar;
        if (with_jacobian) {
            ArrayXXd slope_bar = ArrayXXd::Zero(slope.rows(), slope.cols());
            ta_bar.resize(d);
            for (int j = 0; j < d; ++j) {
                slope_bar += th_bar[j].array() * tape.tan_pre[l][j].array();
                ta_bar[j] = th_bar[j].cwiseProduct(slope);
            }
            const Eigen::ArrayXXd curvature = activation_curvature(net.activations()[l], tape.pre[l], tape.post[l + 1]);
            a_bar.array() += slope_bar * curvature;
        }

        auto gW = grad_net.weight(l);
        gW.noalias() = a_bar * tape.post[l].transpose();
        grad_net.bias(l) = a_bar.rowwise().sum();
        if (with_jacobian) {
            for (int j = 0; j < d; ++j) {
                if (l == 0) {
                    gW.col(j) += ta_bar[j].rowwise().sum() / net.input_scale()[j];
                } else {
                    gW.noalias() += ta_bar[j] * tape.tan_post[l - 1][j].transpose();
                }
            }
        }
        if (l > 0) {
            const auto W = net.weight(l);
            h_bar = W.transpose() * a_bar;
            for (int j = 0; j < static_cast<int>(ta_bar.size()); ++j) th_bar[j] = W.transpose() * ta_bar[j];
        }
    }

    result.gradient = std::move(grad_net.params());
    return result;
}

void normalize_inputs_from(Mlp& net, const MatrixXd& x) {
    if (x.rows() != net.input_dim() || x.cols() < 1) throw ContractError("normalize_inputs_from: bad sample shape");
    const VectorXd mean = x.rowwise().mean();
    VectorXd scale = ((x.colwise() - mean).array().square().rowwise().sum() / static_cast<double>(x.cols())).sqrt();
    for (Eigen::Index i = 0; i < scale.size(); ++i) {
        if (!(scale[i] > 1e-12)) scale[i] = 1.0;
    }
    net.set_input_normalization(mean, scale);
}

double weight_norm_bound(double lipschitz, Activation activation) {
    const double slope = std::abs(activation_slope_at_zero(activation));
    if (slope == 0.0) throw ConfigError("weight-norm bound needs an activation with nonzero slope at 0");
    return (lipschitz + 1.0) / slope;
}

void project_weight_norm(Mlp& net, double bound) {
    if (net.num_affine_layers() != 2) throw ConfigError("weight-norm projection requires one hidden layer");
    const MatrixXd combined = net.weight(1) * net.weight(0) * net.input_scale().cwiseInverse().asDiagonal();
    const double n = combined.norm();
    if (n > bound) net.weight(0) *= bound / n;
}

void save_checkpoint(const Mlp& net, std::ostream& out) {
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    out << "layers " << net.layer_sizes().size();
    for (int s : net.layer_sizes()) out << ' ' << s;
    out << "\nactivations " << net.activations().size();
    for (auto a : net.activations()) out << ' ' << to_string(a);
    out << std::hexfloat;
    out << "\ninput_shift";
    for (Eigen::Index i = 0; i < net.input_shift().size(); ++i) out << ' ' << net.input_shift()[i];
    out << "\ninput_scale";
    for (Eigen::Index i = 0; i < net.input_scale().size(); ++i) out << ' ' << net.input_scale()[i];
    out << "\nparams " << net.num_params() << '\n';
    for (Eigen::Index i = 0; i < net.num_params(); ++i) out << net.params()[i] << '\n';
    out << std::defaultfloat;
}

Mlp load_checkpoint(std::istream& in) {
    std::string magic, key;
    int version = 0;
    in >> magic >> version;
    if (magic != kCheckpointMagic) throw ContractError("not a network checkpoint");
    if (version != 1 && version != kCheckpointVersion) throw ContractError("unsupported checkpoint version");
    std::size_t n = 0;
    in >> key >> n;
    if (key != "layers") throw ContractError("checkpoint: expected layers");
    std::vector<int> sizes(n);
    for (auto& s : sizes) in >> s;
    in >> key >> n;
    if (key != "activations") throw ContractError("checkpoint: expected activations");
    std::vector<Activation> acts;
    for (std::size_t i = 0; i < n; ++i) {
        std::string name;
        in >> name;
        acts.push_back(activation_from_string(name));
    }
    auto read_double = [&in]() {
        std::string token;
        if (!(in >> token)) throw ContractError("checkpoint: truncated record");
        char* end = nullptr;
        const double v = std::strtod(token.c_str(), &end);
        if (end == token.c_str()) throw ContractError("checkpoint: malformed number");
        return v;
    };
    const int d = sizes.empty() ? 0 : sizes.front();
    VectorXd shift = VectorXd::Zero(d);
    VectorXd scale = VectorXd::Ones(d);
    if (version >= 2) {
        in >> key;
        if (key != "input_shift") throw ContractError("checkpoint: expected input_shift");
        for (int i = 0; i < d; ++i) shift[i] = read_double();
        in >> key;
        if (key != "input_scale") throw ContractError("checkpoint: expected input_scale");
        for (int i = 0; i < d; ++i) scale[i] = read_double();
    }
    Eigen::Index count = 0;
    in >> key >> count;
    if (key != "params" || !in) throw ContractError("checkpoint: expected params");
    Mlp net(sizes, acts);
    if (count != net.num_params()) throw ContractError("checkpoint: parameter count mismatch");
    for (Eigen::Index i = 0; i < count; ++i) net.params()[i] = read_double();
    net.set_input_normalization(shift, scale);
    return net;
}

void save_checkpoint(const Mlp& net, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    save_checkpoint(net, out);
}

Mlp load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path);
    return load_checkpoint(in);
}

} // namespace cbsde
