#pragma once

#include "cbsde/rng.hpp"

#include <Eigen/Dense>

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace cbsde {

enum class Activation { relu, tanh, elu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// ρ'(0) with the convention relu'(0) = 0.
double activation_slope_at_zero(Activation a);

/// Network outputs on a batch: values is out × N, jacobian[j] is out × N and
/// holds the derivative of every output with respect to input coordinate j.
struct NetOutputs {
    Eigen::MatrixXd values;
    std::vector<Eigen::MatrixXd> jacobian;
};

/// Feedforward network x ↦ W_L ρ(… ρ(W_1 x + b_1) …) + b_L with a linear output layer.
///
/// Parameters live in one flat vector (per layer: weight column-major, then bias)
/// so optimizers and checkpoints treat them uniformly.
class Mlp {
public:
    Mlp() = default;

    /// Zero-initialized network. layer_sizes = {d, m_1, …, m_L, out}; one activation per hidden layer.
    Mlp(std::vector<int> layer_sizes, std::vector<Activation> activations);

    /// Glorot-uniform weights, zero biases.
    static Mlp glorot(std::vector<int> layer_sizes, std::vector<Activation> activations, Rng& rng);

    /// `hidden` layers of width `width`, same activation everywhere.
    static Mlp glorot(int input_dim, int width, int hidden, int output_dim, Activation activation, Rng& rng);

    int input_dim() const { return sizes_.front(); }
    int output_dim() const { return sizes_.back(); }
    int num_affine_layers() const { return static_cast<int>(sizes_.size()) - 1; }
    const std::vector<int>& layer_sizes() const { return sizes_; }
    const std::vector<Activation>& activations() const { return activations_; }

    Eigen::Index num_params() const { return params_.size(); }
    const Eigen::VectorXd& params() const { return params_; }
    Eigen::VectorXd& params() { return params_; }
    void set_params(const Eigen::VectorXd& p);

    Eigen::Map<const Eigen::MatrixXd> weight(int layer) const;
    Eigen::Map<Eigen::MatrixXd> weight(int layer);
    Eigen::Map<const Eigen::VectorXd> bias(int layer) const;
    Eigen::Map<Eigen::VectorXd> bias(int layer);

    /// Batched evaluation; x is d × N, the result out × N.
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
    Eigen::VectorXd forward_point(const Eigen::VectorXd& x) const;

    /// Exact input Jacobian by reverse sweeps, one per output. Layout as NetOutputs::jacobian.
    std::vector<Eigen::MatrixXd> input_gradient(const Eigen::MatrixXd& x) const;

    /// Jacobian at one point, out × d.
    Eigen::MatrixXd input_gradient_point(const Eigen::VectorXd& x) const;

    /// Values and (optionally) input Jacobian by forward tangent propagation.
    NetOutputs evaluate(const Eigen::MatrixXd& x, bool with_jacobian) const;

    /// Fixed input map x ↦ (x − shift)/scale applied before the first layer (not trained).
    /// Defaults to the identity; derivatives are taken with respect to the raw input.
    void set_input_normalization(Eigen::VectorXd shift, Eigen::VectorXd scale);
    const Eigen::VectorXd& input_shift() const { return in_shift_; }
    const Eigen::VectorXd& input_scale() const { return in_scale_; }

    bool operator==(const Mlp& other) const;

private:
    void build_offsets();
    void check_input(const Eigen::MatrixXd& x) const;

    std::vector<int> sizes_;
    std::vector<Activation> activations_;
    std::vector<Eigen::Index> offsets_;
    Eigen::VectorXd params_;
    Eigen::VectorXd in_shift_;
    Eigen::VectorXd in_scale_;
};

/// Architecture of a fully connected network with equal hidden widths.
struct NetSpec {
    int width = 50;
    int hidden = 2;
    Activation activation = Activation::relu;

    void validate() const;
    Mlp build(int input_dim, int output_dim, Rng& rng) const;
};

/// A batch loss over network outputs. Receives the outputs and must fill `adjoint`
/// (pre-sized, zeroed) with ∂loss/∂values and, when Jacobians were requested,
/// ∂loss/∂jacobian[j]. Returns the loss value.
using BatchLoss = std::function<double(const NetOutputs& outputs, NetOutputs& adjoint)>;

struct LossGradient {
    double loss = 0.0;
    Eigen::VectorXd gradient;
};

/// Exact gradient of a batch loss in all parameters, including through Jacobian terms
/// (reverse mode over the forward tangent pass). Throws ContractError when the loss
/// leaves the adjoint with the wrong shape.
LossGradient loss_and_param_gradients(const Mlp& net, const Eigen::MatrixXd& x, bool with_jacobian,
                                      const BatchLoss& loss);

/// Sets the input normalization to the per-coordinate sample mean and standard
/// deviation of the columns of x (scale 1 where the spread is zero).
void normalize_inputs_from(Mlp& net, const Eigen::MatrixXd& x);

/// Admissible bound (L+1)/|ρ'(0)| on |Σ λ_i α_i| for single-hidden-layer networks.
double weight_norm_bound(double lipschitz, Activation activation);

/// Rescales the hidden weights so that the input slope ‖W_2 W_1 diag(1/scale)‖₂ ≤ bound.
/// Single hidden layer only.
void project_weight_norm(Mlp& net, double bound);

/// Versioned text checkpoint; parameters in hexadecimal floating point so reload is bit-exact.
void save_checkpoint(const Mlp& net, std::ostream& out);
Mlp load_checkpoint(std::istream& in);
void save_checkpoint(const Mlp& net, const std::string& path);
Mlp load_checkpoint(const std::string& path);

} // namespace cbsde
