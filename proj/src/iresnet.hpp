#ifndef VPFLOW_IRESNET_HPP
#define VPFLOW_IRESNET_HPP

#include "nn.hpp"
#include "targets.hpp"

namespace vpflow::iresnet {

// Per-dimension affine layer with data-dependent init and exact log-det.
struct ActNorm {
    Vec scale, shift;
    bool initialized = false;
    Vec forward(const Vec& x) const { return scale.cwiseProduct(x) + shift; }
    Vec inverse(const Vec& y) const { return (y - shift).cwiseQuotient(scale); }
    double logdet() const { return scale.array().abs().log().sum(); }
};

// g(x) = x + f(x) with certified Lip(f) <= L < 1.
struct ResidualBlock {
    nn::DenseNet f;
    nn::SpectralConstraint constraint;
};

struct InversionConfig {
    double tol = 1e-10;
    int max_iter = 200;
};

struct MleTrainConfig {
    int batch = 256;
    double lr = 1e-3;
    bool cosine_decay = true;
    int cert_iters = 200;
    double cert_tol = 1e-3;
};

class IResNet {
public:
    int dim = 1;
    double block_bound = 0.0;  // L
    std::uint64_t seed = 0;
    std::vector<ResidualBlock> blocks;
    std::vector<ActNorm> norms;  // one after each block

    Vec forward(const Vec& x) const;
    Vec inverse(const Vec& y, const InversionConfig& inv = {}) const;
    double logdet(const Vec& x) const;  // exact, dim <= 2
    Mat input_jacobian(const Vec& x) const;

    // Mean negative log-likelihood under the Gaussian pullback.
    double mle_loss(const Mat& batch) const;

    // Certified global Lipschitz bounds: the paper-style (1+L)^k / (1-L)^{-k}
    // factors and the ActNorm-inclusive products.
    struct LipCertificate {
        double fwd_blocks_only, inv_blocks_only;
        double fwd_with_actnorm, inv_with_actnorm;
    };
    LipCertificate lipschitz_certificate() const;

    nn::Checkpoint to_checkpoint() const;
    static IResNet from_checkpoint(const nn::Checkpoint& ck);
    static IResNet create(int dim, int k, double block_bound, std::uint64_t seed, int width = 64);
};

// Fixed-point inversion x_{m+1} = y - f(x_m); geometric rate Lip(f).
Vec block_inverse(const ResidualBlock& block, const Vec& y, double tol = 1e-10, int max_iter = 200);

// Data-dependent ActNorm init: each norm layer maps its first-batch inputs to
// zero mean and unit variance per dimension.
void actnorm_data_init(IResNet* net, const Mat& batch);

// Exact MLE loss and parameter gradients on a batch (per-block f grads plus
// ActNorm scale/shift grads, in block order).
double mle_loss_grads(const IResNet& net, const Mat& batch, std::vector<nn::Grads>* f_grads,
                      std::vector<Vec>* dscale, std::vector<Vec>* dshift);

struct MleTrainResult {
    IResNet net;
    std::vector<std::pair<long, double>> log;  // (step, loss ema)
    std::vector<double> certified_sigmas;      // per layer, post-training 200-iter estimates
};

MleTrainResult train_mle(const targets::TargetDensity& target, int k, double L, long steps,
                         std::uint64_t seed, const MleTrainConfig& cfg = {});

// 200-iteration re-certification of every spectral bound; throws with the
// offending layer on failure.
std::vector<double> certify_spectral(const IResNet& net, int iters = 200, double tol = 1e-3);

}  // namespace vpflow::iresnet

#endif
