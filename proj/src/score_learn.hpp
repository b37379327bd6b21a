#ifndef VPFLOW_SCORE_LEARN_HPP
#define VPFLOW_SCORE_LEARN_HPP

#include "metrics.hpp"
#include "nn.hpp"

namespace vpflow::score_learn {

using ScoreFn = std::function<Vec(double, const Vec&)>;

struct DsmConfig {
    double T = 3.0;
    double delta_train = 1e-4;  // lower cutoff for t-sampling
    int batch = 256;
    long steps = 20000;
    std::uint64_t seed = 0;
    double lr = 1e-3;
    bool cosine_decay = true;  // anneal lr to 0 over the run
    int width = 64;
    int n_blocks = 3;
    int fourier_features = 16;
    double fourier_scale = 1.0;
    void validate() const;
};

// Time-conditioned residual score network. Random Fourier features feed a
// two-layer time net whose output conditions each residual block. The network
// predicts the sigma-scaled correction to the latent score, so
// s_theta(t,x) = -x + net(t,x)/sigma(t); the correction vanishes as the
// marginals approach the standard Gaussian.
class LearnedScore {
public:
    int dim = 1;
    double horizon_T = 3.0;
    double delta_train = 1e-4;
    std::uint64_t seed = 0;
    nn::FourierTimeEmbedding emb;
    nn::DenseNet time_net;
    nn::DenseNet lift;
    std::vector<nn::DenseNet> blocks;
    nn::DenseNet head;

    Vec eval(double t, const Vec& x) const;
    Mat eval_batch(const Vec& ts, const Mat& X) const;  // scores per column
    Mat raw_batch(const Vec& ts, const Mat& X) const;   // unscaled network output
    Mat input_jacobian(double t, const Vec& x) const;   // exact d s_theta / dx
    ScoreFn as_score_fn() const;

    nn::Checkpoint to_checkpoint() const;
    static LearnedScore from_checkpoint(const nn::Checkpoint& ck);
    static LearnedScore create(int dim, const DsmConfig& cfg);
};

struct TrainLogEntry {
    long step;
    double loss_ema;
};

struct TrainResult {
    LearnedScore model;
    std::vector<TrainLogEntry> log;
};

// Monte Carlo DSM objective E[w(t) ||s(x_t,t) + z/sigma(t)||^2] with
// w(t) = sigma^2(t), x ~ target, t ~ U(delta_train, T), x_t = a x + sigma z.
double dsm_loss(const ScoreFn& score, const targets::TargetDensity& target, const DsmConfig& cfg,
                std::uint64_t batch_seed, double* stderr_out = nullptr);

TrainResult train_dsm(const targets::TargetDensity& target, const DsmConfig& cfg);

// MC estimate of the score-error functional
// E_{delta,T} = int_delta^T int p_t ||s_t - s||^2 dx dt.
// Tail-guard failures are resampled up to 1% of the budget and counted.
double score_error(const ScoreFn& score, const vp::VpScoreModel& model, double delta, double T,
                   long n_mc, std::uint64_t seed, double* stderr_out = nullptr,
                   long* resampled_out = nullptr);

// Girsanov KL bound check: grid KL(p_delta || learned pullback of p_Z) against
// E/2 + KL(p_T || p_Z); reports the slack and the learned pullback's
// normalization defect.
metrics::MetricReport girsanov_kl_check(const ScoreFn& score, const vp::VpScoreModel& model,
                                        double delta, double T, const metrics::GridSpec& grid,
                                        long n_mc, std::uint64_t seed,
                                        const flow::IntegratorConfig& cfg = {}, int threads = 1);

}  // namespace vpflow::score_learn

#endif
