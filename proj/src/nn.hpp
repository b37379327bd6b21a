#ifndef VPFLOW_NN_HPP
#define VPFLOW_NN_HPP

#include "common.hpp"
#include "json.hpp"

namespace vpflow::nn {

enum class Activation { Identity, SiLU, ELU };

double act_value(Activation a, double z);
double act_deriv(Activation a, double z);
double act_second(Activation a, double z);

struct DenseLayer {
    Mat W;
    Vec b;
    Activation act = Activation::Identity;
};

struct Grads {
    std::vector<Mat> dW;
    std::vector<Vec> db;
    void set_zero();
};

// Columns of cached matrices are batch items.
struct ForwardCache {
    Mat x;
    std::vector<Mat> z;  // pre-activations per layer
    std::vector<Mat> a;  // activations per layer
};

// Single-sample forward carrying the Jacobian of every intermediate
// activation with respect to the input; enables exact gradients of
// log|det(I + J_f)| terms.
struct JacCache {
    Vec x;
    std::vector<Vec> z;
    std::vector<Vec> a;
    std::vector<Mat> G;  // d(activation)/d(input), width x input_dim
};

class DenseNet {
public:
    std::vector<DenseLayer> layers;

    int input_dim() const { return static_cast<int>(layers.front().W.cols()); }
    int output_dim() const { return static_cast<int>(layers.back().W.rows()); }

    Mat forward(const Mat& X) const;
    Mat forward(const Mat& X, ForwardCache* cache) const;
    // Reverse mode for upstream dY (out_dim x B); accumulates into grads.
    void backward(const ForwardCache& cache, const Mat& dY, Grads* grads, Mat* dX = nullptr) const;

    Mat input_jacobian(const Vec& x) const;

    Vec forward_with_jacobian(const Vec& x, JacCache* cache, Mat* jac) const;
    // Upstream dy on the output and dG on the output Jacobian.
    void backward_with_jacobian(const JacCache& cache, const Vec& dy, const Mat& dG, Grads* grads,
                                Vec* dx = nullptr) const;

    Grads zero_grads() const;
    std::int64_t param_count() const;

    // Uniform Kaiming-style fan-in init, hidden activation on all but the last layer.
    static DenseNet create(const std::vector<int>& dims, Activation hidden, Activation output,
                           Rng& rng);
};

struct FourierTimeEmbedding {
    Vec freqs;  // fixed at init, not trained
    int out_dim() const { return 2 * static_cast<int>(freqs.size()); }
    Vec embed(double t) const;
    Mat embed_batch(const Vec& ts) const;
    static FourierTimeEmbedding create(int n_freqs, double scale, std::uint64_t seed);
};

// Per-layer spectral-norm cap via power iteration with persistent vectors.
struct SpectralConstraint {
    double bound = 1.0;
    int train_iters = 5;
    std::vector<Vec> u;  // persistent left singular vector estimates per layer

    void attach(const DenseNet& net, std::uint64_t seed);
    // Estimate sigma_1 with `iters` power iterations starting from the persistent vector.
    double estimate_sigma(const Mat& W, Vec* u_io, int iters) const;
    void project(DenseNet* net);  // rescale layers with estimated sigma > bound
    // 200-iteration estimates per layer (certification mode).
    std::vector<double> certify(const DenseNet& net, int iters = 200) const;
};

struct ParamRef {
    double* data;
    std::int64_t size;
};

std::vector<ParamRef> collect_params(DenseNet* net);
std::vector<ParamRef> collect_grads(Grads* grads);

class AdamState {
public:
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    void init(std::int64_t n);
    void step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads);
    long step_count() const { return step_count_; }

private:
    Vec m_, v_;
    long step_count_ = 0;
    std::int64_t size_ = -1;
};

// Versioned binary checkpoint: magic, JSON header, flat little-endian f64 params.
struct Checkpoint {
    nlohmann::json header;
    std::vector<double> params;
};
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

void append_net_params(const DenseNet& net, std::vector<double>* out);
void read_net_params(DenseNet* net, const std::vector<double>& flat, std::size_t* offset);

}  // namespace vpflow::nn

#endif
