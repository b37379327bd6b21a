#include "nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace vpflow::nn {

double act_value(Activation a, double z) {
    switch (a) {
        case Activation::SiLU: return z / (1.0 + std::exp(-z));
        case Activation::ELU: return z > 0.0 ? z : std::expm1(z);
        default: return z;
    }
}

double act_deriv(Activation a, double z) {
    switch (a) {
        case Activation::SiLU: {
            const double s = 1.0 / (1.0 + std::exp(-z));
            return s * (1.0 + z * (1.0 - s));
        }
        case Activation::ELU: return z > 0.0 ? 1.0 : std::exp(z);
        default: return 1.0;
    }
}

double act_second(Activation a, double z) {
    switch (a) {
        case Activation::SiLU: {
            const double s = 1.0 / (1.0 + std::exp(-z));
            return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s));
        }
        case Activation::ELU: return z > 0.0 ? 0.0 : std::exp(z);
        default: return 0.0;
    }
}

namespace {

Mat act_apply(Activation a, const Mat& z) {
    return z.unaryExpr([a](double v) { return act_value(a, v); });
}

Mat act_deriv_apply(Activation a, const Mat& z) {
    return z.unaryExpr([a](double v) { return act_deriv(a, v); });
}

}  // namespace

void Grads::set_zero() {
    for (auto& m : dW) m.setZero();
    for (auto& v : db) v.setZero();
}

Mat DenseNet::forward(const Mat& X) const {
    Mat a = X;
    for (const auto& layer : layers)
        a = act_apply(layer.act, (layer.W * a).colwise() + layer.b);
    return a;
}

Mat DenseNet::forward(const Mat& X, ForwardCache* cache) const {
    if (X.rows() != input_dim()) throw ConfigError("DenseNet: input dimension mismatch");
    cache->x = X;
    cache->z.clear();
    cache->a.clear();
    Mat a = X;
    for (const auto& layer : layers) {
        Mat z = (layer.W * a).colwise() + layer.b;
        a = act_apply(layer.act, z);
        cache->z.push_back(std::move(z));
        cache->a.push_back(a);
    }
    return a;
}

void DenseNet::backward(const ForwardCache& cache, const Mat& dY, Grads* grads, Mat* dX) const {
    const int L = static_cast<int>(layers.size());
    Mat dz = dY.cwiseProduct(act_deriv_apply(layers[L - 1].act, cache.z[L - 1]));
    for (int l = L - 1; l >= 0; --l) {
        const Mat& a_prev = (l == 0) ? cache.x : cache.a[l - 1];
        grads->dW[l] += dz * a_prev.transpose();
        grads->db[l] += dz.rowwise().sum();
        if (l > 0) {
            Mat da = layers[l].W.transpose() * dz;
            dz = da.cwiseProduct(act_deriv_apply(layers[l - 1].act, cache.z[l - 1]));
        } else if (dX) {
            *dX = layers[0].W.transpose() * dz;
        }
    }
}

Mat DenseNet::input_jacobian(const Vec& x) const {
    Mat G = Mat::Identity(input_dim(), input_dim());
    Vec a = x;
    for (const auto& layer : layers) {
        const Vec z = layer.W * a + layer.b;
        Mat P = layer.W * G;
        for (int i = 0; i < P.rows(); ++i) P.row(i) *= act_deriv(layer.act, z[i]);
        G = std::move(P);
        a = z.unaryExpr([&layer](double v) { return act_value(layer.act, v); });
    }
    return G;
}

Vec DenseNet::forward_with_jacobian(const Vec& x, JacCache* cache, Mat* jac) const {
    cache->x = x;
    cache->z.clear();
    cache->a.clear();
    cache->G.clear();
    Vec a = x;
    Mat G = Mat::Identity(input_dim(), input_dim());
    for (const auto& layer : layers) {
        Vec z = layer.W * a + layer.b;
        Mat P = layer.W * G;
        for (int i = 0; i < P.rows(); ++i) P.row(i) *= act_deriv(layer.act, z[i]);
        a = z.unaryExpr([&layer](double v) { return act_value(layer.act, v); });
        G = P;
        cache->z.push_back(std::move(z));
        cache->a.push_back(a);
        cache->G.push_back(G);
    }
    if (jac) *jac = G;
    return a;
}

void DenseNet::backward_with_jacobian(const JacCache& cache, const Vec& dy, const Mat& dG,
                                      Grads* grads, Vec* dx) const {
    const int L = static_cast<int>(layers.size());
    Vec abar = dy;
    Mat Gbar = dG;
    for (int l = L - 1; l >= 0; --l) {
        const auto& layer = layers[l];
        const Vec& z = cache.z[l];
        const Vec& a_prev = (l == 0) ? cache.x : cache.a[l - 1];
        const Mat& G_prev_or_I = (l == 0)
                                     ? Mat(Mat::Identity(input_dim(), input_dim()))
                                     : cache.G[l - 1];

        Vec zbar(z.size());
        for (int i = 0; i < z.size(); ++i) zbar[i] = act_deriv(layer.act, z[i]) * abar[i];

        // G_l = diag(act'(z)) * (W G_prev): route Gbar into z, W and G_prev.
        const Mat P = layer.W * G_prev_or_I;
        Mat Pbar = Gbar;
        for (int i = 0; i < P.rows(); ++i) {
            const double dsum = Gbar.row(i).dot(P.row(i));
            zbar[i] += act_second(layer.act, z[i]) * dsum;
            Pbar.row(i) *= act_deriv(layer.act, z[i]);
        }
        grads->dW[l] += Pbar * G_prev_or_I.transpose();
        grads->dW[l] += zbar * a_prev.transpose();
        grads->db[l] += zbar;

        if (l > 0) {
            Gbar = layer.W.transpose() * Pbar;
            abar = layer.W.transpose() * zbar;
        } else if (dx) {
            *dx = layer.W.transpose() * zbar;  // G_0 = I carries no x-dependence
        }
    }
}

Grads DenseNet::zero_grads() const {
    Grads g;
    for (const auto& layer : layers) {
        g.dW.push_back(Mat::Zero(layer.W.rows(), layer.W.cols()));
        g.db.push_back(Vec::Zero(layer.b.size()));
    }
    return g;
}

std::int64_t DenseNet::param_count() const {
    std::int64_t n = 0;
    for (const auto& layer : layers) n += layer.W.size() + layer.b.size();
    return n;
}

DenseNet DenseNet::create(const std::vector<int>& dims, Activation hidden, Activation output,
                          Rng& rng) {
    if (dims.size() < 2) throw ConfigError("DenseNet: need at least one layer");
    DenseNet net;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer layer;
        const double limit = std::sqrt(6.0 / dims[l]);
        layer.W.resize(dims[l + 1], dims[l]);
        for (int i = 0; i < layer.W.rows(); ++i)
            for (int j = 0; j < layer.W.cols(); ++j)
                layer.W(i, j) = (2.0 * rng.uniform() - 1.0) * limit;
        layer.b = Vec::Zero(dims[l + 1]);
        layer.act = (l + 2 == dims.size()) ? output : hidden;
        net.layers.push_back(std::move(layer));
    }
    return net;
}

Vec FourierTimeEmbedding::embed(double t) const {
    const int F = static_cast<int>(freqs.size());
    Vec e(2 * F);
    for (int i = 0; i < F; ++i) {
        const double ang = 6.283185307179586 * freqs[i] * t;
        e[i] = std::cos(ang);
        e[F + i] = std::sin(ang);
    }
    return e;
}

Mat FourierTimeEmbedding::embed_batch(const Vec& ts) const {
    Mat out(out_dim(), ts.size());
    for (int j = 0; j < ts.size(); ++j) out.col(j) = embed(ts[j]);
    return out;
}

FourierTimeEmbedding FourierTimeEmbedding::create(int n_freqs, double scale, std::uint64_t seed) {
    FourierTimeEmbedding emb;
    Rng rng(Rng::derive(seed, 0x666f7572696572ULL));
    emb.freqs.resize(n_freqs);
    for (int i = 0; i < n_freqs; ++i) emb.freqs[i] = scale * rng.normal();
    return emb;
}

void SpectralConstraint::attach(const DenseNet& net, std::uint64_t seed) {
    u.clear();
    Rng rng(Rng::derive(seed, 0x7370656374ULL));
    for (const auto& layer : net.layers) {
        Vec v = rng.normal_vec(static_cast<int>(layer.W.rows()));
        u.push_back(v.normalized());
    }
}

double SpectralConstraint::estimate_sigma(const Mat& W, Vec* u_io, int iters) const {
    if (W.norm() == 0.0) return 0.0;
    Vec u_vec = *u_io;
    Vec v;
    for (int it = 0; it < iters; ++it) {
        v = W.transpose() * u_vec;
        const double nv = v.norm();
        if (nv == 0.0) return 0.0;
        v /= nv;
        u_vec = W * v;
        const double nu = u_vec.norm();
        if (nu == 0.0) return 0.0;
        u_vec /= nu;
    }
    *u_io = u_vec;
    return u_vec.dot(W * v);
}

void SpectralConstraint::project(DenseNet* net) {
    for (std::size_t l = 0; l < net->layers.size(); ++l) {
        Mat& W = net->layers[l].W;
        if (W.norm() == 0.0) continue;  // bound trivially holds
        const double sigma = estimate_sigma(W, &u[l], train_iters);
        if (sigma > bound) W *= bound / sigma;
    }
}

std::vector<double> SpectralConstraint::certify(const DenseNet& net, int iters) const {
    std::vector<double> sigmas;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        Vec u_local = u[l];
        sigmas.push_back(estimate_sigma(net.layers[l].W, &u_local, iters));
    }
    return sigmas;
}

std::vector<ParamRef> collect_params(DenseNet* net) {
    std::vector<ParamRef> refs;
    for (auto& layer : net->layers) {
        refs.push_back({layer.W.data(), layer.W.size()});
        refs.push_back({layer.b.data(), layer.b.size()});
    }
    return refs;
}

std::vector<ParamRef> collect_grads(Grads* grads) {
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < grads->dW.size(); ++l) {
        refs.push_back({grads->dW[l].data(), grads->dW[l].size()});
        refs.push_back({grads->db[l].data(), grads->db[l].size()});
    }
    return refs;
}

void AdamState::init(std::int64_t n) {
    m_ = Vec::Zero(n);
    v_ = Vec::Zero(n);
    size_ = n;
    step_count_ = 0;
}

void AdamState::step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads) {
    std::int64_t total = 0;
    for (const auto& p : params) total += p.size;
    if (size_ < 0) init(total);
    if (total != size_) throw ConfigError("AdamState: parameter shape mismatch");

    for (std::size_t i = 0, off = 0; i < grads.size(); off += grads[i].size, ++i)
        for (std::int64_t j = 0; j < grads[i].size; ++j)
            if (!std::isfinite(grads[i].data[j]))
                throw NumericError("adam_step: non-finite gradient encountered; step aborted");

    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1, step_count_);
    const double bc2 = 1.0 - std::pow(beta2, step_count_);
    std::int64_t off = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::int64_t j = 0; j < params[i].size; ++j, ++off) {
            const double g = grads[i].data[j];
            m_[off] = beta1 * m_[off] + (1.0 - beta1) * g;
            v_[off] = beta2 * v_[off] + (1.0 - beta2) * g * g;
            const double mhat = m_[off] / bc1;
            const double vhat = v_[off] / bc2;
            params[i].data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

namespace {
constexpr char kMagic[9] = "VPFLOWCK";
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NumericError("save_checkpoint: cannot open '" + path + "'");
    out.write(kMagic, 8);
    const std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::string header = ck.header.dump();
    const std::uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header.data(), static_cast<std::streamsize>(hlen));
    const std::uint64_t n = ck.params.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(ck.params.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
    if (!out) throw NumericError("save_checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NumericError("load_checkpoint: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw NumericError("load_checkpoint: bad magic in '" + path + "'");
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != 1) throw NumericError("load_checkpoint: unsupported version");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    Checkpoint ck;
    ck.header = nlohmann::json::parse(header);
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    ck.params.resize(n);
    in.read(reinterpret_cast<char*>(ck.params.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw NumericError("load_checkpoint: truncated file '" + path + "'");
    return ck;
}

void append_net_params(const DenseNet& net, std::vector<double>* out) {
    for (const auto& layer : net.layers) {
        out->insert(out->end(), layer.W.data(), layer.W.data() + layer.W.size());
        out->insert(out->end(), layer.b.data(), layer.b.data() + layer.b.size());
    }
}

void read_net_params(DenseNet* net, const std::vector<double>& flat, std::size_t* offset) {
    for (auto& layer : net->layers) {
        if (*offset + layer.W.size() + layer.b.size() > flat.size())
            throw NumericError("checkpoint: parameter array too short");
        std::memcpy(layer.W.data(), flat.data() + *offset, layer.W.size() * sizeof(double));
        *offset += layer.W.size();
        std::memcpy(layer.b.data(), flat.data() + *offset, layer.b.size() * sizeof(double));
        *offset += layer.b.size();
    }
}

}  // namespace vpflow::nn
