#include "iresnet.hpp"

#include <cmath>

namespace vpflow::iresnet {

namespace {

double block_logdet_2x2(const Mat& jf, Mat* a_inv_t) {
    if (jf.rows() == 1) {
        const double a = 1.0 + jf(0, 0);
        if (!(a > 0.0))
            throw NumericError("iresnet: singular block Jacobian (det(I+Jf) <= 0); spectral "
                               "certification violated");
        if (a_inv_t) *a_inv_t = Mat::Constant(1, 1, 1.0 / a);
        return std::log(a);
    }
    const double a = 1.0 + jf(0, 0), b = jf(0, 1), c = jf(1, 0), d = 1.0 + jf(1, 1);
    const double det = a * d - b * c;
    if (!(det > 0.0))
        throw NumericError("iresnet: singular block Jacobian (det(I+Jf) <= 0); spectral "
                           "certification violated");
    if (a_inv_t) {
        a_inv_t->resize(2, 2);
        *a_inv_t << d, -c, -b, a;
        *a_inv_t /= det;
    }
    return std::log(det);
}

}  // namespace

Vec block_inverse(const ResidualBlock& block, const Vec& y, double tol, int max_iter) {
    Vec x = y;
    double res = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
        const Vec fx = block.f.forward(x);
        res = (x + fx - y).norm();
        if (res <= tol) return x;
        x = y - fx;
    }
    throw NumericError("block_inverse: max_iter exceeded (residual " + format_double(res) +
                       " > tol " + format_double(tol) + "); spectral constraint may be violated");
}

Vec IResNet::forward(const Vec& x) const {
    Vec h = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        h = h + blocks[i].f.forward(h);
        h = norms[i].forward(h);
    }
    return h;
}

Vec IResNet::inverse(const Vec& y, const InversionConfig& inv) const {
    Vec h = y;
    for (std::size_t i = blocks.size(); i-- > 0;) {
        h = norms[i].inverse(h);
        h = block_inverse(blocks[i], h, inv.tol, inv.max_iter);
    }
    return h;
}

double IResNet::logdet(const Vec& x) const {
    if (dim > 2) throw ConfigError("iresnet: exact logdet requires dim <= 2");
    double ld = 0.0;
    Vec h = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const Mat jf = blocks[i].f.input_jacobian(h);
        ld += block_logdet_2x2(jf, nullptr);
        h = h + blocks[i].f.forward(h);
        h = norms[i].forward(h);
        ld += norms[i].logdet();
    }
    return ld;
}

Mat IResNet::input_jacobian(const Vec& x) const {
    Mat J = Mat::Identity(dim, dim);
    Vec h = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const Mat jf = blocks[i].f.input_jacobian(h);
        J = (Mat::Identity(dim, dim) + jf) * J;
        h = h + blocks[i].f.forward(h);
        h = norms[i].forward(h);
        J = norms[i].scale.asDiagonal() * J;
    }
    return J;
}

double IResNet::mle_loss(const Mat& batch) const {
    if (batch.cols() < 1) throw ConfigError("mle_loss: batch must be nonempty");
    double acc = 0.0;
    for (int i = 0; i < batch.cols(); ++i) {
        const Vec out = forward(batch.col(i));
        if (!out.allFinite()) throw NumericError("mle_loss: non-finite forward value");
        const double log_pz =
            -0.5 * out.squaredNorm() - 0.5 * dim * 1.8378770664093454836;
        acc += -(log_pz + logdet(batch.col(i)));
    }
    return acc / batch.cols();
}

IResNet::LipCertificate IResNet::lipschitz_certificate() const {
    LipCertificate c;
    const auto k = static_cast<double>(blocks.size());
    c.fwd_blocks_only = std::pow(1.0 + block_bound, k);
    c.inv_blocks_only = std::pow(1.0 - block_bound, -k);
    c.fwd_with_actnorm = 1.0;
    c.inv_with_actnorm = 1.0;
    for (const auto& an : norms) {
        c.fwd_with_actnorm *= (1.0 + block_bound) * an.scale.array().abs().maxCoeff();
        c.inv_with_actnorm *= (1.0 / (1.0 - block_bound)) / an.scale.array().abs().minCoeff();
    }
    return c;
}

IResNet IResNet::create(int dim, int k, double block_bound, std::uint64_t seed, int width) {
    if (!(block_bound > 0.0 && block_bound < 1.0))
        throw ConfigError("iresnet: block bound L must lie in (0,1)");
    if (k < 1) throw ConfigError("iresnet: k must be >= 1");
    IResNet net;
    net.dim = dim;
    net.block_bound = block_bound;
    net.seed = seed;
    Rng rng(Rng::derive(seed, 0x69726573ULL));
    const double layer_bound = std::cbrt(block_bound);
    for (int i = 0; i < k; ++i) {
        ResidualBlock block;
        block.f = nn::DenseNet::create({dim, width, width, dim}, nn::Activation::ELU,
                                       nn::Activation::Identity, rng);
        block.constraint.bound = layer_bound;
        block.constraint.attach(block.f, rng.next_u64());
        block.constraint.train_iters = 5;
        // enforce the constraint at init
        for (int p = 0; p < 40; ++p) block.constraint.project(&block.f);
        net.blocks.push_back(std::move(block));
        ActNorm an;
        an.scale = Vec::Ones(dim);
        an.shift = Vec::Zero(dim);
        net.norms.push_back(std::move(an));
    }
    return net;
}

nn::Checkpoint IResNet::to_checkpoint() const {
    nn::Checkpoint ck;
    ck.header["kind"] = "iresnet";
    ck.header["version"] = 1;
    ck.header["dim"] = dim;
    ck.header["k"] = static_cast<int>(blocks.size());
    ck.header["block_bound"] = block_bound;
    ck.header["seed"] = seed;
    ck.header["layer_bound"] = blocks.empty() ? 0.0 : blocks.front().constraint.bound;
    ck.header["width"] = static_cast<int>(blocks.front().f.layers[0].W.rows());
    for (const auto& b : blocks) nn::append_net_params(b.f, &ck.params);
    for (const auto& an : norms) {
        ck.params.insert(ck.params.end(), an.scale.data(), an.scale.data() + an.scale.size());
        ck.params.insert(ck.params.end(), an.shift.data(), an.shift.data() + an.shift.size());
    }
    return ck;
}

IResNet IResNet::from_checkpoint(const nn::Checkpoint& ck) {
    if (ck.header.value("kind", "") != "iresnet")
        throw NumericError("checkpoint: not an iresnet checkpoint");
    IResNet net = create(ck.header.at("dim").get<int>(), ck.header.at("k").get<int>(),
                         ck.header.at("block_bound").get<double>(),
                         ck.header.value("seed", 0ULL), ck.header.at("width").get<int>());
    std::size_t off = 0;
    for (auto& b : net.blocks) nn::read_net_params(&b.f, ck.params, &off);
    for (auto& an : net.norms) {
        for (int i = 0; i < an.scale.size(); ++i) an.scale[i] = ck.params.at(off++);
        for (int i = 0; i < an.shift.size(); ++i) an.shift[i] = ck.params.at(off++);
        an.initialized = true;
    }
    if (off != ck.params.size()) throw NumericError("checkpoint: trailing parameters");
    return net;
}

std::vector<double> certify_spectral(const IResNet& net, int iters, double tol) {
    std::vector<double> sigmas;
    for (std::size_t i = 0; i < net.blocks.size(); ++i) {
        const auto s = net.blocks[i].constraint.certify(net.blocks[i].f, iters);
        for (std::size_t l = 0; l < s.size(); ++l) {
            if (s[l] > net.blocks[i].constraint.bound * (1.0 + tol))
                throw NumericError("iresnet certification failed: block " + std::to_string(i) +
                                   " layer " + std::to_string(l) + " sigma=" +
                                   format_double(s[l]) + " > bound " +
                                   format_double(net.blocks[i].constraint.bound));
            sigmas.push_back(s[l]);
        }
        if (net.norms[i].scale.cwiseAbs().minCoeff() == 0.0)
            throw NumericError("iresnet certification failed: ActNorm scale is zero");
    }
    return sigmas;
}

namespace {

struct NetGrads {
    std::vector<nn::Grads> f;
    std::vector<Vec> dscale, dshift;
    void set_zero() {
        for (auto& g : f) g.set_zero();
        for (auto& v : dscale) v.setZero();
        for (auto& v : dshift) v.setZero();
    }
};

// Accumulates exact gradients of the per-sample MLE loss
// -(log p_Z(phi(x)) + logdet(x)) scaled by `weight`.
void accumulate_sample_grads(const IResNet& net, const Vec& x, double weight, NetGrads* grads,
                             double* loss_out) {
    const std::size_t k = net.blocks.size();
    std::vector<nn::JacCache> caches(k);
    std::vector<Mat> a_inv_t(k);
    std::vector<Vec> block_in(k), block_out(k);

    Vec h = x;
    double loss = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        block_in[i] = h;
        Mat jf;
        const Vec fx = net.blocks[i].f.forward_with_jacobian(h, &caches[i], &jf);
        loss -= block_logdet_2x2(jf, &a_inv_t[i]);
        h = h + fx;
        block_out[i] = h;
        h = net.norms[i].forward(h);
        loss -= net.norms[i].logdet();
    }
    loss += 0.5 * h.squaredNorm() + 0.5 * net.dim * 1.8378770664093454836;
    *loss_out += weight * loss;

    // reverse pass
    Vec g = weight * h;  // d(0.5||out||^2)/d out
    for (std::size_t i = k; i-- > 0;) {
        const auto& an = net.norms[i];
        // y = scale .* u + shift, loss -= sum log|scale|
        grads->dshift[i] += g;
        grads->dscale[i] += g.cwiseProduct(block_out[i]);
        grads->dscale[i] -= weight * an.scale.cwiseInverse();
        g = an.scale.cwiseProduct(g);
        // u = block_in + f(block_in), loss -= log det(I + Jf(block_in))
        Vec dx_f;
        net.blocks[i].f.backward_with_jacobian(caches[i], g, -weight * a_inv_t[i],
                                               &grads->f[i], &dx_f);
        g += dx_f;
    }
}

}  // namespace

void actnorm_data_init(IResNet* net, const Mat& batch_in) {
    Mat batch = batch_in;
    const int n = static_cast<int>(batch.cols());
    for (std::size_t i = 0; i < net->blocks.size(); ++i) {
        Mat out(net->dim, n);
        for (int c = 0; c < n; ++c)
            out.col(c) = batch.col(c) + net->blocks[i].f.forward(batch.col(c));
        const Vec mean = out.rowwise().mean();
        Vec var = Vec::Zero(net->dim);
        for (int c = 0; c < n; ++c) var += (out.col(c) - mean).cwiseAbs2();
        var /= n;
        if (var.minCoeff() <= 0.0)
            throw NumericError("actnorm_data_init: degenerate first-batch activations");
        net->norms[i].scale = var.cwiseSqrt().cwiseInverse();
        net->norms[i].shift = -mean.cwiseProduct(net->norms[i].scale);
        net->norms[i].initialized = true;
        for (int c = 0; c < n; ++c) batch.col(c) = net->norms[i].forward(out.col(c));
    }
}

double mle_loss_grads(const IResNet& net, const Mat& batch, std::vector<nn::Grads>* f_grads,
                      std::vector<Vec>* dscale, std::vector<Vec>* dshift) {
    NetGrads grads;
    for (const auto& b : net.blocks) grads.f.push_back(b.f.zero_grads());
    for (std::size_t i = 0; i < net.norms.size(); ++i) {
        grads.dscale.push_back(Vec::Zero(net.dim));
        grads.dshift.push_back(Vec::Zero(net.dim));
    }
    double loss = 0.0;
    for (int i = 0; i < batch.cols(); ++i)
        accumulate_sample_grads(net, batch.col(i), 1.0 / batch.cols(), &grads, &loss);
    if (f_grads) *f_grads = std::move(grads.f);
    if (dscale) *dscale = std::move(grads.dscale);
    if (dshift) *dshift = std::move(grads.dshift);
    return loss;
}

MleTrainResult train_mle(const targets::TargetDensity& target, int k, double L, long steps,
                         std::uint64_t seed, const MleTrainConfig& cfg) {
    MleTrainResult res;
    res.net = IResNet::create(target.dim, k, L, seed);
    IResNet& net = res.net;

    // Data-dependent ActNorm init on the first batch.
    {
        Rng rng(Rng::derive(seed, 0x616e696e6974ULL));
        Mat batch(target.dim, cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) batch.col(i) = target.draw_(rng);
        actnorm_data_init(&net, batch);
    }

    NetGrads grads;
    for (auto& b : net.blocks) grads.f.push_back(b.f.zero_grads());
    for (std::size_t i = 0; i < net.norms.size(); ++i) {
        grads.dscale.push_back(Vec::Zero(target.dim));
        grads.dshift.push_back(Vec::Zero(target.dim));
    }

    std::vector<nn::ParamRef> params;
    for (auto& b : net.blocks) {
        auto p = nn::collect_params(&b.f);
        params.insert(params.end(), p.begin(), p.end());
    }
    for (auto& an : net.norms) {
        params.push_back({an.scale.data(), an.scale.size()});
        params.push_back({an.shift.data(), an.shift.size()});
    }

    nn::AdamState adam;
    adam.lr = cfg.lr;
    double ema = 0.0;
    for (long step = 0; step < steps; ++step) {
        if (cfg.cosine_decay)
            adam.lr = cfg.lr * 0.5 *
                      (1.0 + std::cos(3.14159265358979323846 * step / std::max<long>(1, steps)));
        Rng rng(Rng::derive(seed, 0x6d6c65737465ULL + static_cast<std::uint64_t>(step)));
        grads.set_zero();
        double loss = 0.0;
        for (int i = 0; i < cfg.batch; ++i)
            accumulate_sample_grads(net, target.draw_(rng), 1.0 / cfg.batch, &grads, &loss);
        ema = (step == 0) ? loss : 0.99 * ema + 0.01 * loss;
        if (!std::isfinite(ema))
            throw NumericError("train_mle: loss diverged at step " + std::to_string(step));
        if (step % 50 == 0 || step + 1 == steps) res.log.push_back({step, ema});

        std::vector<nn::ParamRef> grefs;
        for (auto& g : grads.f) {
            auto gr = nn::collect_grads(&g);
            grefs.insert(grefs.end(), gr.begin(), gr.end());
        }
        for (std::size_t i = 0; i < grads.dscale.size(); ++i) {
            grefs.push_back({grads.dscale[i].data(), grads.dscale[i].size()});
            grefs.push_back({grads.dshift[i].data(), grads.dshift[i].size()});
        }
        adam.step(params, grefs);
        for (auto& b : net.blocks) b.constraint.project(&b.f);
    }

    // Final certification projection with long power iterations, then assert.
    for (auto& b : net.blocks) {
        const int saved = b.constraint.train_iters;
        b.constraint.train_iters = cfg.cert_iters;
        b.constraint.project(&b.f);
        b.constraint.train_iters = saved;
    }
    res.certified_sigmas = certify_spectral(net, cfg.cert_iters, cfg.cert_tol);
    return res;
}

}  // namespace vpflow::iresnet
