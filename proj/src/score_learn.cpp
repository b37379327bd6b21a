#include "score_learn.hpp"

#include <cmath>

namespace vpflow::score_learn {

using vp::VpSchedule;

void DsmConfig::validate() const {
    if (!(T > 0.0)) throw ConfigError("dsm: T must be > 0", "/training/T");
    if (delta_train < 0.0) throw ConfigError("dsm: delta_train must be >= 0", "/training/delta_train");
    if (delta_train >= T) throw ConfigError("dsm: delta_train must be < T", "/training/delta_train");
    if (batch < 1 || steps < 0) throw ConfigError("dsm: invalid batch/steps", "/training");
    if (width < 1 || n_blocks < 1 || fourier_features < 1)
        throw ConfigError("dsm: invalid architecture sizes", "/training");
}

LearnedScore LearnedScore::create(int dim, const DsmConfig& cfg) {
    cfg.validate();
    LearnedScore m;
    m.dim = dim;
    m.horizon_T = cfg.T;
    m.delta_train = cfg.delta_train;
    m.seed = cfg.seed;
    m.emb = nn::FourierTimeEmbedding::create(cfg.fourier_features, cfg.fourier_scale, cfg.seed);
    Rng rng(Rng::derive(cfg.seed, 0x696e6974ULL));
    const int w = cfg.width;
    m.time_net = nn::DenseNet::create({2 * cfg.fourier_features, w, w}, nn::Activation::SiLU,
                                      nn::Activation::SiLU, rng);
    m.lift = nn::DenseNet::create({dim, w}, nn::Activation::SiLU, nn::Activation::Identity, rng);
    for (int i = 0; i < cfg.n_blocks; ++i)
        m.blocks.push_back(nn::DenseNet::create({w, w, w, w}, nn::Activation::SiLU,
                                                nn::Activation::Identity, rng));
    m.head = nn::DenseNet::create({w, dim}, nn::Activation::SiLU, nn::Activation::Identity, rng);
    // zero head: the model starts at the latent-score baseline s(x) = -x
    m.head.layers.back().W.setZero();
    m.head.layers.back().b.setZero();
    return m;
}

Mat LearnedScore::raw_batch(const Vec& ts, const Mat& X) const {
    const Mat e = time_net.forward(emb.embed_batch(ts));
    Mat h = lift.forward(X);
    for (const auto& block : blocks) h = h + block.forward(h + e);
    return head.forward(h);
}

Mat LearnedScore::eval_batch(const Vec& ts, const Mat& X) const {
    Mat out = raw_batch(ts, X);
    for (int j = 0; j < out.cols(); ++j) {
        if (!(ts[j] > 0.0)) throw ConfigError("LearnedScore: t must be > 0");
        out.col(j) = -X.col(j) + out.col(j) / VpSchedule::sigma(ts[j]);
    }
    return out;
}

Vec LearnedScore::eval(double t, const Vec& x) const {
    Vec ts(1);
    ts[0] = t;
    return Vec(eval_batch(ts, x).col(0));
}

Mat LearnedScore::input_jacobian(double t, const Vec& x) const {
    if (!(t > 0.0)) throw ConfigError("LearnedScore: t must be > 0");
    const Vec e = time_net.forward(emb.embed(t));
    Vec h = lift.forward(x);
    Mat G = lift.input_jacobian(x);
    for (const auto& block : blocks) {
        const Vec u = h + e;
        G = G + block.input_jacobian(u) * G;
        h = h + block.forward(u);
    }
    return -Mat::Identity(dim, dim) + head.input_jacobian(h) * G / VpSchedule::sigma(t);
}

ScoreFn LearnedScore::as_score_fn() const {
    // Copy of the model shared by the closure; frozen nets are reentrant.
    auto self = std::make_shared<const LearnedScore>(*this);
    return [self](double t, const Vec& x) { return self->eval(t, x); };
}

nn::Checkpoint LearnedScore::to_checkpoint() const {
    nn::Checkpoint ck;
    ck.header["kind"] = "learned_score";
    ck.header["version"] = 1;
    ck.header["dim"] = dim;
    ck.header["horizon_T"] = horizon_T;
    ck.header["delta_train"] = delta_train;
    ck.header["seed"] = seed;
    ck.header["width"] = static_cast<int>(time_net.layers.back().W.rows());
    ck.header["n_blocks"] = static_cast<int>(blocks.size());
    ck.header["fourier_features"] = static_cast<int>(emb.freqs.size());
    ck.params.insert(ck.params.end(), emb.freqs.data(), emb.freqs.data() + emb.freqs.size());
    nn::append_net_params(time_net, &ck.params);
    nn::append_net_params(lift, &ck.params);
    for (const auto& b : blocks) nn::append_net_params(b, &ck.params);
    nn::append_net_params(head, &ck.params);
    return ck;
}

LearnedScore LearnedScore::from_checkpoint(const nn::Checkpoint& ck) {
    if (ck.header.value("kind", "") != "learned_score")
        throw NumericError("checkpoint: not a learned_score checkpoint");
    DsmConfig cfg;
    cfg.T = ck.header.at("horizon_T").get<double>();
    cfg.delta_train = ck.header.at("delta_train").get<double>();
    cfg.width = ck.header.at("width").get<int>();
    cfg.n_blocks = ck.header.at("n_blocks").get<int>();
    cfg.fourier_features = ck.header.at("fourier_features").get<int>();
    cfg.seed = ck.header.value("seed", 0ULL);
    LearnedScore m = create(ck.header.at("dim").get<int>(), cfg);
    std::size_t off = 0;
    if (ck.params.size() < static_cast<std::size_t>(m.emb.freqs.size()))
        throw NumericError("checkpoint: parameter array too short");
    std::copy(ck.params.begin(), ck.params.begin() + m.emb.freqs.size(), m.emb.freqs.data());
    off = static_cast<std::size_t>(m.emb.freqs.size());
    nn::read_net_params(&m.time_net, ck.params, &off);
    nn::read_net_params(&m.lift, ck.params, &off);
    for (auto& b : m.blocks) nn::read_net_params(&b, ck.params, &off);
    nn::read_net_params(&m.head, ck.params, &off);
    if (off != ck.params.size()) throw NumericError("checkpoint: trailing parameters");
    return m;
}

namespace {

struct Batch {
    Vec ts;
    Mat xt;
    Mat z;
};

// antithetic=true shares (x0, t) across noise pairs (z, -z): unbiased with
// lower gradient variance; plain i.i.d. draws keep the loss estimator's
// standard-error formula valid.
Batch draw_batch(const targets::TargetDensity& target, const DsmConfig& cfg, Rng& rng,
                 bool antithetic) {
    Batch b;
    b.ts.resize(cfg.batch);
    b.xt.resize(target.dim, cfg.batch);
    b.z.resize(target.dim, cfg.batch);
    for (int i = 0; i < cfg.batch; ++i) {
        Vec x0, z;
        double t = 0.0;
        if (antithetic && i % 2 == 1) {
            t = b.ts[i - 1];
            z = -b.z.col(i - 1);
            x0 = (b.xt.col(i - 1) - VpSchedule::sigma(t) * b.z.col(i - 1)) / VpSchedule::a(t);
        } else {
            x0 = target.draw_(rng);
            t = cfg.delta_train + (cfg.T - cfg.delta_train) * rng.uniform();
            z = rng.normal_vec(target.dim);
        }
        b.ts[i] = t;
        b.z.col(i) = z;
        b.xt.col(i) = VpSchedule::a(t) * x0 + VpSchedule::sigma(t) * z;
    }
    return b;
}

}  // namespace

double dsm_loss(const ScoreFn& score, const targets::TargetDensity& target, const DsmConfig& cfg,
                std::uint64_t batch_seed, double* stderr_out) {
    cfg.validate();
    Rng rng(Rng::derive(batch_seed, 0x64736d6c6f7373ULL));
    const Batch b = draw_batch(target, cfg, rng, false);
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < cfg.batch; ++i) {
        const double sig = VpSchedule::sigma(b.ts[i]);
        const Vec s = score(b.ts[i], b.xt.col(i));
        const double v = (sig * s + b.z.col(i)).squaredNorm();  // sigma^2 ||s + z/sigma||^2
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / cfg.batch;
    if (stderr_out) {
        const double var = std::max(0.0, sumsq / cfg.batch - mean * mean);
        *stderr_out = std::sqrt(var / cfg.batch);
    }
    return mean;
}

TrainResult train_dsm(const targets::TargetDensity& target, const DsmConfig& cfg) {
    cfg.validate();
    TrainResult res;
    res.model = LearnedScore::create(target.dim, cfg);
    LearnedScore& m = res.model;

    nn::AdamState adam;
    adam.lr = cfg.lr;

    nn::Grads g_time = m.time_net.zero_grads();
    nn::Grads g_lift = m.lift.zero_grads();
    std::vector<nn::Grads> g_blocks;
    for (auto& b : m.blocks) g_blocks.push_back(b.zero_grads());
    nn::Grads g_head = m.head.zero_grads();

    auto params = nn::collect_params(&m.time_net);
    {
        auto p2 = nn::collect_params(&m.lift);
        params.insert(params.end(), p2.begin(), p2.end());
        for (auto& b : m.blocks) {
            auto p3 = nn::collect_params(&b);
            params.insert(params.end(), p3.begin(), p3.end());
        }
        auto p4 = nn::collect_params(&m.head);
        params.insert(params.end(), p4.begin(), p4.end());
    }

    double ema = 0.0;
    const int n = static_cast<int>(m.blocks.size());
    for (long step = 0; step < cfg.steps; ++step) {
        if (cfg.cosine_decay)
            adam.lr = cfg.lr * 0.5 *
                      (1.0 + std::cos(3.14159265358979323846 * step / std::max<long>(1, cfg.steps)));
        Rng rng(Rng::derive(cfg.seed, 0x7374657000ULL + static_cast<std::uint64_t>(step)));
        const Batch batch = draw_batch(target, cfg, rng, true);

        nn::ForwardCache c_time, c_lift, c_head;
        std::vector<nn::ForwardCache> c_blocks(static_cast<std::size_t>(n));
        const Mat e = m.time_net.forward(m.emb.embed_batch(batch.ts), &c_time);
        Mat h = m.lift.forward(batch.xt, &c_lift);
        std::vector<Mat> h_in;  // block inputs h + e
        for (int i = 0; i < n; ++i) {
            h_in.push_back(h + e);
            h = h + m.blocks[static_cast<std::size_t>(i)].forward(
                        h_in.back(), &c_blocks[static_cast<std::size_t>(i)]);
        }
        const Mat out = m.head.forward(h, &c_head);

        // sigma^2 ||s_theta + z/sigma||^2 with s_theta = -x + out/sigma
        Mat resid = out + batch.z;
        for (int j = 0; j < cfg.batch; ++j)
            resid.col(j) -= VpSchedule::sigma(batch.ts[j]) * batch.xt.col(j);
        const double loss = resid.squaredNorm() / cfg.batch;
        ema = (step == 0) ? loss : 0.99 * ema + 0.01 * loss;
        if (!std::isfinite(ema))
            throw NumericError("train_dsm: loss diverged at step " + std::to_string(step) +
                               " (ema non-finite)");
        if (step % 100 == 0 || step + 1 == cfg.steps) res.log.push_back({step, ema});

        g_time.set_zero();
        g_lift.set_zero();
        for (auto& g : g_blocks) g.set_zero();
        g_head.set_zero();

        Mat dh;
        m.head.backward(c_head, 2.0 * resid / cfg.batch, &g_head, &dh);
        Mat de = Mat::Zero(e.rows(), e.cols());
        for (int i = n - 1; i >= 0; --i) {
            Mat du;
            m.blocks[static_cast<std::size_t>(i)].backward(
                c_blocks[static_cast<std::size_t>(i)], dh, &g_blocks[static_cast<std::size_t>(i)],
                &du);
            de += du;
            dh += du;
        }
        m.lift.backward(c_lift, dh, &g_lift, nullptr);
        m.time_net.backward(c_time, de, &g_time, nullptr);

        auto grads = nn::collect_grads(&g_time);
        {
            auto g2 = nn::collect_grads(&g_lift);
            grads.insert(grads.end(), g2.begin(), g2.end());
            for (auto& g : g_blocks) {
                auto g3 = nn::collect_grads(&g);
                grads.insert(grads.end(), g3.begin(), g3.end());
            }
            auto g4 = nn::collect_grads(&g_head);
            grads.insert(grads.end(), g4.begin(), g4.end());
        }
        adam.step(params, grads);
    }
    return res;
}

double score_error(const ScoreFn& score, const vp::VpScoreModel& model, double delta, double T,
                   long n_mc, std::uint64_t seed, double* stderr_out, long* resampled_out) {
    if (!(delta > 0.0) && !model.allows_t0())
        throw ConfigError("score_error: delta must be > 0 for this target class");
    if (!(T > delta)) throw ConfigError("score_error: requires T > delta");
    if (n_mc < 1) throw ConfigError("score_error: n_mc must be >= 1");

    Rng rng(Rng::derive(seed, 0x73636f7265657272ULL));
    const long budget = std::max<long>(1, n_mc / 100);
    long resampled = 0;
    double sum = 0.0, sumsq = 0.0;
    const auto& target = model.target();
    for (long i = 0; i < n_mc; ++i) {
        for (;;) {
            const double t = delta + (T - delta) * rng.uniform();
            const Vec x0 = target.draw_(rng);
            const Vec xt = VpSchedule::a(t) * x0 +
                           VpSchedule::sigma(t) * rng.normal_vec(target.dim);
            try {
                const Vec exact = model.score(t, xt);
                const double v = (T - delta) * (exact - score(t, xt)).squaredNorm();
                sum += v;
                sumsq += v * v;
                break;
            } catch (const TailGuardError&) {
                if (++resampled > budget)
                    throw NumericError(
                        "score_error: tail-guard failures exceeded 1% of the MC budget");
            }
        }
    }
    const double mean = sum / n_mc;
    if (stderr_out) {
        const double var = std::max(0.0, sumsq / n_mc - mean * mean);
        *stderr_out = std::sqrt(var / n_mc);
    }
    if (resampled_out) *resampled_out = resampled;
    return mean;
}

metrics::MetricReport girsanov_kl_check(const ScoreFn& score, const vp::VpScoreModel& model,
                                        double delta, double T, const metrics::GridSpec& grid,
                                        long n_mc, std::uint64_t seed,
                                        const flow::IntegratorConfig& cfg, int threads) {
    if (model.dim() != 1) throw ConfigError("girsanov_kl_check: requires a 1D target (grid KL)");
    metrics::MetricReport rep;

    double se = 0.0;
    long resampled = 0;
    const double E = score_error(score, model, delta, T, n_mc, seed, &se, &resampled);

    const flow::FlowField field = flow::FlowField::from_score_fn(1, score);
    const Mat pts = grid.points();
    auto qvals = std::make_shared<Vec>(pts.cols());
    parallel_for(pts.cols(), threads, [&](std::int64_t i) {
        (*qvals)[static_cast<int>(i)] = std::exp(
            flow::pullback_logpdf(field, delta, T, pts.col(static_cast<int>(i)), cfg));
    });
    const metrics::DensityFn q_delta = metrics::grid_table_fn(grid, qvals);
    const metrics::DensityFn p_delta = [&](const Vec& x) { return model.marginal_pdf(delta, x); };
    const metrics::DensityFn p_T = [&](const Vec& x) { return model.marginal_pdf(T, x); };
    const metrics::DensityFn p_Z = [](const Vec& x) { return metrics::std_normal_density(x); };

    const double lhs = metrics::kl_divergence(p_delta, q_delta, grid);
    const double kl_T = metrics::kl_divergence(p_T, p_Z, grid);
    const double rhs = 0.5 * E + kl_T;

    const Vec w = grid.quadrature_weights();
    const double norm_defect = std::abs(qvals->dot(w) - 1.0);

    rep.values["E_dT"] = E;
    rep.values["E_dT_se"] = se;
    rep.values["kl_lhs"] = lhs;
    rep.values["kl_T"] = kl_T;
    rep.values["kl_rhs"] = rhs;
    rep.values["slack"] = rhs - lhs;
    rep.values["norm_defect"] = norm_defect;
    rep.values["resampled"] = static_cast<double>(resampled);
    rep.metadata["grid"] = grid.to_json();
    rep.metadata["delta"] = delta;
    rep.metadata["T"] = T;
    rep.metadata["n_mc"] = n_mc;
    rep.metadata["target"] = model.target().name;
    return rep;
}

}  // namespace vpflow::score_learn
