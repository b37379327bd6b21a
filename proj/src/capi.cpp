#include "vpflow/vpflow.h"

#include <cstring>
#include <memory>
#include <string>

#include "experiments.hpp"

using namespace vpflow;

namespace {

thread_local std::string g_last_error;

void set_error(const std::string& msg) { g_last_error = msg; }

template <typename Fn>
vpf_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return VPF_OK;
    } catch (const ConfigError& e) {
        set_error(e.what());
        return VPF_ERR_INVALID;
    } catch (const NumericError& e) {
        set_error(e.what());
        return VPF_ERR_NUMERIC;
    } catch (const std::exception& e) {
        set_error(e.what());
        return VPF_ERR_NUMERIC;
    }
}

Vec to_vec(const double* x, int dim) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v[i] = x[i];
    return v;
}

}  // namespace

struct vpf_target_s {
    targets::TargetPtr target;
};

struct vpf_score_model_s {
    std::shared_ptr<const vp::VpScoreModel> model;
};

struct vpf_flow_s {
    std::shared_ptr<const flow::FlowField> field;
    int dim;
};

extern "C" {

const char* vpf_version(void) { return "1.0.0"; }

const char* vpf_last_error(void) { return g_last_error.c_str(); }

vpf_status vpf_target_create(const char* name, const char* params_json, vpf_target** out) {
    if (!name || !out) {
        set_error("vpf_target_create: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        nlohmann::json params = nlohmann::json::object();
        if (params_json && std::strlen(params_json) > 0)
            params = nlohmann::json::parse(params_json);
        auto t = targets::make_builtin_target(name, params);
        *out = new vpf_target_s{std::move(t)};
    });
}

void vpf_target_release(vpf_target* t) { delete t; }

int vpf_target_dim(const vpf_target* t) { return t ? t->target->dim : 0; }

double vpf_target_support_radius(const vpf_target* t) {
    return t ? t->target->support_radius : -1.0;
}

double vpf_target_second_moment(const vpf_target* t) {
    return t ? t->target->second_moment : -1.0;
}

vpf_status vpf_target_pdf(const vpf_target* t, const double* x, double* out) {
    if (!t || !x || !out) {
        set_error("vpf_target_pdf: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] { *out = t->target->pdf(to_vec(x, t->target->dim)); });
}

vpf_status vpf_target_sample(const vpf_target* t, int n, uint64_t seed, double* out) {
    if (!t || !out || n < 1) {
        set_error("vpf_target_sample: invalid arguments");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        const Mat s = t->target->sample(n, seed);
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < t->target->dim; ++d) out[i * t->target->dim + d] = s(d, i);
    });
}

vpf_status vpf_score_model_create(const vpf_target* t, vpf_score_model** out) {
    if (!t || !out) {
        set_error("vpf_score_model_create: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        *out = new vpf_score_model_s{std::make_shared<vp::VpScoreModel>(t->target)};
    });
}

void vpf_score_model_release(vpf_score_model* m) { delete m; }

vpf_status vpf_marginal_pdf(const vpf_score_model* m, double t, const double* x, double* out) {
    if (!m || !x || !out) {
        set_error("vpf_marginal_pdf: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] { *out = m->model->marginal_pdf(t, to_vec(x, m->model->dim())); });
}

vpf_status vpf_score(const vpf_score_model* m, double t, const double* x, double* score_out) {
    if (!m || !x || !score_out) {
        set_error("vpf_score: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        const Vec s = m->model->score(t, to_vec(x, m->model->dim()));
        for (int i = 0; i < s.size(); ++i) score_out[i] = s[i];
    });
}

vpf_status vpf_score_jacobian(const vpf_score_model* m, double t, const double* x,
                              double* jac_out) {
    if (!m || !x || !jac_out) {
        set_error("vpf_score_jacobian: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        const Mat j = m->model->score_jacobian(t, to_vec(x, m->model->dim()));
        const int d = m->model->dim();
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) jac_out[r * d + c] = j(r, c);
    });
}

vpf_status vpf_theoretical_lipschitz(const vpf_score_model* m, double t, double horizon,
                                     double* out) {
    if (!m || !out) {
        set_error("vpf_theoretical_lipschitz: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        const auto bound = vp::make_lipschitz_bound(m->model->target(), horizon);
        *out = bound(t);
    });
}

vpf_status vpf_flow_create(const vpf_score_model* m, vpf_flow** out) {
    if (!m || !out) {
        set_error("vpf_flow_create: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        auto field = std::make_shared<flow::FlowField>(flow::FlowField::from_model(m->model));
        *out = new vpf_flow_s{std::move(field), m->model->dim()};
    });
}

void vpf_flow_release(vpf_flow* f) { delete f; }

namespace {
flow::IntegratorConfig make_cfg(double rtol, double atol) {
    flow::IntegratorConfig cfg;
    if (rtol > 0.0) cfg.rtol = rtol;
    if (atol > 0.0) cfg.atol = atol;
    return cfg;
}
}  // namespace

vpf_status vpf_flow_transport(const vpf_flow* f, double from_t, double to_t, const double* x,
                              double rtol, double atol, double* endpoint, double* logdet,
                              double* jac) {
    if (!f || !x || !endpoint) {
        set_error("vpf_flow_transport: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        const auto r = flow::transport(*f->field, from_t, to_t, to_vec(x, f->dim),
                                       make_cfg(rtol, atol));
        for (int i = 0; i < f->dim; ++i) endpoint[i] = r.endpoint[i];
        if (logdet) *logdet = r.logdet;
        if (jac)
            for (int rr = 0; rr < f->dim; ++rr)
                for (int cc = 0; cc < f->dim; ++cc) jac[rr * f->dim + cc] = r.jacobian(rr, cc);
    });
}

vpf_status vpf_flow_pullback_logpdf(const vpf_flow* f, double delta, double T, const double* x,
                                    double rtol, double atol, double* out) {
    if (!f || !x || !out) {
        set_error("vpf_flow_pullback_logpdf: null argument");
        return VPF_ERR_INVALID;
    }
    return guarded([&] {
        *out = flow::pullback_logpdf(*f->field, delta, T, to_vec(x, f->dim),
                                     make_cfg(rtol, atol));
    });
}

vpf_status vpf_run(const char* config_path, const char* out_dir, int threads,
                   int64_t seed_override) {
    if (!config_path) {
        set_error("vpf_run: null config path");
        return VPF_ERR_INVALID;
    }
    experiments::RunOptions opts;
    if (out_dir) opts.out_dir = out_dir;
    opts.threads = threads;
    opts.seed_override = seed_override;
    const int code = experiments::run_config_file(config_path, opts);
    if (code == 0) {
        g_last_error.clear();
        return VPF_OK;
    }
    set_error("vpf_run: experiment failed with exit code " + std::to_string(code) +
              " (details on stderr)");
    return code == 2 ? VPF_ERR_CONFIG : VPF_ERR_NUMERIC;
}

}  // extern "C"
