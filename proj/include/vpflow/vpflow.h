/* vpflow C API: variance-preserving probability-flow transports with exact
 * scores, bi-Lipschitz certificates and experiment orchestration.
 *
 * All functions return vpf_status; on failure, vpf_last_error() yields a
 * thread-local message. Handles are opaque and freed with their _release
 * function. Points are row-major double arrays of length dim (dim is 1 or 2).
 */
#ifndef VPFLOW_H
#define VPFLOW_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vpf_status {
    VPF_OK = 0,
    VPF_ERR_INVALID = 1, /* invalid arguments / unknown names */
    VPF_ERR_CONFIG = 2,  /* invalid experiment configuration (CLI exit 2) */
    VPF_ERR_NUMERIC = 3  /* numerical failure, tail guard, IO (CLI exit 3) */
} vpf_status;

const char* vpf_version(void);
const char* vpf_last_error(void);

/* ---- targets ---- */
typedef struct vpf_target_s vpf_target;

/* name: triangular | two_uniform | cubic_pullback | gmm1d | rings | squares |
 * moons | concentric. params_json: JSON object string or NULL for defaults. */
vpf_status vpf_target_create(const char* name, const char* params_json, vpf_target** out);
void vpf_target_release(vpf_target* t);

int vpf_target_dim(const vpf_target* t);
double vpf_target_support_radius(const vpf_target* t);
double vpf_target_second_moment(const vpf_target* t);
vpf_status vpf_target_pdf(const vpf_target* t, const double* x, double* out);
/* out: n*dim doubles, sample i at out[i*dim .. i*dim+dim-1]. */
vpf_status vpf_target_sample(const vpf_target* t, int n, uint64_t seed, double* out);

/* ---- exact VP score models ---- */
typedef struct vpf_score_model_s vpf_score_model;

vpf_status vpf_score_model_create(const vpf_target* t, vpf_score_model** out);
void vpf_score_model_release(vpf_score_model* m);

vpf_status vpf_marginal_pdf(const vpf_score_model* m, double t, const double* x, double* out);
vpf_status vpf_score(const vpf_score_model* m, double t, const double* x, double* score_out);
/* jac_out: dim*dim row-major. */
vpf_status vpf_score_jacobian(const vpf_score_model* m, double t, const double* x,
                              double* jac_out);
/* Closed-form class bound L(t) with horizon T (constant M_T for A3/A4). */
vpf_status vpf_theoretical_lipschitz(const vpf_score_model* m, double t, double horizon,
                                     double* out);

/* ---- probability flow transports ---- */
typedef struct vpf_flow_s vpf_flow;

vpf_status vpf_flow_create(const vpf_score_model* m, vpf_flow** out);
void vpf_flow_release(vpf_flow* f);

/* endpoint: dim doubles; logdet: 1 double; jac: dim*dim row-major or NULL.
 * rtol/atol <= 0 select the defaults (1e-8 / 1e-10). */
vpf_status vpf_flow_transport(const vpf_flow* f, double from_t, double to_t, const double* x,
                              double rtol, double atol, double* endpoint, double* logdet,
                              double* jac);
vpf_status vpf_flow_pullback_logpdf(const vpf_flow* f, double delta, double T, const double* x,
                                    double rtol, double atol, double* out);

/* ---- experiment runner (the CLI is a thin wrapper over this) ----
 * out_dir: override output directory or NULL; threads: 0 = config/env;
 * seed_override: >= 0 overrides the config seed. Returns VPF_ERR_CONFIG or
 * VPF_ERR_NUMERIC exactly as the CLI exit codes 2/3. */
vpf_status vpf_run(const char* config_path, const char* out_dir, int threads,
                   int64_t seed_override);

#ifdef __cplusplus
}
#endif

#endif /* VPFLOW_H */
