#ifndef CONFORMAL_KOOPMAN_H
#define CONFORMAL_KOOPMAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CkStatus {
  CK_OK = 0,
  CK_ERR_NULL_POINTER = 1,
  // Bad argument, dimension mismatch or invalid configuration.
  CK_ERR_INPUT = 2,
  // Numerical, synthesis or solver failure.
  CK_ERR_NUMERICAL = 3,
  // File missing, unreadable or malformed.
  CK_ERR_IO = 4,
  CK_ERR_BUFFER_TOO_SMALL = 5,
  CK_ERR_PANIC = 6,
} CkStatus;

// Feedback gain, contraction metric and CRDR parameters.
typedef struct CkController CkController;

// Identified latent model loaded from a `model.json`.
typedef struct CkModel CkModel;

typedef struct CkControllerInfo {
  size_t latent_dim;
  size_t input_dim;
  double gamma;
  double rho;
  double c_v;
  double m_bar;
  double m_under;
  double certificate;
} CkControllerInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length in bytes, including the terminating NUL, of the last error message
// on this thread; 0 when there is none.
size_t ck_last_error_length(void);

// Copies the last error message into `buf`. Returns `CK_ERR_BUFFER_TOO_SMALL`
// when `len` is shorter than [`ck_last_error_length`].
//
// # Safety
// `buf` must point to `len` writable bytes.
enum CkStatus ck_last_error_message(char *buf, size_t len);

// Loads a `model.json` written by `ckoop fit`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CkStatus ck_model_load(const char *path, struct CkModel **out);

// # Safety
// `model` must come from [`ck_model_load`] and not be used afterwards.
void ck_model_free(struct CkModel *model);

// # Safety
// Every pointer must be valid; output pointers may be null to skip them.
enum CkStatus ck_model_dims(const struct CkModel *model,
                            size_t *state_dim,
                            size_t *latent_dim,
                            size_t *input_dim);

// Writes the lifted state of `x` into `z_out` (`z_len` must equal the latent dimension).
//
// # Safety
// `x` must hold `x_len` doubles and `z_out` `z_len`.
enum CkStatus ck_model_lift(const struct CkModel *model,
                            const double *x,
                            size_t x_len,
                            double *z_out,
                            size_t z_len);

// # Safety
// `z` must hold `z_len` doubles and `x_out` `x_len`.
enum CkStatus ck_model_decode(const struct CkModel *model,
                              const double *z,
                              size_t z_len,
                              double *x_out,
                              size_t x_len);

// One latent step `A z + B u`; `z_next` has the length of `z`.
//
// # Safety
// `z` and `z_next` must hold `z_len` doubles, `u` `u_len`.
enum CkStatus ck_model_predict(const struct CkModel *model,
                               const double *z,
                               size_t z_len,
                               const double *u,
                               size_t u_len,
                               double *z_next);

// Synthesizes gain and metric for `(A, B)` with contraction rate `gamma`,
// then attaches the CRDR margin `rho` and slack weight `c_v`.
// `a` is `n×n`, `b` is `n×m`, both row-major.
//
// # Safety
// `a` must hold `n*n` doubles, `b` `n*m`, `out` must be valid.
enum CkStatus ck_controller_synthesize(const double *a,
                                       const double *b,
                                       size_t n,
                                       size_t m,
                                       double gamma,
                                       double rho,
                                       double c_v,
                                       struct CkController **out);

// Loads a `controller.json` written by `ckoop synth`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CkStatus ck_controller_load(const char *path, struct CkController **out);

// # Safety
// `controller` must come from this library and not be used afterwards.
void ck_controller_free(struct CkController *controller);

// # Safety
// Both pointers must be valid.
enum CkStatus ck_controller_info(const struct CkController *controller,
                                 struct CkControllerInfo *info);

// Copies the `m×n` gain row-major into `k_out` (`len` must be `m*n`).
//
// # Safety
// `k_out` must hold `len` doubles.
enum CkStatus ck_controller_gain(const struct CkController *controller, double *k_out, size_t len);

// Nominal feedback `u = u_d − K e`.
//
// # Safety
// `u_d` and `u_out` must hold `u_len` doubles, `e` `e_len`.
enum CkStatus ck_nfc_input(const struct CkController *controller,
                           const double *u_d,
                           size_t u_len,
                           const double *e,
                           size_t e_len,
                           double *u_out);

// One CRDR step on the latent error `e` using the model's `(A, B)`.
// `delta_v` may be null.
//
// # Safety
// `u_d` and `u_out` must hold `u_len` doubles, `e` `e_len`.
enum CkStatus ck_crdr_step(const struct CkController *controller,
                           const struct CkModel *model,
                           const double *u_d,
                           size_t u_len,
                           const double *e,
                           size_t e_len,
                           double *u_out,
                           double *delta_v);

// Split-conformal quantile at miscoverage `delta`. `q_out` is `+inf` when
// there are too few scores; `k_out` (nullable) receives the order-statistic index.
//
// # Safety
// `scores` must hold `len` doubles and `q_out` be valid.
enum CkStatus ck_conformal_quantile(const double *scores,
                                    size_t len,
                                    double delta,
                                    double *q_out,
                                    size_t *k_out);

// Runs every pipeline stage. `config_path`, `preset` and `out_dir` may be
// null; the defaults are the `dubins-paper` preset and `out/`.
//
// # Safety
// Non-null strings must be NUL-terminated. `passed` may be null.
enum CkStatus ck_pipeline_all(const char *config_path,
                              const char *preset,
                              const char *out_dir,
                              bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFORMAL_KOOPMAN_H */
