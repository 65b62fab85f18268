# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled recurrent cell kernels; same contract as ``_fallback``."""

cdef extern from "cellmath.h" nogil:
    void cell_fwd_f32(Py_ssize_t F, const float *z, const float *cp,
                      const float *wi, const float *wf, const float *wo,
                      float *gates, float *c, float *tc, float *h)
    void cell_fwd_f64(Py_ssize_t F, const double *z, const double *cp,
                      const double *wi, const double *wf, const double *wo,
                      double *gates, double *c, double *tc, double *h)
    void cell_bwd_f32(Py_ssize_t F, const float *dh, const float *dc,
                      const float *gates, const float *cp, const float *c, const float *tc,
                      const float *wi, const float *wf, const float *wo,
                      float *dz, float *dcp, float *dwi, float *dwf, float *dwo)
    void cell_bwd_f64(Py_ssize_t F, const double *dh, const double *dc,
                      const double *gates, const double *cp, const double *c, const double *tc,
                      const double *wi, const double *wf, const double *wo,
                      double *dz, double *dcp, double *dwi, double *dwf, double *dwo)

ctypedef fused real:
    float
    double


def cell_forward(real[:, :, :, ::1] z, real[:, :, ::1] c_prev, peep,
                 real[:, :, :, ::1] gates, real[:, :, ::1] c_out,
                 real[:, :, ::1] tanh_c, real[:, :, ::1] h_out):
    cdef Py_ssize_t P = z.shape[0], S = z.shape[1], F = z.shape[3]
    cdef Py_ssize_t p, s
    cdef bint has_peep = peep is not None
    cdef real[:, :, ::1] w
    cdef real *wi = NULL
    cdef real *wf = NULL
    cdef real *wo = NULL
    if has_peep:
        w = peep
    with nogil:
        for p in range(P):
            for s in range(S):
                if has_peep:
                    wi = &w[0, s, 0]
                    wf = &w[1, s, 0]
                    wo = &w[2, s, 0]
                if real is float:
                    cell_fwd_f32(F, &z[p, s, 0, 0], &c_prev[p, s, 0], wi, wf, wo,
                                 &gates[p, s, 0, 0], &c_out[p, s, 0], &tanh_c[p, s, 0], &h_out[p, s, 0])
                else:
                    cell_fwd_f64(F, &z[p, s, 0, 0], &c_prev[p, s, 0], wi, wf, wo,
                                 &gates[p, s, 0, 0], &c_out[p, s, 0], &tanh_c[p, s, 0], &h_out[p, s, 0])


def cell_backward(real[:, :, ::1] dh, real[:, :, ::1] dc, real[:, :, :, ::1] gates,
                  real[:, :, ::1] c_prev, real[:, :, ::1] c, real[:, :, ::1] tanh_c,
                  peep, real[:, :, :, ::1] dz, real[:, :, ::1] dc_prev, dpeep):
    cdef Py_ssize_t P = dh.shape[0], S = dh.shape[1], F = dh.shape[2]
    cdef Py_ssize_t p, s
    cdef bint has_peep = peep is not None
    cdef real[:, :, ::1] w
    cdef real[:, :, ::1] dw
    cdef real *wi = NULL
    cdef real *wf = NULL
    cdef real *wo = NULL
    cdef real *dwi = NULL
    cdef real *dwf = NULL
    cdef real *dwo = NULL
    if has_peep:
        w = peep
        dw = dpeep
    with nogil:
        for p in range(P):
            for s in range(S):
                if has_peep:
                    wi = &w[0, s, 0]
                    wf = &w[1, s, 0]
                    wo = &w[2, s, 0]
                    dwi = &dw[0, s, 0]
                    dwf = &dw[1, s, 0]
                    dwo = &dw[2, s, 0]
                if real is float:
                    cell_bwd_f32(F, &dh[p, s, 0], &dc[p, s, 0], &gates[p, s, 0, 0], &c_prev[p, s, 0],
                                 &c[p, s, 0], &tanh_c[p, s, 0], wi, wf, wo,
                                 &dz[p, s, 0, 0], &dc_prev[p, s, 0], dwi, dwf, dwo)
                else:
                    cell_bwd_f64(F, &dh[p, s, 0], &dc[p, s, 0], &gates[p, s, 0, 0], &c_prev[p, s, 0],
                                 &c[p, s, 0], &tanh_c[p, s, 0], wi, wf, wo,
                                 &dz[p, s, 0, 0], &dc_prev[p, s, 0], dwi, dwf, dwo)
