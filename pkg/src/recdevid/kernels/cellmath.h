/* Row kernels for the peephole LSTM cell.  Each call handles one contiguous
 * row of F cells; the restrict-qualified loops vectorize (with libmvec expf/exp
 * under -ffast-math).  wi/wf/wo may be NULL for a plain LSTM. */
#ifndef RECDEVID_CELLMATH_H
#define RECDEVID_CELLMATH_H

#include <math.h>
#include <stddef.h>

#define CELL_DEFINE(T, SUFFIX, EXP, LIM)                                          \
static inline T tanh_##SUFFIX(T x) {                                              \
    x = x < -LIM ? -LIM : (x > LIM ? LIM : x);                                    \
    return (T)1 - (T)2 / (EXP((T)2 * x) + (T)1);                                  \
}                                                                                 \
static inline void cell_fwd_##SUFFIX(                                             \
        ptrdiff_t F, const T *restrict z, const T *restrict cp,                   \
        const T *restrict wi, const T *restrict wf, const T *restrict wo,        \
        T *restrict gates, T *restrict c, T *restrict tc, T *restrict h) {        \
    const T *zi = z, *zf = z + F, *zo = z + 2 * F, *zg = z + 3 * F;               \
    T *gi = gates, *gf = gates + F, *go = gates + 2 * F, *gg = gates + 3 * F;     \
    if (wi) {                                                                     \
        for (ptrdiff_t k = 0; k < F; k++) {                                       \
            T i = (T)0.5 * ((T)1 + tanh_##SUFFIX((T)0.5 * (zi[k] + wi[k] * cp[k]))); \
            T f = (T)0.5 * ((T)1 + tanh_##SUFFIX((T)0.5 * (zf[k] + wf[k] * cp[k]))); \
            T g = tanh_##SUFFIX(zg[k]);                                           \
            T cc = f * cp[k] + i * g;                                             \
            T o = (T)0.5 * ((T)1 + tanh_##SUFFIX((T)0.5 * (zo[k] + wo[k] * cc))); \
            T t = tanh_##SUFFIX(cc);                                              \
            gi[k] = i; gf[k] = f; go[k] = o; gg[k] = g;                           \
            c[k] = cc; tc[k] = t; h[k] = o * t;                                   \
        }                                                                         \
    } else {                                                                      \
        for (ptrdiff_t k = 0; k < F; k++) {                                       \
            T i = (T)0.5 * ((T)1 + tanh_##SUFFIX((T)0.5 * zi[k]));                \
            T f = (T)0.5 * ((T)1 + tanh_##SUFFIX((T)0.5 * zf[k]));                \
            T g = tanh_##SUFFIX(zg[k]);                                           \
            T cc = f * cp[k] + i * g;                                             \
            T o = (T)0.5 * ((T)1 + tanh_##SUFFIX((T)0.5 * zo[k]));                \
            T t = tanh_##SUFFIX(cc);                                              \
            gi[k] = i; gf[k] = f; go[k] = o; gg[k] = g;                           \
            c[k] = cc; tc[k] = t; h[k] = o * t;                                   \
        }                                                                         \
    }                                                                             \
}                                                                                 \
static inline void cell_bwd_##SUFFIX(                                             \
        ptrdiff_t F, const T *restrict dh, const T *restrict dc,                  \
        const T *restrict gates, const T *restrict cp, const T *restrict c,       \
        const T *restrict tc,                                                     \
        const T *restrict wi, const T *restrict wf, const T *restrict wo,        \
        T *restrict dz, T *restrict dcp,                                          \
        T *restrict dwi, T *restrict dwf, T *restrict dwo) {                      \
    const T *gi = gates, *gf = gates + F, *go = gates + 2 * F, *gg = gates + 3 * F; \
    T *di = dz, *df = dz + F, *dO = dz + 2 * F, *dg = dz + 3 * F;                 \
    for (ptrdiff_t k = 0; k < F; k++) {                                           \
        T i = gi[k], f = gf[k], o = go[k], g = gg[k], t = tc[k];                  \
        T dao = dh[k] * t * o * ((T)1 - o);                                       \
        T dct = dc[k] + dh[k] * o * ((T)1 - t * t);                               \
        if (wi) dct += dao * wo[k];                                               \
        T dai = dct * g * i * ((T)1 - i);                                         \
        T daf = dct * cp[k] * f * ((T)1 - f);                                     \
        di[k] = dai; df[k] = daf; dO[k] = dao;                                    \
        dg[k] = dct * i * ((T)1 - g * g);                                         \
        if (wi) {                                                                 \
            dcp[k] = dct * f + dai * wi[k] + daf * wf[k];                         \
            dwi[k] += dai * cp[k];                                                \
            dwf[k] += daf * cp[k];                                                \
            dwo[k] += dao * c[k];                                                 \
        } else {                                                                  \
            dcp[k] = dct * f;                                                     \
        }                                                                         \
    }                                                                             \
}

CELL_DEFINE(float, f32, expf, 15.0f)
CELL_DEFINE(double, f64, exp, 30.0)

#endif
