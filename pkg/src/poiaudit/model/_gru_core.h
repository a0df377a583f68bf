/* Elementwise GRU gate math on contiguous rows; written so gcc can vectorize exp. */
#ifndef POIAUDIT_GRU_CORE_H
#define POIAUDIT_GRU_CORE_H

#include <math.h>

static inline double pa_sigmoid(double x) { return 1.0 / (1.0 + exp(-x)); }

/* tanh through exp keeps the loop on the vectorized exp path */
static inline double pa_tanh(double x) { return 2.0 / (1.0 + exp(-2.0 * x)) - 1.0; }

static void pa_gru_fwd_row(int H, const double *restrict a, const double *restrict c,
                           const double *restrict h, double *restrict z, double *restrict r,
                           double *restrict n, double *restrict cn, double *restrict hout)
{
    long j;
    for (j = 0; j < H; j++) {
        double xs = a[j] + c[j];
        double xr = a[H + j] + c[H + j];
        xs = xs > 700.0 ? 700.0 : (xs < -700.0 ? -700.0 : xs);
        xr = xr > 700.0 ? 700.0 : (xr < -700.0 ? -700.0 : xr);
        double zz = pa_sigmoid(xs);
        double rr = pa_sigmoid(xr);
        double cc = c[2 * H + j];
        double xn = a[2 * H + j] + rr * cc;
        xn = xn > 350.0 ? 350.0 : (xn < -350.0 ? -350.0 : xn);
        double nn = pa_tanh(xn);
        z[j] = zz;
        r[j] = rr;
        n[j] = nn;
        cn[j] = cc;
        hout[j] = (1.0 - zz) * nn + zz * h[j];
    }
}

/* g: total gradient reaching h_t (overwritten with the direct part z * g) */
static void pa_gru_bwd_row(int H, double *restrict g, const double *restrict z, const double *restrict r,
                           const double *restrict n, const double *restrict cn, const double *restrict h,
                           double *restrict da, double *restrict dc)
{
    long j;
    for (j = 0; j < H; j++) {
        double gg = g[j], zz = z[j], rr = r[j], nn = n[j];
        double dz = gg * (h[j] - nn) * zz * (1.0 - zz);
        double dan = gg * (1.0 - zz) * (1.0 - nn * nn);
        double dr = dan * cn[j] * rr * (1.0 - rr);
        da[j] = dz;
        da[H + j] = dr;
        da[2 * H + j] = dan;
        dc[j] = dz;
        dc[H + j] = dr;
        dc[2 * H + j] = dan * rr;
        g[j] = gg * zz;
    }
}

static void pa_adam(long n, double *restrict w, const double *restrict g, double *restrict m,
                    double *restrict v, double lr, double b1, double b2, double eps,
                    double c1, double c2)
{
    long i;
    for (i = 0; i < n; i++) {
        double gi = g[i];
        double mi = b1 * m[i] + (1.0 - b1) * gi;
        double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
        m[i] = mi;
        v[i] = vi;
        w[i] -= lr * (mi / c1) / (sqrt(vi / c2) + eps);
    }
}

#endif
