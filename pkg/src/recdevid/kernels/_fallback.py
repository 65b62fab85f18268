"""Pure-numpy recurrent cell kernels (reference and fallback backend).

Layout for every array: ``P`` independent rows (batch), ``S`` spatial cells,
``F`` features.  Gate pre-activations ``z`` are ``(P, S, 4, F)`` in the order
input, forget, output, candidate.  Peephole weights are ``(3, S, F)`` for
the input, forget and output gates; pass ``None`` for a plain LSTM.
"""
from __future__ import annotations

import numpy as np


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cell_forward(z, c_prev, peep, gates, c_out, tanh_c, h_out):
    """One step of the peephole LSTM cell, written into preallocated outputs.

    ``gates`` receives the post-activation i, f, o, g in place of ``z``'s layout.
    """
    zi, zf, zo, zg = z[:, :, 0], z[:, :, 1], z[:, :, 2], z[:, :, 3]
    if peep is not None:
        zi = zi + peep[0] * c_prev
        zf = zf + peep[1] * c_prev
    i = _sig(zi)
    f = _sig(zf)
    g = np.tanh(zg)
    c = f * c_prev + i * g
    if peep is not None:
        zo = zo + peep[2] * c
    o = _sig(zo)
    tc = np.tanh(c)
    gates[:, :, 0] = i
    gates[:, :, 1] = f
    gates[:, :, 2] = o
    gates[:, :, 3] = g
    c_out[...] = c
    tanh_c[...] = tc
    h_out[...] = o * tc


def cell_backward(dh, dc, gates, c_prev, c, tanh_c, peep, dz, dc_prev, dpeep):
    """Reverse of :func:`cell_forward`.

    ``dh`` is the total gradient reaching ``h_t``; ``dc`` the carry from step
    t+1.  Writes ``dz`` and ``dc_prev``; accumulates into ``dpeep`` if given.
    """
    i, f, o, g = gates[:, :, 0], gates[:, :, 1], gates[:, :, 2], gates[:, :, 3]
    dao = dh * tanh_c * o * (1.0 - o)
    dct = dc + dh * o * (1.0 - tanh_c * tanh_c)
    if peep is not None:
        dct = dct + dao * peep[2]
    dai = dct * g * i * (1.0 - i)
    daf = dct * c_prev * f * (1.0 - f)
    dzg = dct * i * (1.0 - g * g)
    dcp = dct * f
    if peep is not None:
        dcp = dcp + dai * peep[0] + daf * peep[1]
        dpeep[0] += (dai * c_prev).sum(axis=0)
        dpeep[1] += (daf * c_prev).sum(axis=0)
        dpeep[2] += (dao * c).sum(axis=0)
    dz[:, :, 0] = dai
    dz[:, :, 1] = daf
    dz[:, :, 2] = dao
    dz[:, :, 3] = dzg
    dc_prev[...] = dcp
