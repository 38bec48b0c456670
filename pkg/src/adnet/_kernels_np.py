"""Pure-numpy kernels: the fallback backend.

Shapes are NCHW batched; validation happens in adnet.ops, so these assume
well-formed inputs. The accumulation order per output element is fixed to
(in-channel, kernel-row, kernel-column) with the bias added last; the
compiled backend follows the same order, which makes forward outputs
bit-identical between backends.

`threads` is accepted for interface parity and ignored: numpy elementwise
ops are single-threaded, which already satisfies the determinism contract.
"""

import numpy as np

NAME = "python"


def _window(x, kh, kw, stride, dil, oh, ow):
    # view of the input samples feeding output grid position (.,.) for tap (kh,kw)
    r0, c0 = kh * dil, kw * dil
    return x[..., r0:r0 + (oh - 1) * stride + 1:stride,
             c0:c0 + (ow - 1) * stride + 1:stride]


def conv2d_fwd(x, w, b, stride, rate, threads=1):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    dil = rate + 1
    oh = (h - (kh + (kh - 1) * rate)) // stride + 1
    ow = (wid - (kw + (kw - 1) * rate)) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for c in range(cin):
        for i in range(kh):
            for j in range(kw):
                win = _window(x[:, c], i, j, stride, dil, oh, ow)
                out += w[:, c, i, j][None, :, None, None] * win[:, None]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def conv2d_bwd(x, w, gout, stride, rate):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    _, _, oh, ow = gout.shape
    dil = rate + 1
    gb = gout.sum(axis=(0, 2, 3))
    gw = np.zeros_like(w)
    gx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            win = _window(x, i, j, stride, dil, oh, ow)  # [n,cin,oh,ow]
            gw[:, :, i, j] = np.einsum("noij,ncij->oc", gout, win)
            contrib = np.einsum("noij,oc->ncij", gout, w[:, :, i, j])
            r0, c0 = i * dil, j * dil
            gx[:, :, r0:r0 + (oh - 1) * stride + 1:stride,
               c0:c0 + (ow - 1) * stride + 1:stride] += contrib
    return gx, gw, gb


def maxpool2d_fwd(x, window, stride, rate, threads=1, want_argmax=False):
    n, c, h, wid = x.shape
    dil = rate + 1
    oh = (h - (window + (window - 1) * rate)) // stride + 1
    ow = (wid - (window + (window - 1) * rate)) // stride + 1
    best = None
    besti = None
    rows = np.arange(oh) * stride
    cols = np.arange(ow) * stride
    for i in range(window):
        for j in range(window):
            win = _window(x, i, j, stride, dil, oh, ow)
            if want_argmax:
                flat = ((rows + i * dil)[:, None] * wid + (cols + j * dil)[None, :])
                flat = np.broadcast_to(flat, win.shape)
            if best is None:
                best = win.copy()
                if want_argmax:
                    besti = flat.copy()
            else:
                if want_argmax:
                    # strict > keeps the first-encountered maximum on ties
                    mask = win > best
                    besti = np.where(mask, flat, besti)
                    best = np.where(mask, win, best)
                else:
                    best = np.maximum(best, win)
    return (best, besti) if want_argmax else (best, None)


def maxpool2d_bwd(x_shape, argmax, gout):
    n, c, h, wid = x_shape
    gx = np.zeros((n, c, h * wid), dtype=gout.dtype)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(gx, (ni, ci, argmax), gout)
    return gx.reshape(x_shape)
