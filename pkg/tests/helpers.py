"""Shared test utilities: random network generation and the independent
brute-force oracles the library is checked against. Oracles here never call
the code paths they verify."""

import numpy as np

from adnet import netspec, ops


# ---------------------------------------------------------------- networks

def random_patch_net(rng, max_convs=4, max_pools=2, max_channels=8,
                     fov_cap=33, max_params=None, dilations=(0, 0, 0, 1),
                     input_channels=1):
    """Random valid patch-mode net: 1..max_convs convs (the last always maps
    to 2 channels), 0..max_pools stride-2 pools, optional relus, final
    softmax. Redraws until fov and parameter-count caps hold."""
    while True:
        n_convs = int(rng.integers(1, max_convs + 1))
        n_pools = int(rng.integers(0, max_pools + 1))
        tokens = ["conv"] * (n_convs - 1) + ["pool"] * n_pools
        tokens = [tokens[i] for i in rng.permutation(len(tokens))]
        layers = []
        for tok in tokens:
            if tok == "conv":
                layers.append(netspec.LayerSpec(
                    "conv",
                    extent=int(rng.integers(1, 5)),
                    out_channels=int(rng.integers(1, max_channels + 1)),
                    rate=int(rng.choice(dilations))))
                if rng.random() < 0.6:
                    layers.append(netspec.LayerSpec("relu"))
            else:
                layers.append(netspec.LayerSpec("maxpool", extent=2, stride=2))
        layers.append(netspec.LayerSpec(
            "conv", extent=int(rng.integers(1, 4)), out_channels=2,
            rate=int(rng.choice(dilations))))
        layers.append(netspec.LayerSpec("softmax"))
        spec = netspec.NetworkSpec(layers, input_channels=input_channels)
        if spec.field_of_view > fov_cap:
            continue
        spec = netspec.init_params(spec, seed=int(rng.integers(0, 2 ** 31)))
        if max_params is not None and spec.param_count() > max_params:
            continue
        return spec


def cast_spec(spec, dtype):
    """Copy of a parameterized spec with parameters cast to dtype."""
    from dataclasses import replace
    layers = []
    for layer in spec.layers:
        if layer.kind == "conv" and layer.weights is not None:
            layers.append(replace(layer, weights=layer.weights.astype(dtype),
                                  bias=layer.bias.astype(dtype)))
        else:
            layers.append(replace(layer))
    return netspec.NetworkSpec(layers, spec.input_channels, spec.mode)


# ------------------------------------------------------- tensor-op oracles

def zero_stuff_by_hand(kernel, rate):
    """Insert `rate` zeros between taps with explicit loops (independent of
    ops.zero_stuff)."""
    co, ci, kh, kw = kernel.shape
    eh = kh + (kh - 1) * rate
    ew = kw + (kw - 1) * rate
    out = np.zeros((co, ci, eh, ew), dtype=kernel.dtype)
    for a in range(co):
        for b in range(ci):
            for i in range(kh):
                for j in range(kw):
                    out[a, b, i * (rate + 1), j * (rate + 1)] = kernel[a, b, i, j]
    return out


def conv2d_loops(x, w, b, stride, rate):
    """Triple-loop valid convolution in float64 (shape/value oracle)."""
    ci, h, wid = x.shape
    co, _, kh, kw = w.shape
    d = rate + 1
    oh = (h - (kh + (kh - 1) * rate)) // stride + 1
    ow = (wid - (kw + (kw - 1) * rate)) // stride + 1
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(ci):
                    for fi in range(kh):
                        for fj in range(kw):
                            acc += float(w[o, c, fi, fj]) * float(
                                x[c, i * stride + fi * d, j * stride + fj * d])
                out[o, i, j] = acc + float(b[o])
    return out


# -------------------------------------------------- connected-compon oracle

_OFFSETS = {
    "face4": [(0, 0, 1), (0, 1, 0)],
    "full8": [(0, 0, 1), (0, 1, -1), (0, 1, 0), (0, 1, 1)],
    "face6": [(0, 0, 1), (0, 1, 0), (1, 0, 0)],
    "full26": [(dz, dy, dx)
               for dz in (0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) > (0, 0, 0)],
}


class DSU:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def cc_bruteforce(binary, connectivity):
    """Union-find over all neighbor pairs; ids in raster first-encounter
    order. Returns (label_map, sizes dict)."""
    binary = np.asarray(binary) != 0
    z, h, w = binary.shape
    flat = lambda p: (p[0] * h + p[1]) * w + p[2]  # noqa: E731
    dsu = DSU(z * h * w)
    for zz in range(z):
        for yy in range(h):
            for xx in range(w):
                if not binary[zz, yy, xx]:
                    continue
                for dz, dy, dx in _OFFSETS[connectivity]:
                    nz, ny, nx = zz + dz, yy + dy, xx + dx
                    if 0 <= nz < z and 0 <= ny < h and 0 <= nx < w \
                            and binary[nz, ny, nx]:
                        dsu.union(flat((zz, yy, xx)), flat((nz, ny, nx)))
    labels = np.zeros((z, h, w), dtype=np.int32)
    ids = {}
    sizes = {}
    for zz in range(z):
        for yy in range(h):
            for xx in range(w):
                if not binary[zz, yy, xx]:
                    continue
                root = dsu.find(flat((zz, yy, xx)))
                if root not in ids:
                    ids[root] = len(ids) + 1
                k = ids[root]
                labels[zz, yy, xx] = k
                sizes[k] = sizes.get(k, 0) + 1
    return labels, sizes


def match_bruteforce(pred_map, truth_map, min_overlap):
    """All-pairs overlap enumeration for object matching."""
    overlaps = {}
    for p, t in zip(pred_map.ravel().tolist(), truth_map.ravel().tolist()):
        if p and t:
            overlaps[(p, t)] = overlaps.get((p, t), 0) + 1
    qualifying = {pt for pt, n in overlaps.items() if n >= min_overlap}
    detected = {t for _, t in qualifying}
    matched = {p for p, _ in qualifying}
    n_pred = int(pred_map.max())
    n_truth = int(truth_map.max())
    tp = len(detected)
    return tp, n_pred - len(matched), n_truth - tp


# --------------------------------------------------------- gradient oracle

def loss_by_forward(spec, xs, ys):
    """Cross-entropy of the net on a batch, computed with a test-local
    forward pass (ops only) and log-sum-exp; independent of
    training._forward_cached/backward."""
    n = xs.shape[0]
    total = 0.0
    for i in range(n):
        x = xs[i]
        for layer in spec.layers[:-1]:
            if layer.kind == "conv":
                x = ops.conv2d(x, layer.weights, layer.bias,
                               stride=layer.stride, rate=layer.rate, threads=1)
            elif layer.kind == "maxpool":
                x = ops.maxpool2d(x, layer.extent, layer.stride, layer.rate,
                                  threads=1)
            elif layer.kind == "relu":
                x = ops.relu(x)
        z = x[:, 0, 0]
        m = z.max()
        total += float(np.log(np.exp(z - m).sum()) + m - z[ys[i]])
    return total / n


def fd_safe_instance(spec, xs, margin=2e-4):
    """True when no relu pre-activation sits within `margin` of its kink and
    no maxpool window has a top-two gap below `margin`, for every sample.
    Central differences are only a valid oracle away from such kinks: a
    perturbation that flips a relu sign or a pool argmax measures the wrong
    one-sided slope."""
    for i in range(xs.shape[0]):
        x = xs[i]
        for layer in spec.layers[:-1]:
            if layer.kind == "conv":
                x = ops.conv2d(x, layer.weights, layer.bias,
                               stride=layer.stride, rate=layer.rate, threads=1)
            elif layer.kind == "relu":
                if np.abs(x).min() < margin:
                    return False
                x = ops.relu(x)
            elif layer.kind == "maxpool":
                k, s, d = layer.extent, layer.stride, layer.rate + 1
                c, h, w = x.shape
                oh = (h - (k + (k - 1) * layer.rate)) // s + 1
                ow = (w - (k + (k - 1) * layer.rate)) // s + 1
                if k > 1:
                    taps = np.stack([x[:, fi * d:fi * d + (oh - 1) * s + 1:s,
                                       fj * d:fj * d + (ow - 1) * s + 1:s]
                                     for fi in range(k) for fj in range(k)])
                    top2 = np.sort(taps, axis=0)[-2:]
                    if (top2[1] - top2[0]).min() < margin:
                        return False
                x = ops.maxpool2d(x, k, s, layer.rate, threads=1)
    return True


def draw_gradcheck_instance(rng, batch=3, margin=2e-4, max_draws=60, **net_kw):
    """(float64 spec, patch batch, labels) redrawn until the instance is
    finite-difference-safe."""
    for _ in range(max_draws):
        spec = cast_spec(random_patch_net(rng, **net_kw), np.float64)
        fov = spec.field_of_view
        xs = rng.random((batch, spec.input_channels, fov, fov))
        ys = rng.integers(0, 2, size=batch)
        if fd_safe_instance(spec, xs, margin):
            return spec, xs, ys
    raise AssertionError("could not draw a kink-free gradcheck instance")


def numeric_gradients(spec, xs, ys, eps=1e-5):
    """Central finite differences of loss_by_forward w.r.t. every conv
    parameter. Returns per-layer {"weights": gw, "bias": gb} like
    training.backward.

    eps=1e-5 in float64: truncation error O(eps^2)=1e-10 and rounding noise
    ULP(loss)/(2 eps) ~ 1e-11 both sit far below the comparison tolerances,
    and the chance of a perturbation crossing a relu/pool kink is small
    (and excluded up front by fd_safe_instance)."""
    from dataclasses import replace
    grads = [None] * len(spec.layers)
    for li, layer in enumerate(spec.layers):
        if layer.kind != "conv":
            continue
        gw = np.zeros_like(layer.weights)
        gb = np.zeros_like(layer.bias)
        for name, arr, g in (("weights", layer.weights, gw),
                             ("bias", layer.bias, gb)):
            it = np.ndindex(arr.shape)
            for idx in it:
                bumped = {}
                for sign in (+1, -1):
                    pert = arr.copy()
                    pert[idx] += sign * eps
                    layers = list(spec.layers)
                    layers[li] = replace(layer, **{name: pert})
                    probe = netspec.NetworkSpec(layers, spec.input_channels,
                                                spec.mode)
                    bumped[sign] = loss_by_forward(probe, xs, ys)
                g[idx] = (bumped[+1] - bumped[-1]) / (2 * eps)
        grads[li] = {"weights": gw, "bias": gb}
    return grads
