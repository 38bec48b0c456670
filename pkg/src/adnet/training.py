"""Toy-scale supervised training of the patch-mode network: class-balanced
patch sampling, cross-entropy, SGD with momentum (Adam optional),
finite-difference-checkable backprop, and periodic dense-mode validation.

Training quality at full scale is a non-goal; this exists to exercise the
whole pipeline end-to-end and to prove that parameter updates never break
the patch/dense equivalence.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics, netspec, ops
from .errors import DataError, SpecError, TrainingDiverged
from .inference import predict_volume


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    steps: int = 1000
    positive_fraction: float = 0.5
    seed: int = 0
    validation_interval: int = 100
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DataError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise DataError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.steps < 1 or self.validation_interval < 1:
            raise DataError("batch_size, steps, validation_interval must be positive")
        if not 0 < self.positive_fraction < 1:
            raise DataError("positive_fraction must be in (0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainLog:
    """Per-validation-interval records."""
    rows: list = field(default_factory=list)  # (step, loss, val_f1, seconds)

    def add(self, step, loss, val_f1, seconds):
        if self.rows and step <= self.rows[-1][0]:
            raise DataError("log steps must be strictly increasing")
        self.rows.append((int(step), float(loss), float(val_f1), float(seconds)))

    def to_csv(self):
        lines = ["step,loss,val_f1,seconds"]
        lines += [f"{s},{l:.9g},{f:.9g},{t:.6g}" for s, l, f, t in self.rows]
        return "\n".join(lines) + "\n"


class PatchSampler:
    """Draws class-balanced batches of field-of-view patches whose center
    voxel carries the class label. Positions are uniform within each class;
    everything is deterministic given the generator state."""

    def __init__(self, volume, labels, fov, input_channels=1):
        if volume.dims != labels.dims:
            raise DataError(f"volume dims {volume.dims} != label dims {labels.dims}")
        z, h, w = volume.dims
        c = input_channels
        if z < c or h < fov or w < fov:
            raise DataError(f"volume {volume.dims} too small for fov {fov} "
                            f"with {c} input channels")
        self.volume = volume
        self.fov = fov
        self.channels = c
        off = (fov - 1) // 2
        zoff = (c - 1) // 2
        interior = labels.data[zoff:z - c + 1 + zoff,
                               off:off + h - fov + 1,
                               off:off + w - fov + 1]
        pos = np.argwhere(interior == 1) + (zoff, off, off)
        neg = np.argwhere(interior == 0) + (zoff, off, off)
        if len(pos) == 0:
            raise DataError("no positive voxels in the valid-center region")
        if len(neg) == 0:
            raise DataError("no negative voxels in the valid-center region")
        self.pos, self.neg = pos, neg
        self.off, self.zoff = off, zoff

    def batch(self, batch_size, positive_fraction, rng):
        n_pos = int(round(positive_fraction * batch_size))
        n_pos = min(max(n_pos, 0), batch_size)
        picks = [self.pos[rng.integers(0, len(self.pos), size=n_pos)],
                 self.neg[rng.integers(0, len(self.neg), size=batch_size - n_pos)]]
        centers = np.concatenate(picks)
        ys = np.concatenate([np.ones(n_pos, dtype=np.int64),
                             np.zeros(batch_size - n_pos, dtype=np.int64)])
        fov, c = self.fov, self.channels
        xs = np.empty((batch_size, c, fov, fov), dtype=np.float32)
        for i, (cz, cy, cx) in enumerate(centers):
            z0, y0, x0 = cz - self.zoff, cy - self.off, cx - self.off
            xs[i] = self.volume.data[z0:z0 + c, y0:y0 + fov, x0:x0 + fov]
        return xs, ys


def sample_batch(volume, labels, fov, config, rng, input_channels=1):
    """One-shot convenience over PatchSampler."""
    sampler = PatchSampler(volume, labels, fov, input_channels)
    return sampler.batch(config.batch_size, config.positive_fraction, rng)


def _forward_cached(spec, x, threads=1):
    """Run all layers except the final softmax on a batch, keeping what the
    backward pass needs. Returns (caches, logits[batch, 2])."""
    caches = []
    for layer in spec.layers[:-1]:
        if layer.kind == netspec.CONV:
            out = ops.conv2d_batch(x, layer.weights, layer.bias,
                                   stride=layer.stride, rate=layer.rate,
                                   threads=threads)
            caches.append(("conv", x, layer))
        elif layer.kind == netspec.MAXPOOL:
            out, argmax = ops.maxpool2d_batch(x, layer.extent, layer.stride,
                                              layer.rate, threads, want_argmax=True)
            caches.append(("maxpool", x.shape, argmax))
        elif layer.kind == netspec.RELU:
            out = np.maximum(x, x.dtype.type(0))
            caches.append(("relu", x, None))
        else:
            raise SpecError("softmax is only supported as the final layer")
        x = out
    if x.shape[2:] != (1, 1):
        raise SpecError(f"training batches must reduce to 1x1 outputs, "
                        f"got spatial {x.shape[2:]}")
    return caches, x[:, :, 0, 0]


def _loss_and_dlogits(logits, ys):
    """Mean cross-entropy of softmax(logits) against integer labels, with
    the combined softmax+cross-entropy gradient. Computed from logits via
    log-sum-exp so saturated probabilities cannot produce log(0)."""
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = -logp[np.arange(n), ys].mean()
    dlogits = ez / sez
    dlogits[np.arange(n), ys] -= 1.0
    return float(loss), (dlogits / n).astype(logits.dtype)


def backward(spec, xs, ys, threads=1):
    """Gradients of the mean cross-entropy over a patch batch with respect
    to every conv weight and bias. Returns (grads, loss) where grads is a
    per-layer list ({"weights": gw, "bias": gb} for convs, None otherwise)."""
    if not spec.has_params:
        raise SpecError("backward needs a network with materialized parameters")
    caches, logits = _forward_cached(spec, xs, threads)
    loss, dlogits = _loss_and_dlogits(logits, ys)
    g = dlogits[:, :, None, None]
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 2, -1, -1):
        kind, cache, extra = caches[i]
        if kind == "conv":
            layer = extra
            g, gw, gb = ops.conv2d_backward(cache, layer.weights, g,
                                            stride=layer.stride, rate=layer.rate)
            grads[i] = {"weights": gw, "bias": gb}
        elif kind == "maxpool":
            g = ops.maxpool2d_backward(cache, extra, g)
        else:
            g = g * (cache > 0)
    return grads, loss


def _with_params(spec, params):
    """New spec sharing structure, with conv layer i's parameters replaced
    by params[i] = (weights, bias)."""
    layers = []
    for i, layer in enumerate(spec.layers):
        if i in params:
            w, b = params[i]
            w.setflags(write=False)
            b.setflags(write=False)
            layers.append(replace(layer, weights=w, bias=b))
        else:
            layers.append(layer)
    return netspec.NetworkSpec(layers=layers, input_channels=spec.input_channels,
                               mode=spec.mode)


class _SGD:
    def __init__(self, params, lr, momentum):
        self.lr, self.mu = np.float32(lr), np.float32(momentum)
        self.vel = {i: (np.zeros_like(w), np.zeros_like(b))
                    for i, (w, b) in params.items()}

    def step(self, params, grads, t):
        out = {}
        for i, (w, b) in params.items():
            vw, vb = self.vel[i]
            vw = self.mu * vw - self.lr * grads[i]["weights"]
            vb = self.mu * vb - self.lr * grads[i]["bias"]
            self.vel[i] = (vw, vb)
            out[i] = (w + vw, b + vb)
        return out


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {i: (np.zeros_like(w), np.zeros_like(b))
                  for i, (w, b) in params.items()}
        self.v = {i: (np.zeros_like(w), np.zeros_like(b))
                  for i, (w, b) in params.items()}

    def step(self, params, grads, t):
        out = {}
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for i, (w, b) in params.items():
            new = []
            for j, (p, g) in enumerate(((w, grads[i]["weights"]),
                                        (b, grads[i]["bias"]))):
                m = self.b1 * self.m[i][j] + (1 - self.b1) * g
                v = self.b2 * self.v[i][j] + (1 - self.b2) * g * g
                if j == 0:
                    self.m[i] = (m, self.m[i][1])
                    self.v[i] = (v, self.v[i][1])
                else:
                    self.m[i] = (self.m[i][0], m)
                    self.v[i] = (self.v[i][0], v)
                upd = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                new.append(upd.astype(p.dtype))
            out[i] = tuple(new)
        return out


def _validation_f1(spec, val_volume, val_labels, threads=1):
    dense = netspec.patch_to_dense(spec)
    pmap = predict_volume(dense, val_volume, netspec.DENSE, threads=threads)
    report = metrics.pr_curve(pmap, val_labels, thresholds=[0.5],
                              mode=metrics.VOXEL)
    return report.best.f1


def train(spec, train_volume, train_labels, val_volume, val_labels, config,
          threads=1, checkpoint_hook=None):
    """SGD training of a patch network with periodic dense-mode validation;
    returns (spec with the best-validation-F1 parameters, TrainLog).

    Deterministic: identical config and seed reproduce identical parameters
    and losses. Reads only the supplied train/validation data.
    """
    if not spec.has_params:
        spec = netspec.init_params(spec, config.seed)
    netspec.validate_patch_spec(spec)
    fov = spec.field_of_view
    sampler = PatchSampler(train_volume, train_labels, fov, spec.input_channels)
    rng = np.random.default_rng(config.seed)

    params = {i: (layer.weights, layer.bias)
              for i, layer in enumerate(spec.layers) if layer.kind == netspec.CONV}
    opt = (_SGD(params, config.learning_rate, config.momentum)
           if config.optimizer == "sgd"
           else _Adam(params, config.learning_rate))

    log = TrainLog()
    best_f1, best_params = -1.0, dict(params)
    t0 = time.perf_counter()
    interval_losses = []
    current = spec
    for step in range(1, config.steps + 1):
        xs, ys = sampler.batch(config.batch_size, config.positive_fraction, rng)
        grads, loss = backward(current, xs, ys, threads)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite training loss at step {step} "
                f"(learning rate {config.learning_rate}, optimizer {config.optimizer})")
        interval_losses.append(loss)
        params = opt.step(params, grads, step)
        current = _with_params(spec, params)
        if step % config.validation_interval == 0 or step == config.steps:
            val_f1 = _validation_f1(current, val_volume, val_labels, threads)
            log.add(step, float(np.mean(interval_losses)), val_f1,
                    time.perf_counter() - t0)
            interval_losses = []
            if val_f1 > best_f1:
                best_f1, best_params = val_f1, dict(params)
            if checkpoint_hook is not None:
                checkpoint_hook(step, current)
    return _with_params(spec, best_params), log


def train_from_manifest(manifest, spec, config, threads=1, checkpoint_hook=None):
    """Train using the manifest's train and validation splits (the test
    split is never touched here)."""
    train_vol, train_lab = manifest.load_split("train")
    val_vol, val_lab = manifest.load_split("validation")
    return train(spec, train_vol, train_lab, val_vol, val_lab, config,
                 threads=threads, checkpoint_hook=checkpoint_hook)
