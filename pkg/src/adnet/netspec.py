"""Network architecture descriptions and the patch-to-dense transform.

A network is a linear chain of conv / maxpool / relu / softmax layers ending
in a 2-channel softmax (class 0 = background, class 1 = target). In patch
mode it maps a field_of_view-sized patch to a single 1x1 classification; the
patch-to-dense transform rewrites it so one forward pass over a whole image
produces the classification for every valid patch position at once: pooling
strides are replaced by stride 1 and every downstream layer's sampling grid
is dilated by the removed stride product. Parameters are shared, never
copied, and outputs match patch-mode evaluation exactly.
"""

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import container, ops
from .errors import FormatError, SpecError

MAGIC = b"ADNSPEC1"

CONV, MAXPOOL, RELU, SOFTMAX = "conv", "maxpool", "relu", "softmax"
KINDS = (CONV, MAXPOOL, RELU, SOFTMAX)


@dataclass(eq=False)
class LayerSpec:
    """One layer. `extent` is the conv kernel extent or pool window;
    `rate` is the dilation rate (zeros inserted between taps)."""
    kind: str
    extent: int | None = None
    out_channels: int | None = None
    stride: int = 1
    rate: int = 0
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in (RELU, SOFTMAX):
            if (self.extent is not None or self.out_channels is not None
                    or self.weights is not None or self.bias is not None):
                raise SpecError(f"{self.kind} layers carry no extent or parameters")
            if self.stride != 1 or self.rate != 0:
                raise SpecError(f"{self.kind} layers carry no stride or dilation")
            return
        if self.extent is None or self.extent < 1:
            raise SpecError(f"{self.kind} needs a positive extent, got {self.extent}")
        if self.stride < 1 or self.rate < 0:
            raise SpecError(f"bad stride/rate on {self.kind}: {self.stride}/{self.rate}")
        if self.kind == CONV:
            if self.out_channels is None or self.out_channels < 1:
                raise SpecError("conv needs positive out_channels")
            if (self.weights is None) != (self.bias is None):
                raise SpecError("conv weights and bias must be set together")
            if self.weights is not None:
                k = self.extent
                if self.weights.ndim != 4 or self.weights.shape[0] != self.out_channels \
                        or self.weights.shape[2:] != (k, k):
                    raise SpecError(
                        f"conv weights shape {self.weights.shape} does not match "
                        f"[{self.out_channels}, in, {k}, {k}]")
                if self.bias.shape != (self.out_channels,):
                    raise SpecError(f"conv bias shape {self.bias.shape} is not "
                                    f"({self.out_channels},)")
        elif self.out_channels is not None or self.weights is not None:
            raise SpecError("maxpool carries no channels or parameters")

    @property
    def effective_extent(self):
        return ops.effective_extent(self.extent, self.rate)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        if (self.kind, self.extent, self.out_channels, self.stride, self.rate) != \
                (other.kind, other.extent, other.out_channels, other.stride, other.rate):
            return False
        for a, b in ((self.weights, other.weights), (self.bias, other.bias)):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


PATCH, DENSE = "patch", "dense"


@dataclass(eq=False)
class NetworkSpec:
    layers: list[LayerSpec] = field(default_factory=list)
    input_channels: int = 1
    mode: str = PATCH

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in (PATCH, DENSE):
            raise SpecError(f"unknown mode {self.mode!r}")
        if self.input_channels < 1:
            raise SpecError("input_channels must be positive")
        if not self.layers or self.layers[-1].kind != SOFTMAX:
            raise SpecError("network must end with a softmax layer")
        channels = self.input_channels
        for i, layer in enumerate(self.layers):
            if layer.kind == SOFTMAX and i != len(self.layers) - 1:
                raise SpecError(f"layer {i}: softmax is only valid as the final layer")
            if layer.kind == CONV:
                if layer.stride != 1:
                    raise SpecError(
                        f"layer {i}: strides are only supported on pooling layers")
                if layer.weights is not None and layer.weights.shape[1] != channels:
                    raise SpecError(
                        f"layer {i}: weights expect {layer.weights.shape[1]} input "
                        f"channels, chain provides {channels}")
                channels = layer.out_channels
            elif layer.kind == MAXPOOL and self.mode == DENSE and layer.stride != 1:
                raise SpecError(f"layer {i}: dense-mode pooling must be unstrided")
        if channels != 2:
            raise SpecError(f"final softmax must see exactly 2 channels, got {channels}")

    @property
    def field_of_view(self):
        """Input extent influencing one output element: back-propagate
        extent 1 through the chain via fov <- (fov-1)*stride + extent."""
        fov = 1
        for layer in reversed(self.layers):
            if layer.kind in (CONV, MAXPOOL):
                fov = (fov - 1) * layer.stride + layer.effective_extent
        return fov

    @property
    def has_params(self):
        convs = [l for l in self.layers if l.kind == CONV]
        return bool(convs) and all(l.weights is not None for l in convs)

    def param_count(self):
        return sum(l.weights.size + l.bias.size
                   for l in self.layers if l.kind == CONV and l.weights is not None)

    def output_shape(self, h, w):
        """Simulate the spatial/channel shape chain for an h x w input."""
        channels, eh, ew = self.input_channels, h, w
        for layer in self.layers:
            if layer.kind in (CONV, MAXPOOL):
                eh = ops.output_extent(eh, layer.extent, layer.stride, layer.rate)
                ew = ops.output_extent(ew, layer.extent, layer.stride, layer.rate)
                if layer.kind == CONV:
                    channels = layer.out_channels
        return channels, eh, ew

    def __eq__(self, other):
        if not isinstance(other, NetworkSpec):
            return NotImplemented
        return (self.mode == other.mode
                and self.input_channels == other.input_channels
                and self.layers == other.layers)


def validate_patch_spec(spec):
    if spec.mode != PATCH:
        raise SpecError(f"expected a patch-mode network, got mode {spec.mode!r}")
    fov = spec.field_of_view
    if spec.output_shape(fov, fov)[1:] != (1, 1):
        raise SpecError(
            f"patch network does not reduce a {fov}x{fov} input to 1x1 output")
    return fov


def patch_to_dense(spec):
    """Rewrite a patch-mode network for dense full-resolution inference.

    A single forward sweep keeps a running sampling factor f (the product of
    pooling strides seen so far): every conv and pool reads taps spaced f
    apart (a layer with native rate r gets combined rate f*(r+1) - 1), every
    pool stride s becomes 1 with f multiplied by s. Parameters are shared
    with the source spec. The result maps an HxW input to the
    (H-fov+1) x (W-fov+1) grid of all patch classifications.
    """
    validate_patch_spec(spec)
    factor = 1
    layers = []
    for layer in spec.layers:
        if layer.kind in (CONV, MAXPOOL):
            combined = factor * (layer.rate + 1) - 1
            new = replace(layer, rate=combined, stride=1)
            if layer.kind == MAXPOOL:
                factor *= layer.stride
        else:
            new = replace(layer)
        layers.append(new)
    return NetworkSpec(layers=layers, input_channels=spec.input_channels, mode=DENSE)


def init_params(spec, seed):
    """Materialize conv parameters: weights uniform in
    +/- sqrt(6 / (fan_in + fan_out)), biases zero. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    channels = spec.input_channels
    for layer in spec.layers:
        if layer.kind == CONV:
            k, co = layer.extent, layer.out_channels
            fan_in, fan_out = channels * k * k, co * k * k
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(co, channels, k, k)).astype(np.float32)
            b = np.zeros(co, dtype=np.float32)
            w.setflags(write=False)
            b.setflags(write=False)
            layers.append(replace(layer, weights=w, bias=b))
            channels = co
        else:
            layers.append(replace(layer))
    return NetworkSpec(layers=layers, input_channels=spec.input_channels, mode=spec.mode)


def from_arch_config(cfg):
    """Build an unparameterized patch-mode spec from a plain dict (the
    architecture config file format): {"input_channels": int, "layers":
    [{"kind": "conv", "extent": k, "out_channels": c, "rate": r}, ...]}."""
    try:
        layers = [LayerSpec(kind=entry["kind"],
                            extent=entry.get("extent"),
                            out_channels=entry.get("out_channels"),
                            stride=entry.get("stride", 1),
                            rate=entry.get("rate", 0))
                  for entry in cfg["layers"]]
        return NetworkSpec(layers=layers,
                           input_channels=cfg.get("input_channels", 1),
                           mode=cfg.get("mode", PATCH))
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed architecture config: {exc}") from exc


def serialize(spec):
    """Encode a parameterized spec into the versioned binary container."""
    if not spec.has_params:
        raise SpecError("cannot serialize a network without materialized parameters")
    blobs = []
    offset = 0
    entries = []
    for layer in spec.layers:
        entry = {"kind": layer.kind}
        if layer.kind in (CONV, MAXPOOL):
            entry.update(extent=layer.extent, stride=layer.stride, rate=layer.rate)
        if layer.kind == CONV:
            entry["out_channels"] = layer.out_channels
            for name, arr in (("weights", layer.weights), ("bias", layer.bias)):
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                entry[name] = {"offset": offset, "shape": list(arr.shape)}
                blobs.append(raw)
                offset += len(raw)
        entries.append(entry)
    header = {"mode": spec.mode, "input_channels": spec.input_channels,
              "layers": entries}
    return container.encode(MAGIC, header, b"".join(blobs))


def deserialize(data):
    header, payload = container.parse(data, MAGIC, crc_first=True)
    try:
        layers = []
        for entry in header["layers"]:
            kw = {"kind": entry["kind"]}
            if entry["kind"] in (CONV, MAXPOOL):
                kw.update(extent=entry["extent"], stride=entry["stride"],
                          rate=entry["rate"])
            if entry["kind"] == CONV:
                kw["out_channels"] = entry["out_channels"]
                for name in ("weights", "bias"):
                    ref = entry[name]
                    shape = tuple(ref["shape"])
                    count = int(np.prod(shape))
                    start = ref["offset"]
                    raw = payload[start:start + 4 * count]
                    if len(raw) != 4 * count:
                        raise FormatError("parameter blob out of range")
                    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                    arr.setflags(write=False)
                    kw[name] = arr
            layers.append(LayerSpec(**kw))
        spec = NetworkSpec(layers=layers, input_channels=header["input_channels"],
                           mode=header["mode"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed network header: {exc}") from exc
    except SpecError as exc:
        raise FormatError(f"inconsistent network on load: {exc}") from exc
    return spec


def save(spec, path):
    data = serialize(spec)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def checksum(spec):
    """Stable provenance id: the serialized container's own CRC32 (the CRC
    of everything before the trailing checksum word), hex."""
    return f"{zlib.crc32(serialize(spec)[:-4]):08x}"
