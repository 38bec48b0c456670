"""The two application modes and the benchmark harness.

Patch mode slides the classifier over the image, re-extracting and
re-classifying a field-of-view patch per position: it is the ground-truth
oracle (and the wasteful baseline). Dense mode runs the converted network
once over the whole image and produces the same probabilities for every
valid position in a single pass.
"""

import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import container, netspec, ops
from .backend import available_backends, backend_name, resolve_threads
from .errors import DataError, FormatError, ShapeError, SpecError

PROB_MAGIC = b"ADNPROB1"


@dataclass
class ProbabilityMap:
    """Per-voxel probability of the target class on the valid (cropped)
    grid. data is [slices, rows, cols] float32 in [0, 1]; origin_offset is
    the in-plane (fov-1)//2 border into the source volume; z_offset is the
    leading slices skipped when the network consumes a slice stack."""
    data: np.ndarray
    origin_offset: int
    z_offset: int = 0
    source_volume_id: str = ""
    network_checksum: str = ""
    slice_range: tuple | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"probability map must be 3d, got {self.data.ndim}d")

    @property
    def dims(self):
        return tuple(self.data.shape)


def save_map(pmap, path):
    header = {"dims": list(pmap.dims),
              "origin_offset": pmap.origin_offset,
              "z_offset": pmap.z_offset,
              "source_volume_id": pmap.source_volume_id,
              "network_checksum": pmap.network_checksum,
              "slice_range": list(pmap.slice_range) if pmap.slice_range else None}
    payload = np.ascontiguousarray(pmap.data, dtype="<f4").tobytes()
    data = container.encode(PROB_MAGIC, header, payload)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_map(path):
    with open(path, "rb") as fh:
        data = fh.read()
    header, payload = container.parse(data, PROB_MAGIC, crc_first=True)
    try:
        dims = tuple(header["dims"])
        count = int(np.prod(dims))
        if len(payload) != 4 * count:
            raise FormatError(f"payload holds {len(payload)} bytes, "
                              f"dims {dims} need {4 * count}")
        values = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        sr = header.get("slice_range")
        return ProbabilityMap(values, header["origin_offset"],
                              header.get("z_offset", 0),
                              header.get("source_volume_id", ""),
                              header.get("network_checksum", ""),
                              tuple(sr) if sr else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed probability map header: {exc}") from exc


def _run_layers(spec, x, threads):
    for layer in spec.layers:
        if layer.kind == netspec.CONV:
            x = ops.conv2d(x, layer.weights, layer.bias,
                           stride=layer.stride, rate=layer.rate, threads=threads)
        elif layer.kind == netspec.MAXPOOL:
            x = ops.maxpool2d(x, layer.extent, layer.stride, layer.rate, threads)
        elif layer.kind == netspec.RELU:
            x = ops.relu(x)
        else:
            x = ops.softmax_channels(x)
    return x


def _check_slice(spec, image, fov):
    if image.ndim != 3 or image.shape[0] != spec.input_channels:
        raise ShapeError(f"slice must be [{spec.input_channels}, h, w], "
                         f"got shape {tuple(image.shape)}")
    if image.shape[1] < fov or image.shape[2] < fov:
        raise ShapeError(f"slice {image.shape[1]}x{image.shape[2]} is smaller "
                         f"than the {fov}x{fov} field of view")


def valid_centers(fov, h, w):
    """All patch centers with full field-of-view context, raster order."""
    off = (fov - 1) // 2
    return [(r, c) for r in range(off, off + h - fov + 1)
            for c in range(off, off + w - fov + 1)]


def apply_patchwise(spec, image, positions=None, threads=None):
    """Sliding-window evaluation: extract the fov x fov patch around each
    center position and run the patch network on it. Returns {(row, col):
    probability of class 1}. This is the oracle dense mode is checked
    against."""
    fov = netspec.validate_patch_spec(spec)
    _check_slice(spec, image, fov)
    h, w = image.shape[1:]
    off = (fov - 1) // 2
    if positions is None:
        positions = valid_centers(fov, h, w)
    out = {}
    for row, col in positions:
        r0, c0 = row - off, col - off
        if not (0 <= r0 <= h - fov and 0 <= c0 <= w - fov):
            raise ShapeError(f"position ({row}, {col}) is outside the valid-center "
                             f"region for fov {fov} on {h}x{w}")
        probs = _run_layers(spec, np.ascontiguousarray(image[:, r0:r0 + fov, c0:c0 + fov]),
                            threads)
        out[(row, col)] = float(probs[1, 0, 0])
    return out


def apply_dense(spec, image, threads=None, tile=None):
    """One forward pass over a whole [c, h, w] slice; every layer is
    evaluated exactly once (or once per tile). Returns a one-slice
    ProbabilityMap of shape (h-fov+1) x (w-fov+1).

    `tile` caps the output tile extent for memory control; tiles overlap by
    fov-1 input samples and stitched output is bit-identical to untiled."""
    if spec.mode != netspec.DENSE:
        raise SpecError("apply_dense needs a dense-mode network; "
                        "convert the patch network first (patch_to_dense)")
    fov = spec.field_of_view
    _check_slice(spec, image, fov)
    h, w = image.shape[1:]
    oh, ow = h - fov + 1, w - fov + 1
    if tile is None or (oh <= tile and ow <= tile):
        probs = _run_layers(spec, image, threads)
        out = probs[1:2]
    else:
        out = np.empty((1, oh, ow), dtype=image.dtype)
        for r0 in range(0, oh, tile):
            for c0 in range(0, ow, tile):
                th, tw = min(tile, oh - r0), min(tile, ow - c0)
                block = np.ascontiguousarray(
                    image[:, r0:r0 + th + fov - 1, c0:c0 + tw + fov - 1])
                out[0, r0:r0 + th, c0:c0 + tw] = _run_layers(spec, block, threads)[1]
    return ProbabilityMap(out, origin_offset=(fov - 1) // 2)


def _slice_stack(volume_data, index, channels):
    """Channels for output slice `index`: the stack of adjacent slices
    [index, index + channels)."""
    return np.ascontiguousarray(volume_data[index:index + channels])


def predict_volume(spec, volume, mode, threads=None, tile=None):
    """Apply the network to every slice of a volume. With input_channels > 1
    adjacent slices supply the channels and boundary slices without a full
    stack are skipped (z_offset records the alignment)."""
    c = spec.input_channels
    z = volume.data.shape[0]
    if z < c:
        raise DataError(f"volume has {z} slices, network needs a stack of {c}")
    if mode == netspec.PATCH:
        fov = netspec.validate_patch_spec(spec)
    elif mode == netspec.DENSE:
        if spec.mode != netspec.DENSE:
            raise SpecError("dense prediction needs a converted dense network")
        fov = spec.field_of_view
    else:
        raise SpecError(f"unknown prediction mode {mode!r}")
    slices = []
    for i in range(z - c + 1):
        image = _slice_stack(volume.data, i, c)
        if mode == netspec.DENSE:
            slices.append(apply_dense(spec, image, threads, tile).data[0])
        else:
            _check_slice(spec, image, fov)
            h, w = image.shape[1:]
            probs = apply_patchwise(spec, image, threads=threads)
            grid = np.empty((h - fov + 1, w - fov + 1), dtype=np.float32)
            off = (fov - 1) // 2
            for (row, col), p in probs.items():
                grid[row - off, col - off] = p
            slices.append(grid)
    return ProbabilityMap(np.stack(slices), origin_offset=(fov - 1) // 2,
                          z_offset=(c - 1) // 2,
                          source_volume_id=getattr(volume, "volume_id", ""))


@dataclass
class BenchmarkReport:
    """Wall-clock comparison of the two modes on identical input and shared
    parameters. Patch timing covers a stratified position sample and is
    extrapolated linearly to all positions (flagged)."""
    hardware_note: str
    modes: dict = field(default_factory=dict)
    speedup_vs_patch: float | None = None
    scaling: dict = field(default_factory=dict)

    def to_dict(self):
        return {"hardware_note": self.hardware_note, "modes": self.modes,
                "speedup_vs_patch": self.speedup_vs_patch, "scaling": self.scaling}


def _time_patch(spec, images, positions_per_image, runs):
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        outs = [apply_patchwise(spec, img, pos, threads=1)
                for img, pos in zip(images, positions_per_image)]
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), outs


def _time_dense(spec_dense, images, runs, threads):
    times, ref = [], None
    for _ in range(runs):
        t0 = time.perf_counter()
        outs = [apply_dense(spec_dense, img, threads=threads).data for img in images]
        times.append(time.perf_counter() - t0)
        if ref is None:
            ref = outs
        elif not all(np.array_equal(a, b) for a, b in zip(ref, outs)):
            raise AssertionError("dense outputs differed between timed runs")
    return float(np.median(times)), ref


def benchmark(spec, volume, modes=("patch", "dense"), sample_fraction=0.01,
              runs=5, compare_backends=False):
    """Benchmark protocol: one warm-up pass, median of `runs` timed runs.
    Patch mode is timed single-threaded over a stratified sample of
    positions (every k-th valid center) and extrapolated linearly; dense
    mode is timed both single-threaded and with all workers. The scaling
    section times the patch sample at 1x and 2x size to show patch cost
    linear in position count while dense cost is position-independent."""
    fov = netspec.validate_patch_spec(spec)
    dense = netspec.patch_to_dense(spec)
    c = spec.input_channels
    z = volume.data.shape[0]
    images = [_slice_stack(volume.data, i, c) for i in range(z - c + 1)]
    h, w = images[0].shape[1:]
    centers = valid_centers(fov, h, w)
    n_all = len(centers) * len(images)

    note = (f"{platform.machine()} {platform.processor() or 'cpu'}, "
            f"{resolve_threads(0)} cores, kernels={backend_name()}")
    report = BenchmarkReport(hardware_note=note)
    modes = set(modes)

    if "dense" in modes:
        apply_dense(dense, images[0], threads=1)  # warm-up
        for label, threads in (("dense_single_thread", 1),
                               ("dense_all_cores", resolve_threads(0))):
            seconds, _ = _time_dense(dense, images, runs, threads)
            voxels = n_all
            report.modes[label] = {
                "mode": "dense", "threads": threads,
                "wall_time_seconds_total": seconds,
                "wall_time_seconds_per_slice": seconds / len(images),
                "voxels_classified": voxels,
                "voxels_per_second": voxels / seconds,
                "extrapolated": False, "runs": runs,
                "outputs_identical_between_runs": True,
            }

    if "patch" in modes:
        step = max(1, round(1.0 / sample_fraction))
        sample = centers[::step]
        apply_patchwise(spec, images[0], sample[:2], threads=1)  # warm-up
        seconds, _ = _time_patch(spec, images, [sample] * len(images), runs)
        n_sampled = len(sample) * len(images)
        scale = n_all / n_sampled
        report.modes["patch_single_thread"] = {
            "mode": "patch", "threads": 1,
            "positions_timed": n_sampled,
            "sample_fraction": n_sampled / n_all,
            "wall_time_seconds_sampled": seconds,
            "wall_time_seconds_total": seconds * scale,
            "wall_time_seconds_per_slice": seconds * scale / len(images),
            "voxels_classified": n_all,
            "voxels_per_second": n_all / (seconds * scale),
            "extrapolated": True, "runs": runs,
        }
        # position-count scaling probe: 2x the sample vs repeated dense
        double = centers[::max(1, step // 2)]
        t1, _ = _time_patch(spec, images, [sample] * len(images), 1)
        t2, _ = _time_patch(spec, images, [double] * len(images), 1)
        probe = {"patch_positions_1x": len(sample) * len(images),
                 "patch_seconds_1x": t1,
                 "patch_positions_2x": len(double) * len(images),
                 "patch_seconds_2x": t2,
                 "patch_scaling_ratio": t2 / t1}
        if "dense" in modes:
            d1, _ = _time_dense(dense, images, 1, 1)
            d2, _ = _time_dense(dense, images, 1, 1)
            probe["dense_seconds_repeat"] = [d1, d2]
        report.scaling = probe

    if "patch" in modes and "dense" in modes:
        report.speedup_vs_patch = (
            report.modes["patch_single_thread"]["wall_time_seconds_total"]
            / report.modes["dense_single_thread"]["wall_time_seconds_total"])
        report.modes["dense_single_thread"]["speedup_vs_patch"] = report.speedup_vs_patch

    if compare_backends:
        comp = {}
        saved = os.environ.get("ADN_BACKEND")
        try:
            for name in available_backends():
                os.environ["ADN_BACKEND"] = name
                apply_dense(dense, images[0], threads=1)  # warm-up per backend
                seconds, _ = _time_dense(dense, images, max(1, runs // 2), 1)
                comp[name] = {"wall_time_seconds_total": seconds,
                              "voxels_per_second": n_all / seconds}
        finally:
            if saved is None:
                os.environ.pop("ADN_BACKEND", None)
            else:
                os.environ["ADN_BACKEND"] = saved
        report.modes["backend_comparison_dense_single_thread"] = comp

    return report
