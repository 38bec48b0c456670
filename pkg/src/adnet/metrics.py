"""Evaluation: voxel-wise and object-level precision/recall over a threshold
sweep, F1, constant-F1 contours, and operating-point selection.

Object level ("whole object" detection) means connected components of the
thresholded prediction are matched against ground-truth components: a truth
component counts as one true positive if any predicted component overlaps it
by at least min_overlap_voxels; a predicted component with no qualifying
overlap is one false positive; many-to-one overlaps neither multiply true
positives nor create false positives. The matching rule and connectivity are
parameters and every report records them.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError

# Published object-level best-F1 scores of the synapse detectors this
# test-bench descends from (their own data and matching rules; documented
# for comparison, not used as targets).
REFERENCE_F1 = {"vesicle-rf": 0.801, "vesicle-cnn": 0.820, "vesicle-cnn-2": 0.869}

FACE6, FULL26, FACE4, FULL8 = "face6", "full26", "face4", "full8"
CONNECTIVITIES = (FACE6, FULL26, FACE4, FULL8)


def _structure(connectivity):
    """3d neighbor stencil; the 2d variants never connect across slices."""
    s = np.zeros((3, 3, 3), dtype=bool)
    if connectivity == FULL26:
        s[:] = True
    elif connectivity == FACE6:
        s[1, 1, :] = s[1, :, 1] = s[:, 1, 1] = True
    elif connectivity == FULL8:
        s[1] = True
    elif connectivity == FACE4:
        s[1, 1, :] = s[1, :, 1] = True
    else:
        raise DataError(f"unknown connectivity {connectivity!r}; "
                        f"options: {', '.join(CONNECTIVITIES)}")
    return s


@dataclass
class ComponentSet:
    """Integer label map (0 = background, 1..count = component ids assigned
    in raster-scan order of first-encountered voxel) plus voxel counts."""
    label_map: np.ndarray
    component_sizes: dict

    @property
    def count(self):
        return len(self.component_sizes)


def connected_components(binary, connectivity=FULL26):
    """Label connected components of a [z, y, x] binary map."""
    binary = np.asarray(binary)
    if binary.ndim != 3:
        raise ShapeError(f"binary map must be 3d, got {binary.ndim}d")
    labels, n = ndimage.label(binary != 0, structure=_structure(connectivity))
    labels = labels.astype(np.int32, copy=False)
    if n:
        # renumber ids by first appearance in raster order
        flat = labels.ravel()
        ids, first = np.unique(flat, return_index=True)
        nz = ids != 0
        order = np.argsort(first[nz], kind="stable")
        remap = np.zeros(int(ids.max()) + 1, dtype=np.int32)
        remap[ids[nz][order]] = np.arange(1, n + 1, dtype=np.int32)
        labels = remap[labels]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    return ComponentSet(labels, {i: int(sizes[i]) for i in range(1, n + 1)})


def match_objects(pred, truth, min_overlap_voxels=1):
    """Count object-level (tp, fp, fn) between two ComponentSets on the
    same grid under the any-overlap rule described in the module docstring."""
    if pred.label_map.shape != truth.label_map.shape:
        raise DataError(f"component grids differ: {pred.label_map.shape} "
                        f"vs {truth.label_map.shape}")
    if min_overlap_voxels < 1:
        raise DataError("min_overlap_voxels must be positive")
    both = (pred.label_map > 0) & (truth.label_map > 0)
    p = pred.label_map[both].astype(np.int64)
    t = truth.label_map[both].astype(np.int64)
    matched_pred: set = set()
    detected_truth: set = set()
    if p.size:
        pair = p * (truth.count + 1) + t
        pair_ids, counts = np.unique(pair, return_counts=True)
        ok = counts >= min_overlap_voxels
        matched_pred = set((pair_ids[ok] // (truth.count + 1)).tolist())
        detected_truth = set((pair_ids[ok] % (truth.count + 1)).tolist())
    tp = len(detected_truth)
    fp = pred.count - len(matched_pred)
    fn = truth.count - tp
    return tp, fp, fn


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def at(cls, threshold, tp, fp, fn):
        p, r, f1 = _prf(tp, fp, fn)
        return cls(float(threshold), int(tp), int(fp), int(fn), p, r, f1)

    def row(self):
        return (f"{self.threshold:.6g},{self.tp},{self.fp},{self.fn},"
                f"{self.precision:.9g},{self.recall:.9g},{self.f1:.9g}")


@dataclass
class DetectionReport:
    curve: list
    best: PRPoint
    mode: str
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        keys = ("threshold", "tp", "fp", "fn", "precision", "recall", "f1")
        return {"mode": self.mode, "provenance": self.provenance,
                "best": {k: getattr(self.best, k) for k in keys},
                "curve": [{k: getattr(pt, k) for k in keys} for pt in self.curve]}

    def to_csv(self):
        lines = ["threshold,tp,fp,fn,precision,recall,f1"]
        lines += [pt.row() for pt in self.curve]
        return "\n".join(lines) + "\n"


VOXEL, OBJECT = "voxel", "object"

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2).tolist())


def crop_to_map(truth_data, pmap):
    """Crop a full-grid truth volume by the map's recorded offsets. Accepts
    already-cropped truth unchanged; anything else is a grid mismatch.

    The map's leading offsets are origin_offset/z_offset; the trailing
    border may be one voxel larger (even field of view or channel stack),
    so a total in-plane pad of 2*o or 2*o+1 is accepted."""
    truth_data = np.asarray(truth_data)
    if truth_data.shape == pmap.dims:
        return truth_data
    z, h, w = pmap.dims
    zo, o = pmap.z_offset, pmap.origin_offset
    pad_z = truth_data.shape[0] - z
    pad_h = truth_data.shape[1] - h
    pad_w = truth_data.shape[2] - w
    if pad_z in (2 * zo, 2 * zo + 1) and pad_h == pad_w \
            and pad_h in (2 * o, 2 * o + 1):
        return truth_data[zo:zo + z, o:o + h, o:o + w]
    raise DataError(
        f"grid mismatch: truth {truth_data.shape} fits neither the map dims "
        f"{pmap.dims} nor a full grid with offsets (z={zo}, in-plane={o})")


def _counts_at(prob, truth_bool, threshold, mode, connectivity, min_overlap,
               truth_components=None):
    pred = prob >= threshold
    if mode == VOXEL:
        tp = int(np.count_nonzero(pred & truth_bool))
        fp = int(np.count_nonzero(pred & ~truth_bool))
        fn = int(np.count_nonzero(~pred & truth_bool))
        return tp, fp, fn
    pred_cs = connected_components(pred, connectivity)
    truth_cs = truth_components or connected_components(truth_bool, connectivity)
    return match_objects(pred_cs, truth_cs, min_overlap)


def _golden_refine(score, lo, hi, tol=1e-3):
    """Golden-section maximization of score(t) on [lo, hi] to width tol."""
    phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = score(c), score(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = score(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = score(d)
    return (a + b) / 2


def pr_curve(pmap, truth, thresholds=None, mode=VOXEL, connectivity=FULL26,
             min_overlap_voxels=1, refine=None, provenance=None):
    """Sweep binarization thresholds over a probability map and report the
    precision-recall curve plus the best-F1 operating point.

    truth may be a LabelVolume or array on either the full or cropped grid.
    thresholds defaults to 0.05..0.95 step 0.05 with the best threshold
    additionally refined by golden-section search (to 1e-3); pass an
    explicit list to control the sweep exactly (refine defaults off then).
    """
    if mode not in (VOXEL, OBJECT):
        raise DataError(f"unknown evaluation mode {mode!r}")
    truth_data = getattr(truth, "data", truth)
    truth_bool = crop_to_map(truth_data, pmap) != 0
    prob = pmap.data
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
        refine = True if refine is None else refine
    thresholds = sorted(float(t) for t in thresholds)
    if not thresholds:
        raise DataError("threshold list is empty")

    truth_components = (connected_components(truth_bool, connectivity)
                        if mode == OBJECT else None)

    def point(t):
        return PRPoint.at(t, *_counts_at(prob, truth_bool, t, mode, connectivity,
                                         min_overlap_voxels, truth_components))

    curve = [point(t) for t in thresholds]
    best_i = max(range(len(curve)), key=lambda i: curve[i].f1)
    if refine and len(thresholds) > 1:
        lo = thresholds[max(0, best_i - 1)]
        hi = thresholds[min(len(thresholds) - 1, best_i + 1)]
        t_ref = _golden_refine(lambda t: point(t).f1, lo, hi)
        refined = point(t_ref)
        if all(abs(refined.threshold - pt.threshold) > 1e-9 for pt in curve):
            curve.append(refined)
            curve.sort(key=lambda pt: pt.threshold)
    best = max(curve, key=lambda pt: pt.f1)
    prov = dict(provenance or {})
    prov.update(matching_rule=f"any-overlap>={min_overlap_voxels}vox",
                connectivity=connectivity)
    return DetectionReport(curve=curve, best=best, mode=mode, provenance=prov)


def f1_contour(f1_level, resolution=100):
    """Constant-F1 contour in (recall, precision) space:
    precision = f*r / (2r - f). Only the feasible arc with precision <= 1
    (recall >= f/(2-f)) is emitted; level 1.0 collapses to the single
    point (1, 1)."""
    if not 0 < f1_level <= 1:
        raise DataError(f"f1 level must be in (0, 1], got {f1_level}")
    if resolution < 1:
        raise DataError("resolution must be positive")
    f = float(f1_level)
    lo = f / (2 - f)
    rs = np.linspace(lo, 1.0, resolution) if lo < 1.0 else np.array([1.0])
    pts = []
    for r in rs:
        p = f * r / (2 * r - f)
        pts.append((float(r), float(min(p, 1.0))))
    return pts


def contour_csv(points):
    return "\n".join(["recall,precision"] +
                     [f"{r:.9g},{p:.9g}" for r, p in points]) + "\n"
