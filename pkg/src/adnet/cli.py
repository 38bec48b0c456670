"""Command-line surface: every subcommand is a thin shell over the library.

    synth     generate a deterministic synthetic dataset + split manifest
    train     train a patch network from an architecture config and manifest
    convert   rewrite a patch network file for dense inference
    predict   write a probability-map file (patch or dense mode)
    eval      score a probability map against labels (voxel or object mode)
    bench     time dense vs sliding-window inference on the same input
    contour   emit a constant-F1 contour as CSV
    verify    run the patch/dense equivalence oracle on a network + volume

Exit codes: 0 success, 1 validation/usage error, 2 internal error.
"""

import argparse
import json
import os
import sys
import traceback

import numpy as np

from . import inference, metrics, netspec, training, volume as vol
from .backend import resolve_threads
from .errors import AdnetError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    p = _Parser(prog="adn", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--dims", nargs=3, type=int, default=[64, 128, 128],
                   metavar=("Z", "H", "W"))
    s.add_argument("--blobs", type=int, default=20)
    s.add_argument("--radius", nargs=2, type=float, default=[3.0, 6.0],
                   metavar=("MIN", "MAX"))
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", nargs=3, type=float, default=[0.6, 0.2, 0.2],
                   metavar=("TRAIN", "VAL", "TEST"),
                   help="slice fractions for the manifest splits")

    s = sub.add_parser("train", help="train a patch network")
    s.add_argument("--arch", required=True, help="architecture config JSON")
    s.add_argument("--data", required=True, help="split manifest JSON")
    s.add_argument("--out", required=True, help="output network file")
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--log", help="training log CSV path")
    s.add_argument("--checkpoint-dir", help="save a checkpoint per validation")
    s.add_argument("--steps", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("convert", help="patch network file -> dense network file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("predict", help="apply a network to a volume")
    s.add_argument("--net", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--mode", choices=["patch", "dense"], required=True)
    s.add_argument("--out", required=True, help="probability map file")
    s.add_argument("--slices", help="slice range a:b of the volume to use")
    s.add_argument("--tile", type=int, help="dense tile extent (memory control)")

    s = sub.add_parser("eval", help="score a probability map against labels")
    s.add_argument("--map", dest="pmap", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--mode", choices=["voxel", "object"], required=True)
    s.add_argument("--report", help="detection report JSON path (default stdout)")
    s.add_argument("--csv", help="P-R curve CSV path")
    s.add_argument("--min-overlap", type=int, default=1)
    s.add_argument("--connectivity", choices=list(metrics.CONNECTIVITIES),
                   default=metrics.FULL26)
    s.add_argument("--thresholds", help="comma list, overrides the default sweep")

    s = sub.add_parser("bench", help="benchmark dense vs patch inference")
    s.add_argument("--net", required=True, help="patch network file")
    s.add_argument("--volume", required=True)
    s.add_argument("--modes", default="patch,dense")
    s.add_argument("--out", help="report JSON path (default stdout)")
    s.add_argument("--sample-fraction", type=float, default=0.01)
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--slices", help="slice range a:b")
    s.add_argument("--compare-backends", action="store_true",
                   help="also time each kernel backend")

    s = sub.add_parser("contour", help="constant-F1 contour CSV")
    s.add_argument("--f1", type=float, required=True)
    s.add_argument("--resolution", type=int, default=100)
    s.add_argument("--out", help="CSV path (default stdout)")

    s = sub.add_parser("verify", help="patch/dense equivalence oracle")
    s.add_argument("--net", required=True, help="patch network file")
    s.add_argument("--volume", required=True)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--max-slices", type=int, default=1)
    return p


def _parse_slices(text, z):
    if text is None:
        return 0, z
    try:
        a, b = text.split(":")
        a, b = int(a), int(b)
    except ValueError:
        raise AdnetError(f"--slices must look like a:b, got {text!r}") from None
    if not (0 <= a < b <= z):
        raise AdnetError(f"slice range {a}:{b} outside volume with {z} slices")
    return a, b


def _write_or_print(text, path):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_synth(args):
    cfg = vol.SynthConfig(dims=tuple(args.dims), blob_count=args.blobs,
                          radius_range=tuple(args.radius),
                          noise_sigma=args.noise, seed=args.seed)
    volume, labels = vol.synth_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    vol.save_volume(volume, os.path.join(args.out, "volume.adnvol"))
    vol.save_labels(labels, os.path.join(args.out, "labels.adnlab"))
    z = volume.dims[0]
    fr = args.split
    total = sum(fr)
    cut1 = round(z * fr[0] / total)
    cut2 = cut1 + round(z * fr[1] / total)
    if 0 < cut1 < cut2 < z:
        manifest = vol.SplitManifest({
            "train": {"volume": "volume.adnvol", "labels": "labels.adnlab",
                      "slices": [0, cut1]},
            "validation": {"volume": "volume.adnvol", "labels": "labels.adnlab",
                           "slices": [cut1, cut2]},
            "test": {"volume": "volume.adnvol", "labels": "labels.adnlab",
                     "slices": [cut2, z]},
        }, base_dir=args.out)
        with open(os.path.join(args.out, "manifest.json"), "w") as fh:
            fh.write(manifest.to_json())
    else:
        print(f"synth: {z} slice(s) cannot form three non-empty splits; "
              "no manifest written")
    frac = labels.data.mean()
    print(f"synth: wrote {volume.dims} volume to {args.out} "
          f"(positive fraction {frac:.4f}, id {volume.volume_id})")
    return 0


def _cmd_train(args):
    with open(args.arch) as fh:
        spec = netspec.from_arch_config(json.load(fh))
    cfg_dict = {}
    if args.config:
        with open(args.config) as fh:
            cfg_dict = json.load(fh)
    for key, val in (("steps", args.steps), ("learning_rate", args.learning_rate),
                     ("batch_size", args.batch_size), ("seed", args.seed)):
        if val is not None:
            cfg_dict[key] = val
    config = training.TrainConfig.from_dict(cfg_dict)
    manifest = vol.SplitManifest.load_file(args.data)
    hook = None
    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)

        def hook(step, spec_now):
            netspec.save(spec_now, os.path.join(args.checkpoint_dir,
                                                f"checkpoint_step{step}.net"))

    threads = resolve_threads(None)
    trained, log = training.train_from_manifest(manifest, spec, config,
                                                threads=threads,
                                                checkpoint_hook=hook)
    netspec.save(trained, args.out)
    if args.log:
        with open(args.log, "w") as fh:
            fh.write(log.to_csv())
    best = max(row[2] for row in log.rows)
    print(f"train: {config.steps} steps, best validation voxel F1 {best:.4f}, "
          f"saved {args.out}")
    return 0


def _cmd_convert(args):
    spec = netspec.load(args.input)
    dense = netspec.patch_to_dense(spec)
    netspec.save(dense, args.out)
    print(f"convert: fov {spec.field_of_view} patch network -> dense, "
          f"saved {args.out}")
    return 0


def _cmd_predict(args):
    spec = netspec.load(args.net)
    volume = vol.load_volume(args.volume)
    a, b = _parse_slices(args.slices, volume.dims[0])
    part = volume.slab(a, b) if (a, b) != (0, volume.dims[0]) else volume
    threads = resolve_threads(None)
    pmap = inference.predict_volume(spec, part, args.mode, threads=threads,
                                    tile=args.tile)
    pmap.source_volume_id = volume.volume_id
    pmap.network_checksum = netspec.checksum(spec)
    pmap.slice_range = (a, b)
    inference.save_map(pmap, args.out)
    print(f"predict: {args.mode} mode over slices {a}:{b} -> map dims "
          f"{pmap.dims}, saved {args.out}")
    return 0


def _cmd_eval(args):
    pmap = inference.load_map(args.pmap)
    labels = vol.load_labels(args.labels)
    a, b = (pmap.slice_range if pmap.slice_range
            else (0, labels.dims[0]))
    truth = labels.slab(a, b)
    thresholds = None
    if args.thresholds:
        thresholds = [float(t) for t in args.thresholds.split(",")]
    provenance = {"source_volume_id": pmap.source_volume_id,
                  "network_checksum": pmap.network_checksum,
                  "slice_range": list((a, b)),
                  "crop_offsets": {"z": pmap.z_offset,
                                   "in_plane": pmap.origin_offset}}
    report = metrics.pr_curve(pmap, truth, thresholds=thresholds, mode=args.mode,
                              connectivity=args.connectivity,
                              min_overlap_voxels=args.min_overlap,
                              provenance=provenance)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    _write_or_print(text, args.report)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.to_csv())
    if args.report:
        print(f"eval: {args.mode} mode best F1 {report.best.f1:.4f} at "
              f"threshold {report.best.threshold:.3f}")
    return 0


def _cmd_bench(args):
    spec = netspec.load(args.net)
    volume = vol.load_volume(args.volume)
    a, b = _parse_slices(args.slices, volume.dims[0])
    part = volume.slab(a, b) if (a, b) != (0, volume.dims[0]) else volume
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    report = inference.benchmark(spec, part, modes=modes,
                                 sample_fraction=args.sample_fraction,
                                 runs=args.runs,
                                 compare_backends=args.compare_backends)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    _write_or_print(text, args.out)
    if args.out and report.speedup_vs_patch:
        print(f"bench: dense is {report.speedup_vs_patch:.1f}x faster than "
              f"extrapolated patch mode (single thread)")
    return 0


def _cmd_contour(args):
    pts = metrics.f1_contour(args.f1, args.resolution)
    _write_or_print(metrics.contour_csv(pts), args.out)
    return 0


def _cmd_verify(args):
    spec = netspec.load(args.net)
    volume = vol.load_volume(args.volume)
    dense = netspec.patch_to_dense(spec)
    threads = resolve_threads(None)
    c = spec.input_channels
    n = min(args.max_slices, volume.dims[0] - c + 1)
    if n < 1:
        raise AdnetError("volume too thin for the network's input stack")
    worst = 0.0
    fov = spec.field_of_view
    off = (fov - 1) // 2
    for i in range(n):
        image = np.ascontiguousarray(volume.data[i:i + c])
        want = inference.apply_patchwise(spec, image, threads=threads)
        got = inference.apply_dense(dense, image, threads=threads).data[0]
        for (row, col), p in want.items():
            worst = max(worst, abs(got[row - off, col - off] - p))
    ok = worst <= args.tolerance
    print(f"verify: {n} slice(s), {len(want)} positions/slice, "
          f"max |dense - patch| = {worst:.3g} "
          f"({'OK' if ok else 'MISMATCH'}, tolerance {args.tolerance:g})")
    return 0 if ok else 1


_COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "convert": _cmd_convert,
             "predict": _cmd_predict, "eval": _cmd_eval, "bench": _cmd_bench,
             "contour": _cmd_contour, "verify": _cmd_verify}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("adn: a command is required", file=sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adn: {exc}", file=sys.stderr)
        return 1
    except AdnetError as exc:
        print(f"adn: error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        print("adn: internal error", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
