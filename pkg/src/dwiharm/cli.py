"""Command-line surface: train, harmonize, alter, metrics, eval.

Explicit flags override values from an optional JSON --config file, which in
turn override the built-in defaults. A fixed --seed determines every
stochastic choice in the pipeline; the thread count comes from --threads or
the DWIHARM_THREADS environment variable and never changes results.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import alteration, core, dictionary, evaluation, harmonizer, metrics
from .errors import ArgumentError, FormatError, HarmonizationError
from .lasso import PathConfig
from .patching import PatchConfig

THREADS_ENV = "DWIHARM_THREADS"


def _set_threads(n):
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(int(n), limit)))


def _parse_ratio(text):
    parts = text.split(",")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ArgumentError("ratio must be one value or three comma-separated")
    out = []
    for part in parts:
        if "/" in part:
            num, den = part.split("/")
            out.append(float(num) / float(den))
        else:
            out.append(float(part))
    return tuple(out)


def _parse_region(text):
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 6:
        raise ArgumentError("region must be ox,oy,oz,sx,sy,sz")
    return core.Region(tuple(parts[:3]), tuple(parts[3:]))


def _load_dataset(args, index=None):
    def pick(values):
        return values[index] if index is not None else values

    vol, gtab = core.load_volume(pick(args.input), pick(args.bvals),
                                 pick(args.bvecs),
                                 b0_threshold=args.b0_threshold)
    mask = core.load_mask(pick(args.mask), vol)
    return vol, gtab, mask


def _patch_config(args, spatial_size):
    return PatchConfig(spatial_size=spatial_size, n_neighbors=args.neighbors,
                       stride=args.stride, rng_seed=args.seed)


def _path_config(args, selection):
    return PathConfig(n_lambdas=args.n_lambdas, eps_ratio=args.eps_ratio,
                      selection=selection, cv_folds=args.cv_folds,
                      rng_seed=args.seed)


def cmd_train(args):
    groups = [args.input, args.bvals, args.bvecs, args.mask]
    sizes = {len(g) for g in groups}
    if len(sizes) != 1:
        raise ArgumentError("--input/--bvals/--bvecs/--mask counts must match")
    datasets = [_load_dataset(args, i) for i in range(len(args.input))]

    holdout = args.holdout
    if args.verbose and holdout == 0:
        holdout = 32
    train_cfg = dictionary.TrainConfig(
        n_iterations=args.iters, batch_size=args.batch,
        path_cfg=_path_config(args, args.select), rng_seed=args.seed,
        n_atoms=args.n_atoms, holdout_size=holdout)
    D = harmonizer.train_target_dictionary(
        datasets, _patch_config(args, args.patch_size), train_cfg,
        dataset_ids=[Path(p).name for p in args.input])
    if args.verbose:
        for i, obj in enumerate(D.provenance.get("holdout_objective", [])):
            print("iteration %d held-out objective %.8g" % (i + 1, obj))
    dictionary.save_dictionary(D, args.out)
    print("wrote %s (m=%d, p=%d)" % (args.out, D.m, D.p))
    return 0


def cmd_harmonize(args):
    D = dictionary.load_dictionary(args.dict)
    vol, gtab, mask = _load_dataset(args)

    ratio = _parse_ratio(args.upsample_ratio) if args.upsample_ratio else None
    s_tgt = D.patch_shape[0]
    if args.patch_size is not None:
        s_src = args.patch_size
    elif ratio is None:
        s_src = s_tgt
    else:
        s_src = int(np.floor(s_tgt / ratio[0] + 0.5))
    neighbors = args.neighbors
    if neighbors is None:
        neighbors = D.n_channels - 2
        if neighbors < 0:
            raise ArgumentError("dictionary has too few channels")
    patch_cfg = PatchConfig(spatial_size=s_src, n_neighbors=neighbors,
                            stride=args.stride, rng_seed=args.seed)
    cfg = harmonizer.HarmonizeConfig(
        patch_cfg=patch_cfg, path_cfg=_path_config(args, args.select),
        upsample_ratio=ratio, rng_seed=args.seed)
    out_vol = harmonizer.harmonize(vol, gtab, mask, D, cfg)
    core.save_volume(out_vol, args.out)
    stem = _strip_nii(args.out)
    core.save_bvals_bvecs(gtab, stem + ".bval", stem + ".bvec")
    print("wrote %s %s" % (args.out, out_vol.data.shape))
    return 0


def _strip_nii(path):
    path = str(path)
    for suffix in (".nii.gz", ".nii"):
        if path.endswith(suffix):
            return path[:-len(suffix)]
    return path


def cmd_alter(args):
    vol, gtab = core.load_volume(args.input, args.bvals, args.bvecs,
                                 b0_threshold=args.b0_threshold)
    cfg = alteration.AlterationConfig(
        region=_parse_region(args.region), f_low=args.f_low,
        f_high=args.f_high, d_csf=args.d_csf, rng_seed=args.seed)
    altered, fractions = alteration.alter_volume(vol, gtab, cfg)
    core.save_volume(altered, args.out)
    sidecar = {
        "region_offset": list(cfg.region.offset),
        "region_shape": list(cfg.region.shape),
        "f_low": cfg.f_low,
        "f_high": cfg.f_high,
        "d_csf": cfg.d_csf,
        "seed": cfg.rng_seed,
        "fractions": fractions.ravel().tolist(),
    }
    with open(_strip_nii(args.out) + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    print("wrote %s and sidecar" % args.out)
    return 0


def cmd_metrics(args):
    vol, gtab, mask = _load_dataset(args)
    fit = metrics.fit_dti(vol, gtab, mask)
    sh = metrics.fit_sh(vol, gtab, mask, order=args.sh_order)
    maps = {
        "adc": metrics.adc(fit),
        "fa": metrics.fa(fit),
        "rish0": metrics.rish(sh, 0),
        "rish2": metrics.rish(sh, 2),
    }
    for name, data in maps.items():
        path = "%s_%s.nii.gz" % (args.out_prefix, name)
        core.save_map(data, path, like=vol)
        print("wrote %s" % path)
    return 0


def cmd_eval(args):
    predicted = core.load_map(args.predicted)
    acquired = core.load_map(args.acquired)
    if args.mask:
        mask = core.load_map(args.mask) != 0
    else:
        mask = np.ones(predicted.shape, dtype=bool)

    extra = []
    report_extras = {}
    if args.predicted_altered or args.acquired_altered:
        if not (args.predicted_altered and args.acquired_altered and args.region):
            raise ArgumentError("altered comparison needs --predicted-altered, "
                                "--acquired-altered and --region")
        pred_alt = core.load_map(args.predicted_altered)
        acq_alt = core.load_map(args.acquired_altered)
        region = _parse_region(args.region)
        values, excluded = evaluation.percentage_difference(
            predicted, acquired, pred_alt, acq_alt, region)
        report_extras["percentage_diff"] = {
            **evaluation._summary(values), "excluded_voxels": excluded}
        extra.append(("predicted_vs_altered",
                      predicted[region.slices].ravel(),
                      pred_alt[region.slices].ravel()))
        extra.append(("acquired_vs_altered",
                      acquired[region.slices].ravel(),
                      acq_alt[region.slices].ravel()))

    report = evaluation.build_report(
        args.metric_name, args.subject, args.comparison, predicted, acquired,
        mask, kl_bins=args.kl_bins, alpha=args.alpha, extra_tests=extra)
    report.update(report_extras)
    evaluation.write_report(report, args.out)
    if args.csv:
        evaluation.write_report_csv(report, args.csv)
    print("wrote %s (kl_sym=%.6g)" % (args.out, report["kl_sym"]))
    return 0


def _add_dataset_flags(sub, multiple=False):
    kwargs = {"action": "append"} if multiple else {}
    sub.add_argument("--input", required=True, help="4D NIfTI volume", **kwargs)
    sub.add_argument("--bvals", required=True, help="FSL bvals text", **kwargs)
    sub.add_argument("--bvecs", required=True, help="FSL bvecs text", **kwargs)
    sub.add_argument("--mask", required=True, help="3D NIfTI brain mask", **kwargs)


def _add_selection_flags(sub, default):
    sub.add_argument("--select", choices=["aic", "cv"], default=default,
                     help="per-patch penalty selection (default %(default)s)")
    sub.add_argument("--n-lambdas", type=int, default=100)
    sub.add_argument("--eps-ratio", type=float, default=1e-3)
    sub.add_argument("--cv-folds", type=int, default=3)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dwiharm",
        description="Dictionary-based harmonization of diffusion MRI datasets")
    parser.add_argument("--config", help="JSON file with default flag values")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: %s or all cores)"
                             % THREADS_ENV)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="learn a target dictionary")
    _add_dataset_flags(t, multiple=True)
    t.add_argument("--out", required=True, help="output dictionary (.dld)")
    t.add_argument("--patch-size", type=int, default=3)
    t.add_argument("--neighbors", type=int, default=5)
    t.add_argument("--stride", type=int, default=1)
    t.add_argument("--iters", type=int, default=500)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--n-atoms", type=int, default=None)
    t.add_argument("--holdout", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--b0-threshold", type=float, default=core.DEFAULT_B0_THRESHOLD)
    t.add_argument("--verbose", action="store_true")
    _add_selection_flags(t, default="cv")
    t.set_defaults(func=cmd_train)

    h = sub.add_parser("harmonize", help="reconstruct a dataset with a dictionary")
    h.add_argument("--dict", required=True, help="DLD1 dictionary file")
    _add_dataset_flags(h)
    h.add_argument("--out", required=True, help="output NIfTI")
    h.add_argument("--upsample-ratio", default=None,
                   help="per-axis target/source ratio, e.g. 5/3 or 1.5,1.5,1")
    h.add_argument("--patch-size", type=int, default=None,
                   help="source patch size (default: derived from dictionary)")
    h.add_argument("--neighbors", type=int, default=None)
    h.add_argument("--stride", type=int, default=1)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--b0-threshold", type=float, default=core.DEFAULT_B0_THRESHOLD)
    _add_selection_flags(h, default="aic")
    h.set_defaults(func=cmd_harmonize)

    a = sub.add_parser("alter", help="simulate free-water infiltration")
    a.add_argument("--input", required=True)
    a.add_argument("--bvals", required=True)
    a.add_argument("--bvecs", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--region", required=True, help="ox,oy,oz,sx,sy,sz")
    a.add_argument("--f-low", type=float, default=0.7)
    a.add_argument("--f-high", type=float, default=0.9)
    a.add_argument("--d-csf", type=float, default=alteration.FREE_WATER_DIFFUSIVITY)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--b0-threshold", type=float, default=core.DEFAULT_B0_THRESHOLD)
    a.set_defaults(func=cmd_alter)

    m = sub.add_parser("metrics", help="compute ADC/FA/RISH maps")
    _add_dataset_flags(m)
    m.add_argument("--out-prefix", required=True)
    m.add_argument("--sh-order", type=int, default=2)
    m.add_argument("--b0-threshold", type=float, default=core.DEFAULT_B0_THRESHOLD)
    m.set_defaults(func=cmd_metrics)

    e = sub.add_parser("eval", help="compare two metric maps")
    e.add_argument("--predicted", required=True)
    e.add_argument("--acquired", required=True)
    e.add_argument("--mask", default=None)
    e.add_argument("--metric-name", default="metric")
    e.add_argument("--subject", default="")
    e.add_argument("--comparison", default="")
    e.add_argument("--out", required=True)
    e.add_argument("--csv", default=None)
    e.add_argument("--kl-bins", type=int, default=100)
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--predicted-altered", default=None)
    e.add_argument("--acquired-altered", default=None)
    e.add_argument("--region", default=None)
    e.set_defaults(func=cmd_eval)
    return parser


def _apply_config(parser, argv):
    """Load --config JSON (if any) as parser defaults, then reparse."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config) as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError("unreadable config file: %s" % exc) from exc
    if not isinstance(values, dict):
        raise FormatError("config file must hold a JSON object")
    clean = {k.replace("-", "_"): v for k, v in values.items()}
    parser.set_defaults(**clean)
    for action in parser._subparsers._group_actions[0].choices.values():
        action.set_defaults(**{k: v for k, v in clean.items()
                               if any(a.dest == k for a in action._actions)})


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get(THREADS_ENV, os.cpu_count() or 1))
        _set_threads(threads)
        return args.func(args)
    except HarmonizationError as exc:
        print("error: %s: %s" % (exc.code, exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print("error: io: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
