"""``segtool`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from .errors import DataError, SegError
from .forest import load_model, predict_proba, save_model, subsample_negatives, train_forest
from .metrics import format_table_row, load_reports, overlap_report, summarize, write_summary_csv
from .patch_features import N_FEATURES, IntensityLut, build_lut_from_counts, extract_patch_features
from .phantom import PhantomSpec, generate_phantoms
from .pipeline import (
    Case,
    RunConfig,
    crossval,
    load_case,
    lut_counts,
    read_feature_csv,
    segment_volume,
    train_models,
    write_patch_csv,
    write_sp_csv,
)
from .rng import derive_seed
from .superpixel_stage import SP_FEATURE_NAMES, build_response_map, train_cascade, volume_superpixel_table
from .superpixels import SlicParams, label_boundaries, slic_volume
from .volumes import (
    load_labels,
    load_manifest,
    load_mask,
    load_volume,
    save_labels,
    save_mask,
    segment_body,
)

log = logging.getLogger("segtool")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _folds(text):
    try:
        return sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fold list {text!r}")


def _bandwidth(text):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("bandwidth must be 'auto' or a positive number")
    if not v > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return v


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _body(args, vol, cfg):
    return load_mask(args.body) if getattr(args, "body", None) else segment_body(vol, cfg.body_threshold)


# --- verbs ------------------------------------------------------------------


def cmd_phantom(args, cfg):
    spec = PhantomSpec(
        dims=tuple(args.dims),
        noise_hu=args.noise,
        distractors=tuple(args.distractors),
        seed=cfg.seed,
    )
    manifest = generate_phantoms(spec, args.count, args.out)
    print(f"wrote {len(manifest.entries)} phantoms to {args.out}")


def cmd_body(args, cfg):
    save_mask(args.out, segment_body(load_volume(args.input), cfg.body_threshold))


def cmd_slic(args, cfg):
    params = SlicParams(args.region_size, args.compactness, args.iters, cfg.slic.intensity_scale)
    save_labels(args.out, slic_volume(load_volume(args.input), params, cfg.threads))


def cmd_boundary_recall(args, cfg):
    labels = load_labels(args.labels)
    gt = load_mask(args.mask)
    if labels.dims != gt.dims:
        raise DataError("label and mask dimensions differ")
    distances = list(range(1, args.max_dist + 1))
    hits = np.zeros(len(distances))
    total = 0
    for z in range(gt.data.shape[0]):
        gb = label_boundaries(gt.data[z].astype(np.int8))
        if not gb.any():
            continue
        sb = label_boundaries(labels.data[z])
        total += int(gb.sum())
        if sb.any():
            dist = ndimage.distance_transform_cdt(~sb, metric="chessboard")[gb]
            hits += [np.count_nonzero(dist <= d) for d in distances]
    if total == 0:
        raise DataError("ground truth has no boundary pixels")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["distance", "recall"])
        for d, h in zip(distances, hits):
            w.writerow([d, repr(float(h / total))])


def cmd_build_lut(args, cfg):
    manifest = load_manifest(args.manifest)
    entries = [e for e in manifest.entries if args.train_folds is None or e.fold in args.train_folds]
    if not entries:
        raise DataError("no manifest entries in the requested folds")
    cases = []
    for e in entries:
        vol = load_volume(manifest.resolve(e.volume))
        cases.append(Case(e.case, vol, segment_body(vol, cfg.body_threshold), None, load_mask(manifest.resolve(e.mask))))
    pos, neg = lut_counts(cases)
    build_lut_from_counts(pos, neg, args.bandwidth).save(args.out)


def cmd_extract_patch_features(args, cfg):
    vol = load_volume(args.input)
    body = _body(args, vol, cfg)
    sp = load_labels(args.labels)
    pf = extract_patch_features(vol, body, sp, IntensityLut.load(args.lut), cfg.grid, cfg.dsift)
    labels = [pf.labels_from(load_mask(args.gt))] if args.gt else None
    write_patch_csv(args.out, [(args.case or Path(args.input).stem, pf)], labels)


def cmd_train_c1(args, cfg):
    _, X, y = read_feature_csv(args.features, N_FEATURES)
    if y is None:
        raise DataError("patch feature CSV has no label column")
    y = y.astype(int)
    rows = subsample_negatives(y, cfg.c1_neg_ratio, derive_seed(cfg.seed, "c1-subsample"))
    save_model(args.out, train_forest(X[rows], y[rows], cfg.c1.with_seed(derive_seed(cfg.seed, "c1")), cfg.threads))


def cmd_respond(args, cfg):
    ids, X, _ = read_feature_csv(args.features, N_FEATURES)
    probs = predict_proba(load_model(args.model), X) if len(ids) else np.empty(0)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "z", "y", "x", "prob"])
        for row, p in zip(ids, probs):
            w.writerow([row.get("case", ""), row["z"], row["y"], row["x"], repr(float(p))])


def cmd_extract_sp_features(args, cfg):
    vol = load_volume(args.input)
    body = _body(args, vol, cfg)
    sp = load_labels(args.labels)
    with open(args.responses, newline="") as fh:
        rows = list(csv.DictReader(fh))
    z = np.array([int(r["z"]) for r in rows], dtype=np.int64)
    y = np.array([int(r["y"]) for r in rows], dtype=np.int64)
    x = np.array([int(r["x"]) for r in rows], dtype=np.int64)
    p = np.array([float(r["prob"]) for r in rows])
    resp = np.zeros(vol.data.shape)
    for k in range(resp.shape[0]):
        sel = z == k
        resp[k] = build_response_map(resp.shape[1:], y[sel], x[sel], p[sel], body.data[k])
    gt = load_mask(args.gt) if args.gt else None
    table = volume_superpixel_table(vol, sp, resp, body, gt)
    write_sp_csv(args.out, [(args.case or Path(args.input).stem, table)], only_eligible=False)


def cmd_train_cascade(args, cfg):
    with open(args.features, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows = [r for r in rows if r.get("in_body", "1") == "1"]
    X = np.array([[float(r[n]) for n in SP_FEATURE_NAMES] for r in rows])
    if args.labels:
        with open(args.labels, newline="") as fh:
            lab_rows = list(csv.DictReader(fh))
        key = lambda r: (r.get("case", ""), r["z"], r["label"])
        lookup = {key(r): r["overlap_label"] for r in lab_rows}
        labels = [lookup[key(r)] for r in rows]
    else:
        labels = [r["overlap_label"] for r in rows]
    model = train_cascade(
        X, labels, cfg.c2.with_seed(derive_seed(cfg.seed, "cascade")), c3_cfg=cfg.c3,
        neg_ratio=cfg.c2_neg_ratio, sensitivity=cfg.c2_sensitivity, t3=cfg.t3, workers=cfg.threads,
    )
    model.save(args.out)


def cmd_train(args, cfg):
    manifest = load_manifest(args.manifest)
    entries = [e for e in manifest.entries if args.train_folds is None or e.fold in args.train_folds]
    if not entries:
        raise DataError("no manifest entries in the requested folds")
    cases = [load_case(manifest, e, cfg) for e in entries]
    models = train_models(cases, cfg, derive_seed(cfg.seed, "train"), args.out)
    models.save(args.out, cfg)


def cmd_segment(args, cfg):
    cfg_arg = cfg if args.config else None
    save_mask(args.out, segment_volume(load_volume(args.input), args.model_dir, cfg_arg))


def cmd_evaluate(args, cfg):
    rep = overlap_report(load_mask(args.pred), load_mask(args.gt))
    Path(args.out).write_text(rep.to_json())


def cmd_summarize(args, cfg):
    write_summary_csv(args.out, summarize(load_reports(args.input)))


def cmd_crossval(args, cfg):
    manifest = load_manifest(args.manifest)
    result = crossval(manifest, cfg, args.workdir, args.out)
    print(format_table_row(result.summary))


# --- parser -----------------------------------------------------------------


def _global_flags(p, default):
    p.add_argument("--config", default=default, help="RunConfig JSON file")
    p.add_argument("--seed", type=int, default=default, help="root seed (overrides the config)")
    p.add_argument("--threads", type=int, default=default, help="worker threads, 0 = auto")
    p.add_argument("-v", "--verbose", action="store_true", default=default or False)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segtool", description="Bottom-up superpixel pancreas segmentation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    _global_flags(p, None)
    # the same flags after the verb; SUPPRESS keeps them from masking earlier values
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def verb(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    s = verb("phantom", help="generate synthetic phantoms and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=12)
    s.add_argument("--dims", type=int, nargs=3, default=(128, 128, 40), metavar=("NX", "NY", "NZ"))
    s.add_argument("--noise", type=float, default=10.0, help="noise std in HU")
    s.add_argument("--distractors", type=int, nargs=2, default=(2, 4), metavar=("MIN", "MAX"))
    s.set_defaults(func=cmd_phantom)

    s = verb("body", help="segment the body region (table removal)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_body)

    s = verb("slic", help="per-slice SLIC superpixels")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--region-size", type=int, default=10)
    s.add_argument("--compactness", type=float, default=10.0)
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slic)

    s = verb("boundary-recall", help="boundary recall of a label volume against a mask")
    s.add_argument("--labels", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--max-dist", type=int, default=6)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_boundary_recall)

    s = verb("build-lut", help="KDE intensity likelihood table from training folds")
    s.add_argument("--manifest", required=True)
    s.add_argument("--train-folds", type=_folds)
    s.add_argument("--bandwidth", type=_bandwidth, default="auto")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_lut)

    s = verb("extract-patch-features", help="46-dim patch features to CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--body")
    s.add_argument("--labels", required=True)
    s.add_argument("--lut", required=True)
    s.add_argument("--gt", help="ground-truth mask; adds a label column")
    s.add_argument("--case", help="case tag written into every row")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_patch_features)

    s = verb("train-c1", help="train the patch classifier")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_c1)

    s = verb("respond", help="C1 probabilities for patch feature rows")
    s.add_argument("--features", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_respond)

    s = verb("extract-sp-features", help="24-dim superpixel features to CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--body")
    s.add_argument("--labels", required=True)
    s.add_argument("--responses", required=True)
    s.add_argument("--gt")
    s.add_argument("--case")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_sp_features)

    s = verb("train-cascade", help="train the C2/C3 superpixel cascade")
    s.add_argument("--features", required=True)
    s.add_argument("--labels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_cascade)

    s = verb("train", help="train LUT, C1 and cascade into a model directory")
    s.add_argument("--manifest", required=True)
    s.add_argument("--train-folds", type=_folds)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = verb("segment", help="segment a volume with a trained model directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--model-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = verb("evaluate", help="overlap metrics of a prediction")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = verb("summarize", help="aggregate evaluation JSONs")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_summarize)

    s = verb("crossval", help="six-fold cross-validation over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--workdir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_crossval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if cfg.threads == 0:
            cfg.threads = os.cpu_count() or 1
        args.func(args, cfg)
    except (SegError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"segtool: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"segtool: internal error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
