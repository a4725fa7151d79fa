"""End-to-end orchestration: run configuration, training drivers,
``segment_volume`` and six-fold cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, MissingArtifactError, SegError, StageError
from .forest import ForestModel, TrainConfig, load_model, predict_proba, save_model, subsample_negatives, train_forest
from .metrics import OverlapReport, overlap_report, summarize, write_summary_csv
from .patch_features import (
    FEATURE_NAMES,
    DsiftParams,
    IntensityLut,
    PatchFeatures,
    PatchGrid,
    build_lut_from_counts,
    extract_patch_features,
)
from .rng import SplitMix64, derive_seed
from .superpixel_stage import (
    SP_FEATURE_NAMES,
    CascadeModel,
    OverlapLabel,
    SuperpixelTable,
    build_response_map,
    classify_and_stack,
    train_cascade,
    volume_superpixel_table,
)
from .superpixels import SlicParams, slic_volume
from .volumes import (
    DEFAULT_BODY_THRESHOLD,
    BinaryMask,
    CtVolume,
    DatasetManifest,
    LabelVolume,
    check_same_dims,
    load_mask,
    load_volume,
    save_mask,
    segment_body,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
LUT_FILE, C1_FILE, CASCADE_FILE, CONFIG_FILE = "lut.txt", "c1.json", "cascade.json", "config.json"


@dataclass
class RunConfig:
    slic: SlicParams = field(default_factory=SlicParams)
    grid: PatchGrid = field(default_factory=PatchGrid)
    dsift: DsiftParams = field(default_factory=DsiftParams)
    c1: TrainConfig = field(default_factory=TrainConfig)
    c2: TrainConfig = field(default_factory=TrainConfig)
    c3: TrainConfig = field(default_factory=TrainConfig)
    c1_neg_ratio: float = 5.0
    c2_neg_ratio: float = 5.0
    c2_sensitivity: float = 0.99
    t3: float = 0.5
    body_threshold: int = DEFAULT_BODY_THRESHOLD
    bandwidth: object = "auto"
    lut_cases: Optional[int] = None  # None: every training case feeds the KDE
    seed: int = 0
    threads: int = 1
    version: int = CONFIG_VERSION

    _NESTED = {"slic": SlicParams, "grid": PatchGrid, "dsift": DsiftParams, "c1": TrainConfig, "c2": TrainConfig, "c3": TrainConfig}

    def to_dict(self) -> dict:
        return {f.name: (asdict(getattr(self, f.name)) if f.name in self._NESTED else getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise DataError(f"unsupported config version {doc.get('version')!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        try:
            for name, value in doc.items():
                if name in cls._NESTED:
                    kwargs[name] = cls._NESTED[name](**value)
                else:
                    kwargs[name] = value
        except TypeError as exc:
            raise DataError(f"malformed config block ({exc})") from exc
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}: malformed config ({exc})") from exc


@dataclass
class Models:
    lut: IntensityLut
    c1: ForestModel
    cascade: CascadeModel

    def save(self, directory, cfg: Optional[RunConfig] = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.lut.save(d / LUT_FILE)
        save_model(d / C1_FILE, self.c1)
        self.cascade.save(d / CASCADE_FILE)
        if cfg is not None:
            cfg.save(d / CONFIG_FILE)

    @classmethod
    def load(cls, directory) -> "Models":
        d = Path(directory)
        for name in (LUT_FILE, C1_FILE, CASCADE_FILE):
            if not (d / name).exists():
                raise MissingArtifactError(f"model directory {d} lacks {name}")
        return cls(IntensityLut.load(d / LUT_FILE), load_model(d / C1_FILE), CascadeModel.load(d / CASCADE_FILE))


# --- per-case preparation ------------------------------------------------


@dataclass
class Case:
    """A volume with the fold-independent products of the chain."""

    name: str
    vol: CtVolume
    body: BinaryMask
    sp: LabelVolume
    gt: Optional[BinaryMask] = None


def prepare_case(name: str, vol: CtVolume, cfg: RunConfig, gt: Optional[BinaryMask] = None) -> Case:
    if gt is not None:
        check_same_dims(vol, gt)
    body = segment_body(vol, cfg.body_threshold)
    sp = slic_volume(vol, cfg.slic, cfg.threads)
    return Case(name, vol, body, sp, gt)


def lut_counts(cases: Sequence[Case]) -> Tuple[np.ndarray, np.ndarray]:
    """Intensity histograms of pancreas voxels and of the remaining body voxels."""
    pos = np.zeros(4096, dtype=np.int64)
    neg = np.zeros(4096, dtype=np.int64)
    for c in cases:
        v = c.vol.data
        pos += np.bincount(v[c.gt.data].ravel(), minlength=4096)
        neg += np.bincount(v[c.body.data & ~c.gt.data].ravel(), minlength=4096)
    return pos, neg


def response_volume(case: Case, pf: PatchFeatures, probs: np.ndarray) -> np.ndarray:
    out = np.zeros(case.vol.data.shape)
    for z in range(out.shape[0]):
        sel = pf.z == z
        out[z] = build_response_map(out.shape[1:], pf.y[sel], pf.x[sel], probs[sel], case.body.data[z])
    return out


def superpixel_table(case: Case, lut: IntensityLut, c1: ForestModel, cfg: RunConfig) -> SuperpixelTable:
    pf = extract_patch_features(case.vol, case.body, case.sp, lut, cfg.grid, cfg.dsift)
    probs = predict_proba(c1, pf.X) if len(pf) else np.empty(0)
    resp = response_volume(case, pf, probs)
    return volume_superpixel_table(case.vol, case.sp, resp, case.body, case.gt)


def segment_case(case: Case, models: Models, cfg: RunConfig, t2: Optional[float] = None, t3: Optional[float] = None) -> BinaryMask:
    table = superpixel_table(case, models.lut, models.c1, cfg)
    return classify_and_stack(case.vol, case.sp, table, models.cascade, t2=t2, t3=t3)


def segment_volume(vol: CtVolume, model_dir, cfg: Optional[RunConfig] = None) -> BinaryMask:
    """body -> SLIC -> patch features -> C1 -> response -> superpixel features -> cascade -> 3D mask."""
    model_dir = Path(model_dir)
    models = Models.load(model_dir)
    if cfg is None:
        cfg = RunConfig.load(model_dir / CONFIG_FILE) if (model_dir / CONFIG_FILE).exists() else RunConfig()
    return segment_case(prepare_case("input", vol, cfg), models, cfg)


# --- training -------------------------------------------------------------


def write_patch_csv(path, pf_rows: Sequence[Tuple[str, PatchFeatures]], labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["case", "z", "y", "x"] + FEATURE_NAMES + (["label"] if labels is not None else [])
        w.writerow(header)
        for i, (name, pf) in enumerate(pf_rows):
            lab = labels[i] if labels is not None else None
            for r in range(len(pf)):
                row = [name, int(pf.z[r]), int(pf.y[r]), int(pf.x[r])] + [format(v, ".17g") for v in pf.X[r]]
                if lab is not None:
                    row.append(int(lab[r]))
                w.writerow(row)


def read_feature_csv(path, n_features: int) -> Tuple[List[dict], np.ndarray, Optional[np.ndarray]]:
    """Parse a tagged feature CSV into (id columns, feature matrix, labels or None)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    header = rows[0]
    names = FEATURE_NAMES if n_features == len(FEATURE_NAMES) else SP_FEATURE_NAMES
    try:
        cols = [header.index(n) for n in names]
    except ValueError as exc:
        raise DataError(f"{path}: missing feature column ({exc})") from exc
    label_col = header.index("label") if "label" in header else None
    id_cols = [i for i, h in enumerate(header) if i not in cols and i != label_col]
    ids, X, y = [], np.empty((len(rows) - 1, n_features)), []
    try:
        for r, row in enumerate(rows[1:]):
            ids.append({header[i]: row[i] for i in id_cols})
            X[r] = [float(row[i]) for i in cols]
            if label_col is not None:
                y.append(row[label_col])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    return ids, X, (np.array(y) if label_col is not None else None)


def write_sp_csv(path, tables: Sequence[Tuple[str, SuperpixelTable]], only_eligible: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "z", "label", "size", "in_body"] + SP_FEATURE_NAMES + ["ratio", "overlap_label"])
        for name, t in tables:
            for i in range(len(t)):
                if only_eligible and not t.in_body[i]:
                    continue
                ratio = float(t.ratio[i]) if t.ratio is not None else float("nan")
                lab = OverlapLabel.from_ratio(ratio).value if t.ratio is not None else ""
                w.writerow(
                    [name, int(t.z[i]), int(t.label[i]), int(t.size[i]), int(t.in_body[i])]
                    + [format(v, ".17g") for v in t.X[i]]
                    + [format(ratio, ".17g"), lab]
                )


def train_c1(cases: Sequence[Case], lut: IntensityLut, cfg: RunConfig, seed: int, csv_path=None) -> ForestModel:
    """C1 on centre-labelled patches of ``cases``; negatives capped at ``c1_neg_ratio`` per positive."""
    feats = [(c.name, extract_patch_features(c.vol, c.body, c.sp, lut, cfg.grid, cfg.dsift)) for c in cases]
    labels = [pf.labels_from(c.gt) for c, (_, pf) in zip(cases, feats)]
    X = np.vstack([pf.X for _, pf in feats])
    y = np.concatenate(labels)
    rows = subsample_negatives(y, cfg.c1_neg_ratio, derive_seed(seed, "c1-subsample"))
    if csv_path is not None:
        offsets = np.cumsum([0] + [len(pf) for _, pf in feats])
        kept, kept_labels = [], []
        for i, (name, pf) in enumerate(feats):
            local = rows[(rows >= offsets[i]) & (rows < offsets[i + 1])] - offsets[i]
            kept.append((name, PatchFeatures(pf.z[local], pf.y[local], pf.x[local], pf.X[local])))
            kept_labels.append(labels[i][local])
        write_patch_csv(csv_path, kept, kept_labels)
    return train_forest(X[rows], y[rows], cfg.c1.with_seed(derive_seed(seed, "c1")), cfg.threads)


def train_models(cases: Sequence[Case], cfg: RunConfig, seed: int, artifact_dir=None) -> Models:
    """LUT, C1 and cascade from training cases (each must carry ground truth)."""
    if any(c.gt is None for c in cases):
        raise DataError("every training case needs a ground-truth mask")
    lut_src = list(cases)
    if cfg.lut_cases is not None and cfg.lut_cases < len(lut_src):
        pick = np.sort(SplitMix64(derive_seed(seed, "lut-cases")).choice(len(lut_src), cfg.lut_cases))
        lut_src = [lut_src[i] for i in pick]
    pos, neg = lut_counts(lut_src)
    lut = build_lut_from_counts(pos, neg, cfg.bandwidth)

    art = Path(artifact_dir) if artifact_dir is not None else None
    if art is not None:
        art.mkdir(parents=True, exist_ok=True)
        (art / "lut_cases.txt").write_text("".join(c.name + "\n" for c in lut_src))
    c1 = train_c1(cases, lut, cfg, seed, art / "c1_train.csv" if art is not None else None)

    tables = [(c.name, superpixel_table(c, lut, c1, cfg)) for c in cases]
    if art is not None:
        write_sp_csv(art / "sp_train.csv", tables)
    X = np.vstack([t.X[t.in_body] for _, t in tables])
    labels = np.concatenate([t.overlap_labels()[t.in_body] for _, t in tables])
    cascade = train_cascade(
        X,
        labels,
        cfg.c2.with_seed(derive_seed(seed, "cascade")),
        c3_cfg=cfg.c3,
        neg_ratio=cfg.c2_neg_ratio,
        sensitivity=cfg.c2_sensitivity,
        t3=cfg.t3,
        workers=cfg.threads,
    )
    return Models(lut, c1, cascade)


# --- cross-validation -------------------------------------------------------


@dataclass
class CrossvalResult:
    reports: Dict[str, OverlapReport]
    folds: Dict[int, List[str]]
    summary: Dict[str, Dict[str, float]]


def load_case(manifest: DatasetManifest, entry, cfg: RunConfig) -> Case:
    vol = load_volume(manifest.resolve(entry.volume))
    gt = load_mask(manifest.resolve(entry.mask))
    return prepare_case(entry.case, vol, cfg, gt)


def crossval(manifest: DatasetManifest, cfg: RunConfig, workdir, summary_csv=None) -> CrossvalResult:
    """Train on the other folds, test on each fold in turn; every case is tested once.

    ``workdir/fold<k>/`` receives the fold's models, the training feature
    CSVs (rows tagged with their case), the test predictions and one
    evaluation JSON per test case.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    folds = manifest.folds()
    if len(manifest.entries) < 6 or len(folds) < 6:
        raise DataError("cross-validation needs at least 6 cases spread over 6 folds")

    cases: Dict[str, Case] = {}
    for e in manifest.entries:
        try:
            cases[e.case] = load_case(manifest, e, cfg)
        except SegError as exc:
            raise StageError(f"preparing case {e.case}: {exc}", case=e.case) from exc

    reports: Dict[str, OverlapReport] = {}
    fold_cases: Dict[int, List[str]] = {}
    for f in folds:
        t0 = time.perf_counter()
        fold_dir = workdir / f"fold{f}"
        train = [cases[e.case] for e in manifest.entries if e.fold != f]
        test = [cases[e.case] for e in manifest.entries if e.fold == f]
        fold_cases[f] = [c.name for c in test]
        seed = derive_seed(cfg.seed, "fold", f)
        try:
            models = train_models(train, cfg, seed, fold_dir)
            models.save(fold_dir, cfg)
        except SegError as exc:
            raise StageError(f"fold {f} training: {exc}", fold=f) from exc
        for c in test:
            try:
                pred = segment_case(c, models, cfg)
                rep = overlap_report(pred, c.gt)
            except SegError as exc:
                raise StageError(f"fold {f} case {c.name}: {exc}", fold=f, case=c.name) from exc
            save_mask(fold_dir / f"{c.name}_pred.mvol", pred)
            (fold_dir / f"{c.name}_eval.json").write_text(rep.to_json())
            reports[c.name] = rep
        log.info("fold %d done in %.1fs: %s", f, time.perf_counter() - t0,
                 ", ".join(f"{n}={reports[n].dice:.3f}" for n in fold_cases[f]))

    ordered = [reports[e.case] for e in manifest.entries]
    summary = summarize(ordered)
    if summary_csv is not None:
        write_summary_csv(summary_csv, summary)
    return CrossvalResult(reports, fold_cases, summary)
