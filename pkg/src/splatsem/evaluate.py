"""Zero-shot segmentation, metrics, text queries and scene curation."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .raster.metrics import laplacian_sharpness, load_image, psnr
from .scene import SH_C0, GaussianScene, SemanticFeatureField, save_scene_ply

VOID = -1
TIE_TOL = 1e-12


# -- class table ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClassTable:
    ids: np.ndarray         # C, ascending
    names: tuple
    embeddings: np.ndarray  # C x d, unit rows

    def __post_init__(self):
        ids = np.asarray(self.ids, np.int64)
        emb = np.asarray(self.embeddings, np.float64)
        if emb.ndim != 2 or len(emb) != len(ids) or len(self.names) != len(ids):
            raise ValueError("class table: ids, names and embeddings must align")
        if len(np.unique(ids)) != len(ids) or (ids < 0).any():
            raise ValueError("class table: ids must be unique and non-negative")
        if len(ids) and np.abs(np.linalg.norm(emb, axis=1) - 1).max() > 1e-5:
            raise ValueError("class table: text embeddings must be unit norm")
        order = np.argsort(ids, kind="stable")
        object.__setattr__(self, "ids", ids[order])
        object.__setattr__(self, "names", tuple(self.names[i] for i in order))
        object.__setattr__(self, "embeddings", emb[order])

    def __len__(self):
        return len(self.ids)

    def ids_for(self, names) -> list:
        lookup = dict(zip(self.names, self.ids.tolist()))
        return [lookup[n] for n in names if n in lookup]

    def name_of(self, cid: int) -> str:
        return self.names[int(np.flatnonzero(self.ids == cid)[0])]


def save_class_table(table: ClassTable, path) -> None:
    """JSON index plus a sibling ``.bin`` blob of little-endian float32 rows."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    d = table.embeddings.shape[1]
    entries = [{"id": int(i), "name": n, "offset": k * d * 4}
               for k, (i, n) in enumerate(zip(table.ids, table.names))]
    path.write_text(json.dumps({"dim": d, "blob": blob.name, "classes": entries}, indent=1))
    blob.write_bytes(table.embeddings.astype("<f4").tobytes())


def load_class_table(path) -> ClassTable:
    path = Path(path)
    meta = json.loads(path.read_text())
    d = int(meta["dim"])
    buf = (path.parent / meta["blob"]).read_bytes()
    ids, names, rows = [], [], []
    for e in meta["classes"]:
        off = int(e["offset"])
        if off + 4 * d > len(buf):
            raise ValueError(f"{path}: embedding for class {e['id']} lies outside the blob")
        rows.append(np.frombuffer(buf, "<f4", d, off).astype(np.float64))
        ids.append(int(e["id"]))
        names.append(str(e["name"]))
    emb = np.array(rows).reshape(len(rows), d)
    # float32 storage: restore the unit invariant
    emb /= np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return ClassTable(np.array(ids), tuple(names), emb)


def save_points(path, positions, labels) -> None:
    p = np.asarray(positions, "<f4").reshape(-1, 3)
    lab = np.asarray(labels, "<u4").reshape(-1)
    if len(p) != len(lab):
        raise ValueError("one label per evaluation point is required")
    with open(path, "wb") as fh:
        fh.write(b"SSPT" + struct.pack("<IQ", 1, len(p)))
        fh.write(p.tobytes())
        fh.write(lab.tobytes())


def load_points(path):
    buf = Path(path).read_bytes()
    if buf[:4] != b"SSPT":
        raise ValueError(f"{path}: bad magic, expected SSPT")
    version, m = struct.unpack_from("<IQ", buf, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported SSPT version {version}")
    if len(buf) != 16 + 16 * m:
        raise ValueError(f"{path}: size does not match {m} points")
    pos = np.frombuffer(buf, "<f4", 3 * m, 16).reshape(m, 3).astype(np.float64)
    lab = np.frombuffer(buf, "<u4", m, 16 + 12 * m).astype(np.int64)
    return pos, lab


# -- classification and voting -----------------------------------------------

def similarity(features, embeddings) -> np.ndarray:
    f = np.asarray(features, np.float64)
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return (f / np.where(n > 0, n, 1.0)) @ np.asarray(embeddings, np.float64).T


def classify_gaussians(fld: SemanticFeatureField, classes: ClassTable) -> np.ndarray:
    """Class id of the most similar text embedding; unlabeled rows get ``VOID``.

    Similarities within 1e-12 of the best count as tied; ties go to the smallest id.
    """
    out = np.full(len(fld), VOID, np.int64)
    lab = fld.labeled & (np.linalg.norm(fld.features, axis=1) > 0)
    if not lab.any() or len(classes) == 0:
        return out
    s = similarity(fld.features[lab], classes.embeddings)
    best = s.max(axis=1, keepdims=True)
    first = np.argmax(s >= best - TIE_TOL, axis=1)
    out[lab] = classes.ids[first]
    return out


def knn_indices(centers, queries, k: int, threads: int = 1) -> np.ndarray:
    """Exact k nearest centers per query, ordered by (squared distance, index)."""
    c = np.asarray(centers, np.float64)
    q = np.asarray(queries, np.float64).reshape(-1, 3)
    n = len(c)
    if n == 0:
        raise ValueError("cannot vote in an empty scene")
    if k < 1:
        raise ValueError("k must be at least 1")
    k = min(k, n)
    kk = min(n, k + 8)
    tree = cKDTree(c)
    dist, idx = tree.query(q, k=kk, workers=threads)
    dist = dist.reshape(len(q), kk)
    idx = idx.reshape(len(q), kk)
    d2 = np.sum((c[idx] - q[:, None, :]) ** 2, axis=2)
    order = np.lexsort((idx, d2), axis=1)
    idx = np.take_along_axis(idx, order, 1)
    d2 = np.take_along_axis(d2, order, 1)
    if kk < n:
        # candidates past the queried set are at least dist[:, -1] away; rows
        # whose k-th distance reaches that bound are resolved exhaustively
        unsure = d2[:, k - 1] >= (dist[:, -1] ** 2) * (1 - 1e-9)
        for r in np.flatnonzero(unsure):
            full = np.sum((c - q[r]) ** 2, axis=1)
            idx[r, :k] = np.lexsort((np.arange(n), full))[:k]
    return idx[:, :k]


def vote(neigh_classes: np.ndarray) -> np.ndarray:
    """Majority over each row, ignoring ``VOID``; ties go to the nearest tied class."""
    nc = np.asarray(neigh_classes, np.int64)
    m, k = nc.shape
    out = np.full(m, VOID, np.int64)
    valid = nc != VOID
    if not valid.any():
        return out
    uniq, comp = np.unique(nc[valid], return_inverse=True)
    rows, pos = np.nonzero(valid)
    counts = np.zeros((m, len(uniq)), np.int64)
    np.add.at(counts, (rows, comp), 1)
    first = np.full((m, len(uniq)), k, np.int64)
    np.minimum.at(first, (rows, comp), pos)
    best = counts.max(axis=1, keepdims=True)
    key = np.where(counts == best, first, k + 1)
    has = valid.any(axis=1)
    out[has] = uniq[np.argmin(key[has], axis=1)]
    return out


def knn_vote(centers, classes, queries, k: int = 25, threads: int = 1) -> np.ndarray:
    idx = knn_indices(centers, queries, k, threads)
    return vote(np.asarray(classes, np.int64)[idx])


# -- metrics -------------------------------------------------------------------

@dataclass
class SegmentationReport:
    class_ids: np.ndarray
    names: tuple
    iou: np.ndarray        # nan for classes absent from gt
    acc: np.ndarray
    miou: float
    macc: float
    fmiou: float
    fmacc: float
    confusion: np.ndarray  # C x (C + 1); last column = void predictions
    background: tuple = ()

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "name", "iou", "acc", "gt_count", "background"])
        for i, cid in enumerate(self.class_ids):
            w.writerow([int(cid), self.names[i], _f(self.iou[i]), _f(self.acc[i]),
                        int(self.confusion[i].sum()), int(cid in self.background)])
        for key in ("miou", "macc", "fmiou", "fmacc"):
            w.writerow([key, "", _f(getattr(self, key)), "", "", ""])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> str:
        lines = [f"mIoU {self.miou:.4f}  mAcc {self.macc:.4f}  "
                 f"f-mIoU {self.fmiou:.4f}  f-mAcc {self.fmacc:.4f}"]
        for i, cid in enumerate(self.class_ids):
            if not np.isnan(self.iou[i]):
                lines.append(f"  {int(cid):4d} {self.names[i]:<16} IoU {self.iou[i]:.4f} "
                             f"Acc {self.acc[i]:.4f}")
        return "\n".join(lines)


def _f(x) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


def _nanmean(x) -> float:
    x = np.asarray(x, np.float64)
    x = x[~np.isnan(x)]
    return float(x.mean()) if len(x) else float("nan")


def seg_metrics(pred, gt, classes, background_ids=()) -> SegmentationReport:
    """Per-class IoU/accuracy over classes present in ``gt``; void predictions are misses.

    ``classes`` is a :class:`ClassTable` or a sequence of class ids.
    """
    if isinstance(classes, ClassTable):
        ids, names = classes.ids, classes.names
    else:
        ids = np.sort(np.asarray(classes, np.int64))
        names = tuple(str(i) for i in ids)
    pred = np.asarray(pred, np.int64).reshape(-1)
    gt = np.asarray(gt, np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have the same length")
    pos = {int(c): i for i, c in enumerate(ids)}
    unknown = sorted(set(np.unique(gt).tolist()) - set(pos))
    if unknown:
        raise ValueError(f"ground-truth ids missing from the class table: {unknown}")
    bad = sorted(set(np.unique(pred).tolist()) - set(pos) - {VOID})
    if bad:
        raise ValueError(f"predicted ids missing from the class table: {bad}")
    C = len(ids)
    lut = np.full(int(max(ids.max(initial=0), pred.max(initial=0), gt.max(initial=0))) + 2, C)
    lut[ids] = np.arange(C)
    gi = lut[gt]
    pi = np.where(pred == VOID, C, lut[np.maximum(pred, 0)])
    cm = np.zeros((C, C + 1), np.int64)
    np.add.at(cm, (gi, pi), 1)
    tp = np.diag(cm[:, :C]).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm[:, :C].sum(axis=0).astype(np.float64)
    present = rows > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (rows + cols - tp), np.nan)
        acc = np.where(present, tp / rows, np.nan)
    bg = tuple(int(b) for b in background_ids)
    fg = ~np.isin(ids, bg)
    return SegmentationReport(ids.copy(), tuple(names), iou, acc, _nanmean(iou), _nanmean(acc),
                              _nanmean(iou[fg]), _nanmean(acc[fg]), cm, bg)


# -- text query ------------------------------------------------------------------

RED_DC = np.array([0.5, -0.5, -0.5]) / SH_C0


def text_query(fld: SemanticFeatureField, query_embedding, top_fraction: float = 0.02) -> np.ndarray:
    """Indices of labeled Gaussians in the top ``top_fraction`` by cosine similarity.

    The count is ``ceil(top_fraction * n_labeled)``; equal scores break by index.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must lie in (0, 1]")
    q = np.asarray(query_embedding, np.float64).reshape(-1)
    if q.shape[0] != fld.dim:
        raise ValueError(f"query has {q.shape[0]} dims, field has {fld.dim}")
    lab = np.flatnonzero(fld.labeled)
    if len(lab) == 0:
        return lab
    s = similarity(fld.features[lab], q[None] / np.linalg.norm(q))[:, 0]
    n = min(len(lab), max(1, math.ceil(top_fraction * len(lab) - 1e-9)))
    order = np.lexsort((lab, -s))
    return np.sort(lab[order[:n]])


def highlight(scene: GaussianScene, indices) -> GaussianScene:
    sh = scene.sh.copy()
    sh[np.asarray(indices, np.int64), :3] = RED_DC
    return scene.replace(sh=sh)


def export_query(scene: GaussianScene, indices, path) -> None:
    save_scene_ply(highlight(scene, indices), path)


# -- curation ------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class CurationReport:
    keep: bool
    reasons: list
    checks: list = field(default_factory=list)   # (name, passed, detail) in order
    blurry_frames: list = field(default_factory=list)
    frame_count: int = 0
    mean_psnr: Optional[float] = None

    def to_dict(self) -> dict:
        return {"keep": self.keep, "reasons": self.reasons,
                "checks": [{"name": n, "passed": p, "detail": d} for n, p, d in self.checks],
                "blurry_frames": self.blurry_frames, "frame_count": self.frame_count,
                "mean_psnr": self.mean_psnr}


def curate_frames(frames: Sequence, pairs: Sequence = (), frame_names=None,
                  min_frames: int = 400, sharpness_min: float = 100.0 / 255.0 ** 2,
                  psnr_min: float = 20.0) -> CurationReport:
    """Frame count, per-frame sharpness, then mean render PSNR.

    ``frames`` may hold arrays or zero-argument loaders; ``pairs`` holds
    ``(render, gt)`` tuples of the same kind.  Blurry frames are listed for
    exclusion and do not drop the scene on their own.
    """
    names = list(frame_names) if frame_names is not None else [str(i) for i in range(len(frames))]
    checks, reasons = [], []
    n = len(frames)
    ok = n >= min_frames
    checks.append(("frame_count", ok, f"{n} frames, need {min_frames}"))
    if not ok:
        reasons.append("frame_count")
    blurry = []
    for name, fr in zip(names, frames):
        img = fr() if callable(fr) else fr
        if laplacian_sharpness(img) < sharpness_min:
            blurry.append(name)
    checks.append(("sharpness", True, f"{len(blurry)} of {n} frames below {sharpness_min:.6g}"))
    mean_psnr = None
    if len(pairs):
        vals = []
        for r, g in pairs:
            vals.append(psnr(r() if callable(r) else r, g() if callable(g) else g))
        mean_psnr = float(np.mean(vals))
        ok = mean_psnr >= psnr_min
        checks.append(("psnr", ok, f"mean {mean_psnr:.3f} dB, need {psnr_min}"))
        if not ok:
            reasons.append("psnr")
    else:
        checks.append(("psnr", True, "no render pairs provided; skipped"))
    return CurationReport(not reasons, reasons, checks, blurry, n, mean_psnr)


def _images(d: Path) -> list:
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def curate(scene_dir, min_frames: int = 400, sharpness_min: float = 100.0 / 255.0 ** 2,
           psnr_min: float = 20.0) -> CurationReport:
    """Curate a directory holding ``frames/``, and optionally ``renders/`` plus ``gt/``.

    Renders pair with ground-truth images of the same file name.
    """
    root = Path(scene_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory {root} does not exist")
    frames = _images(root / "frames")
    gt = {p.name: p for p in _images(root / "gt")}
    pairs = []
    for r in _images(root / "renders"):
        if r.name not in gt:
            raise ValueError(f"render {r.name} has no ground-truth image in {root / 'gt'}")
        pairs.append((lambda p=r: load_image(p), lambda p=gt[r.name]: load_image(p)))
    return curate_frames([lambda p=p: load_image(p) for p in frames], pairs,
                         [p.name for p in frames], min_frames, sharpness_min, psnr_min)
