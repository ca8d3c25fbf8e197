"""Training loops: language-feature regression, self-supervised pretraining and
the feature-compression autoencoder.  Everything is seeded per step, so a
config plus seed fully determines the resulting parameters.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses as L
from .augment import (AugmentationSpec, apply_augmentation, base_steps, global_view_steps,
                      local_view_steps)
from .config import AutoencoderConfig, ConfigError, RunConfig
from .nn import autograd as ag
from .nn.autograd import Tensor, no_grad
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import MLP, Module
from .nn.model import Backbone, NetworkSpec, NetworkState
from .nn.optim import AdamW, EMATeacher, one_cycle_lr
from .sampling import grid_sample, mask_positions, sample_crop
from .scene import GaussianScene, SemanticFeatureField

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def step_seed(seed: int, step: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])


@dataclass
class TrainResult:
    state: NetworkState
    log: list
    optimizer: Optional[AdamW] = None
    extras: dict = field(default_factory=dict)


def write_log(rows: Sequence[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else ["step", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _crop_spec(cfg: RunConfig, steps) -> AugmentationSpec:
    t = cfg.train
    return AugmentationSpec(list(steps) if t.augment else [],
                            (t.crop_global_min, t.crop_global_max),
                            (t.crop_local_min, t.crop_local_max),
                            t.max_tokens, min(t.max_tokens, 1024), t.grid_size)


def _finite(total: Tensor, step: int):
    if not np.isfinite(total.data).all():
        raise TrainingError(f"non-finite loss at step {step}")


def _sched(cfg: RunConfig, step: int) -> float:
    o = cfg.optim
    return one_cycle_lr(step, cfg.train.steps, o.lr, o.pct_start, o.div_factor,
                        o.final_div_factor)


def _check_pairs(scenes, fields_, what):
    if len(scenes) != len(fields_):
        raise ConfigError(f"need one {what} per scene ({len(scenes)} scenes, {len(fields_)} {what}s)")
    for s, f in zip(scenes, fields_):
        if len(f) != len(s):
            raise ConfigError(f"{what} for scene {s.scene_id!r} has {len(f)} rows, scene has {len(s)}")


def _view(scene: GaussianScene, spec: AugmentationSpec, kind: str, seed: int, grid=None):
    """Augment, optionally grid-sample, crop; return (tokens, scene indices)."""
    aug = apply_augmentation(scene, spec, step_seed(seed, 0, 11))
    pool = grid_sample(aug.scene, grid).indices if grid else None
    crop = sample_crop(aug.scene, kind, spec, step_seed(seed, 0, 12), indices=pool)
    tokens = aug.scene.attributes()[crop.indices]
    return tokens, aug.kept[crop.indices]


# -- vision-language -------------------------------------------------------

def train_vl(cfg: RunConfig, scenes, fields_, labels=None, out_dir=None) -> TrainResult:
    """Regress per-Gaussian language features from Gaussian attributes."""
    cfg.validate()
    _check_pairs(scenes, fields_, "feature field")
    if labels is not None:
        _check_pairs(scenes, labels, "label array")
    if fields_ and len({f.dim for f in fields_}) != 1:
        raise ConfigError("feature fields disagree on dimension")
    spec = replace(cfg.model, lang_dim=fields_[0].dim) if fields_ else cfg.model
    model = Backbone(spec, cfg.seed)
    w, t = cfg.loss, cfg.train
    log_tau = Tensor(np.log(w.tau_init), requires_grad=t.learn_tau)
    named = list(model.named_parameters()) + ([("log_tau", log_tau)] if t.learn_tau else [])
    opt = AdamW(named, cfg.optim.weight_decay)
    aspec = _crop_spec(cfg, base_steps())
    rows = []
    for step in range(t.steps):
        si = step % len(scenes)
        seed = step_seed(cfg.seed, step, 1)
        tokens, orig = _view(scenes[si], aspec, "global", seed)
        out = model(tokens, tokens[:, :3])
        target = fields_[si].features[orig].astype(np.float64)
        lab = fields_[si].labeled[orig]
        parts = {"cos": L.cosine_loss(out.language, target, lab),
                 "l2": L.l2_loss(out.language, target, lab)}
        frac = step / t.steps
        con = 0.0
        if labels is not None and w.con > 0 and frac >= w.contrast_start:
            cls = np.where(lab, np.asarray(labels[si])[orig], -1)
            parts["con"] = L.aggregated_contrastive(out.language, cls, ag.exp(log_tau),
                                                    t.min_class_size, step_seed(cfg.seed, step, 2))
            con = float(parts["con"].data)
        total = L.vl_total(parts, w, frac)
        _finite(total, step)
        opt.zero_grad()
        total.backward()
        lr = _sched(cfg, step)
        opt.step(lr)
        rows.append({"step": step, "lr": lr, "cos": float(parts["cos"].data),
                     "l2": float(parts["l2"].data), "con": con, "tau": float(np.exp(log_tau.data)),
                     "total": float(total.data)})
        _maybe_checkpoint(out_dir, cfg, step, model, opt, "vl", {"log_tau": log_tau.data})
    state = NetworkState(model, t.steps, {"seed": cfg.seed})
    result = TrainResult(state, rows, opt, {"log_tau": float(log_tau.data)})
    if out_dir is not None:
        save_model(Path(out_dir) / "final.ssck", state, opt, kind="vl",
                   extra={"scalars": {"log_tau": np.asarray(log_tau.data)}})
        write_log(rows, Path(out_dir) / "train_log.csv")
    return result


def _maybe_checkpoint(out_dir, cfg, step, model, opt, kind, scalars, teacher=None):
    every = cfg.train.checkpoint_every
    if out_dir is None or not every or (step + 1) % every or step + 1 == cfg.train.steps:
        return
    st = NetworkState(model, step + 1, {"seed": cfg.seed})
    extra = {"scalars": {k: np.asarray(v) for k, v in scalars.items()}}
    if teacher is not None:
        extra["ema"] = teacher.state_dict()
    save_model(Path(out_dir) / f"step_{step + 1:06d}.ssck", st, opt, kind=kind, extra=extra,
               spec=getattr(model, "backbone", model).spec)


def infer(model: Backbone, scene: GaussianScene, max_tokens: int = 4096) -> SemanticFeatureField:
    """Language features for every Gaussian, in spatial chunks of at most ``max_tokens``."""
    attrs = scene.attributes()
    n = len(attrs)
    out = np.zeros((n, model.spec.lang_dim))
    c = attrs[:, :3]
    order = np.lexsort((np.arange(n), c[:, 2], c[:, 1], c[:, 0]))
    with no_grad():
        for start in range(0, n, max_tokens):
            idx = order[start:start + max_tokens]
            out[idx] = model(attrs[idx], c[idx]).language.data
    return SemanticFeatureField.from_rows(out, np.linalg.norm(out, axis=1) > 0, scene.scene_id)


# -- self-supervised -------------------------------------------------------

class SSLStudent(Module):
    """Backbone plus the two projection heads, moved together by the EMA."""

    def __init__(self, spec: NetworkSpec, sim_dims, ibot_dims, seed: int):
        super().__init__()
        self.backbone = Backbone(spec, seed)
        rng = np.random.default_rng(step_seed(seed, 0, 99))
        d = spec.embed_dim
        self.sim_proj = L.Projector([d, *sim_dims], rng)
        self.ibot_proj = L.Projector([d, *ibot_dims], rng)


def _ssl_views(cfg: RunConfig, rng):
    """List of (kind, variant, masked, ratio, is_mgm) in student order: globals then locals."""
    t = cfg.train
    objs = set(t.objectives)
    n_masked = int(math.floor(t.masked_global_fraction * t.n_global + 0.5))
    if objs & {"mgm", "la"}:
        n_masked = max(1, n_masked)
    n_masked = min(n_masked, t.n_global)
    need_unmasked = bool(objs & {"dino", "ibot"})
    views = []
    for g in range(t.n_global):
        masked = g >= t.n_global - n_masked
        if not masked and not need_unmasked:
            continue
        # the last global uses the weak transform and carries the MGM mask
        mgm_view = masked and g == t.n_global - 1 and "mgm" in objs
        if mgm_view:
            ratio = t.mgm_ratio
        elif masked:
            ratio = float(rng.uniform(t.ibot_ratio_min, t.ibot_ratio_max))
        else:
            ratio = 0.0
        views.append(("global", 1 if g == t.n_global - 1 else g % 2, masked, ratio, mgm_view))
    if "dino" in objs:
        views += [("local", 0, False, 0.0, False)] * t.n_local
    return views


def train_ssl(cfg: RunConfig, scenes, compressed=None, out_dir=None) -> TrainResult:
    cfg.validate()
    t, w = cfg.train, cfg.loss
    objs = set(t.objectives)
    if "la" in objs:
        if compressed is None:
            raise ConfigError("language alignment needs compressed feature fields")
        _check_pairs(scenes, compressed, "compressed field")
    spec = replace(cfg.model, lang_dim=compressed[0].dim) if compressed else cfg.model
    student = SSLStudent(spec, t.sim_proj, t.ibot_proj, cfg.seed)
    teacher = EMATeacher(student, t.ema_momentum) if objs & {"dino", "ibot"} else None
    opt = AdamW(list(student.named_parameters()), cfg.optim.weight_decay)
    specs = {("global", 0): _crop_spec(cfg, base_steps() + global_view_steps(0)),
             ("global", 1): _crop_spec(cfg, base_steps() + global_view_steps(1)),
             ("local", 0): _crop_spec(cfg, base_steps() + local_view_steps())}
    rows = []
    for step in range(t.steps):
        si = step % len(scenes)
        rng = np.random.default_rng(step_seed(cfg.seed, step, 3))
        views = _ssl_views(cfg, rng)
        parts = {k: Tensor(0.0) for k in ("mgm", "sim", "cr", "ibot", "la")}
        pooled, t_pooled, n_ibot = [], [], 0
        for v, (kind, variant, masked, ratio, is_mgm) in enumerate(views):
            seed = step_seed(cfg.seed, step, 100 + v)
            tokens, orig = _view(scenes[si], specs[(kind, variant)], kind, seed, t.grid_size)
            pos = tokens[:, :3]
            mask = np.flatnonzero(mask_positions(len(tokens), ratio, step_seed(seed, 1, 13))) \
                if masked else np.zeros(0, np.int64)
            out = student.backbone(tokens, pos, mask)
            pooled.append(out.pooled)
            if is_mgm:
                parts["mgm"] = parts["mgm"] + L.mgm_loss(out.recon_all, tokens, mask)
            if masked and "la" in objs:
                cf = compressed[si]
                parts["la"] = parts["la"] + L.la_loss(out.language, cf.features[orig].astype(np.float64),
                                                      mask, cf.labeled[orig])
            if kind == "global" and teacher is not None:
                with no_grad():
                    t_out = teacher.module.backbone(tokens, pos)
                t_pooled.append(t_out.pooled.data)
                if masked and "ibot" in objs:
                    with no_grad():
                        t_tok = teacher.module.ibot_proj(t_out.encoded).data
                    parts["ibot"] = parts["ibot"] + L.ibot_loss(
                        student.ibot_proj(out.encoded), t_tok, mask)
                    n_ibot += 1
        if n_ibot > 1:
            parts["ibot"] = parts["ibot"] * (1.0 / n_ibot)
        if "dino" in objs:
            s_proj = student.sim_proj(ag.stack(pooled))
            with no_grad():
                t_proj = teacher.module.sim_proj(Tensor(np.stack(t_pooled))).data
            parts["sim"] = L.sim_loss(s_proj, t_proj)
            parts["cr"] = L.coding_rate_loss(s_proj, t.cr_eps)
        dino = parts["sim"] * w.sim + parts["cr"] * w.cr
        total = parts["mgm"] * w.mgm + dino * w.dino + parts["ibot"] * w.ibot + parts["la"] * w.la
        _finite(total, step)
        opt.zero_grad()
        total.backward()
        lr = _sched(cfg, step)
        opt.step(lr)
        if teacher is not None:
            teacher.update(student)
        row = {"step": step, "lr": lr}
        row.update({k: float(v.data) for k, v in parts.items()})
        row["total"] = float(total.data)
        rows.append(row)
        _maybe_checkpoint(out_dir, cfg, step, student, opt, "ssl", {},
                          teacher.module if teacher else None)
    state = NetworkState(student.backbone, t.steps, {"seed": cfg.seed})
    result = TrainResult(state, rows, opt, {"student": student, "teacher": teacher})
    if out_dir is not None:
        extra = {"ema": teacher.module.state_dict()} if teacher else {}
        save_model(Path(out_dir) / "final.ssck", NetworkState(student, t.steps, {"seed": cfg.seed}),
                   opt, kind="ssl", extra=extra, spec=spec)
        write_log(rows, Path(out_dir) / "train_log.csv")
    return result


# -- autoencoder -------------------------------------------------------------

class Autoencoder(Module):
    def __init__(self, encoder_dims, decoder_dims, seed: int = 0):
        super().__init__()
        if encoder_dims[-1] != decoder_dims[0]:
            raise ValueError("encoder output width must equal decoder input width")
        rng = np.random.default_rng(seed)
        self.encoder = MLP(list(encoder_dims), rng)
        self.decoder = MLP(list(decoder_dims), rng)
        self.dims = (tuple(encoder_dims), tuple(decoder_dims))

    def encode(self, x):
        return ag.l2_normalize(self.encoder(x), axis=-1)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


def reconstruction_metrics(ae: Autoencoder, rows) -> dict:
    """Mean squared row distance and mean cosine loss of decode(encode(x)) against x."""
    x = np.asarray(rows, np.float64)
    if len(x) == 0:
        return {"l2": 0.0, "cosine": 0.0}
    with no_grad():
        r = ae(x).data
    cos = np.sum(r * x, 1) / np.maximum(np.linalg.norm(r, axis=1) * np.linalg.norm(x, axis=1), 1e-12)
    return {"l2": float(np.mean(np.sum((r - x) ** 2, 1))), "cosine": float(np.mean(1 - cos))}


@dataclass
class AEResult:
    model: Autoencoder
    metrics: dict
    log: list


def _rows_of(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        return corpus.astype(np.float64)
    return np.concatenate([f.features[f.labeled].astype(np.float64) for f in corpus])


def train_autoencoder(spec: AutoencoderConfig, corpus, seed: int = 0, out_dir=None) -> AEResult:
    """Fit the compression autoencoder on labeled feature rows.

    ``corpus`` is an N x D array or a sequence of feature fields.  A
    ``spec.holdout`` fraction of rows is held out for the reported metrics.
    """
    spec.validate()
    x = _rows_of(corpus)
    if x.ndim != 2 or x.shape[1] != spec.encoder[0]:
        raise ConfigError(f"autoencoder expects {spec.encoder[0]}-d rows, got shape {x.shape}")
    if len(x) == 0:
        raise ConfigError("autoencoder corpus has no labeled rows")
    rng = np.random.default_rng(step_seed(seed, 0, 21))
    perm = rng.permutation(len(x))
    n_hold = int(round(spec.holdout * len(x))) if len(x) > 1 else 0
    hold, train = x[perm[:n_hold]], x[perm[n_hold:]]
    ae = Autoencoder(spec.encoder, spec.decoder, seed)
    opt = AdamW(list(ae.named_parameters()), spec.weight_decay)
    rows = []
    for step in range(spec.steps):
        b = np.random.default_rng(step_seed(seed, step, 22)).integers(0, len(train), min(spec.batch, len(train)))
        loss = L.l2_loss(ae(train[b]), train[b])
        _finite(loss, step)
        opt.zero_grad()
        loss.backward()
        lr = one_cycle_lr(step, spec.steps, spec.lr)
        opt.step(lr)
        rows.append({"step": step, "lr": lr, "l2": float(loss.data)})
    metrics = {"train": reconstruction_metrics(ae, train),
               "heldout": reconstruction_metrics(ae, hold if len(hold) else train)}
    res = AEResult(ae, metrics, rows)
    if out_dir is not None:
        save_autoencoder(Path(out_dir) / "autoencoder.ssck", ae, metrics)
        write_log(rows, Path(out_dir) / "train_log.csv")
    return res


def compress_features(ae: Autoencoder, fld: SemanticFeatureField) -> SemanticFeatureField:
    """Encode labeled rows; unlabeled rows stay zero and flagged."""
    out = np.zeros((len(fld), ae.dims[0][-1]))
    if fld.labeled.any():
        with no_grad():
            out[fld.labeled] = ae.encode(fld.features[fld.labeled].astype(np.float64)).data
    return SemanticFeatureField(out, fld.labeled.copy(), fld.scene_id)


# -- checkpoint I/O ----------------------------------------------------------

def save_model(path, state: NetworkState, optimizer: Optional[AdamW] = None, kind="vl",
               extra: Optional[dict] = None, spec: Optional[NetworkSpec] = None) -> None:
    sections = {"model": state.model.state_dict()}
    if optimizer is not None:
        sections["optim"] = optimizer.state_arrays()
    for k, v in (extra or {}).items():
        sections[k] = v
    spec = spec or state.model.spec
    meta = {"kind": kind, "step": state.step, "rng": state.rng_state,
            "spec": spec.to_dict(), "optim_t": optimizer.state.t if optimizer else 0}
    save_checkpoint(path, sections, meta)


def load_model(path):
    """Rebuild the backbone from a checkpoint; returns ``(state, sections, meta)``."""
    sections, meta = load_checkpoint(path)
    if meta.get("kind") not in ("vl", "ssl"):
        raise ConfigError(f"{path}: not a backbone checkpoint")
    spec = NetworkSpec.from_dict(meta["spec"])
    model = Backbone(spec, 0)
    params = sections["model"]
    if meta["kind"] == "ssl":
        params = {k[len("backbone."):]: v for k, v in params.items() if k.startswith("backbone.")}
    model.load_state_dict(params)
    return NetworkState(model, int(meta["step"]), meta.get("rng", {})), sections, meta


def save_autoencoder(path, ae: Autoencoder, metrics: Optional[dict] = None) -> None:
    save_checkpoint(path, {"ae": ae.state_dict()},
                    {"kind": "autoencoder", "encoder": list(ae.dims[0]),
                     "decoder": list(ae.dims[1]), "metrics": metrics or {}})


def load_autoencoder(path) -> Autoencoder:
    sections, meta = load_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise ConfigError(f"{path}: not an autoencoder checkpoint")
    ae = Autoencoder(meta["encoder"], meta["decoder"])
    ae.load_state_dict(sections["ae"])
    return ae
