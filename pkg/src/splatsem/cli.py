"""``splatsem`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 invalid input or config, 3 runtime failure.  Every
run that writes outputs also writes ``manifest.json`` with input and artifact
hashes, the config digest and the seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("splatsem")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class InputError(ValueError):
    """Bad user input (missing files, inconsistent arguments)."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _exists(paths):
    for p in paths:
        if not Path(p).exists():
            raise InputError(f"input not found: {p}")


def write_manifest(out: Path, command: str, inputs, cfg: RunConfig) -> dict:
    """Inputs are recorded by file name and hash so identical runs in different
    directories produce identical manifests."""
    arts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "inputs": [{"name": Path(p).name, "sha256": sha256(p)} for p in inputs
                   if Path(p).is_file()],
        "artifacts": {p.relative_to(out).as_posix(): sha256(p) for p in arts},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# -- subcommands: each returns the list of input paths it consumed --------------

def cmd_fuse(a, cfg, out: Path):
    from .fusion import build_feature_map, load_segment_mask, load_triples, save_feature_map

    if len(a.mask) != len(a.triples):
        raise InputError("--mask and --triples need the same number of files")
    frame = np.load(a.frame_feature) if a.frame_feature else None
    _exists(a.mask + a.triples)
    if a.dry_run:
        return a.mask + a.triples
    for i, (m, t) in enumerate(zip(a.mask, a.triples)):
        fm = build_feature_map(load_segment_mask(m), load_triples(t), frame)
        save_feature_map(fm, out / f"featmap_{i:03d}.ssfm")
    return a.mask + a.triples


def _load_scene(path, cfg):
    from .scene import load_scene_ply

    return load_scene_ply(path, cfg.data.activation)


def cmd_lift(a, cfg, out: Path):
    from .fusion import load_feature_map
    from .raster import composite, lift_features, load_cameras
    from .scene import save_feature_field

    _exists([a.scene, a.cameras] + a.feature_maps)
    scene = _load_scene(a.scene, cfg)
    cams = load_cameras(a.cameras)
    if len(cams) != len(a.feature_maps):
        raise InputError(f"{len(cams)} cameras but {len(a.feature_maps)} feature maps")
    if a.dry_run:
        return [a.scene, a.cameras] + a.feature_maps
    contribs = [composite(scene, c, threads=a.threads)[1] for c in cams]
    fld = lift_features(contribs, [load_feature_map(p) for p in a.feature_maps], len(scene),
                        scene.scene_id)
    save_feature_field(fld, out / "field.ssff")
    return [a.scene, a.cameras] + a.feature_maps


def cmd_render(a, cfg, out: Path):
    from .raster import composite, load_cameras
    from .raster.metrics import save_image

    _exists([a.scene, a.cameras])
    scene = _load_scene(a.scene, cfg)
    cams = load_cameras(a.cameras)
    if a.dry_run:
        return [a.scene, a.cameras]
    stats = []
    for i, cam in enumerate(cams):
        tgt, con = composite(scene, cam, threads=a.threads)
        name = cam.frame_id or f"{i:04d}"
        save_image(out / f"render_{name}.png", tgt.image, bits=16)
        stats.append({"frame": name, **{k: v for k, v in tgt.diagnostics.items()
                                        if isinstance(v, (int, float, str))}})
    (out / "render_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return [a.scene, a.cameras]


def cmd_curate(a, cfg, out: Path):
    from .evaluate import curate

    _exists([a.scene_dir])
    if a.dry_run:
        return []
    e = cfg.eval
    rep = curate(a.scene_dir, e.min_frames, e.sharpness_min, e.psnr_min)
    (out / "curation.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    print(f"{'keep' if rep.keep else 'drop'}" + (f" ({', '.join(rep.reasons)})" if rep.reasons else ""))
    return []


def _fields(paths):
    from .scene import load_feature_field

    return [load_feature_field(p) for p in paths]


def cmd_train_ae(a, cfg, out: Path):
    from .pretrain import train_autoencoder

    _exists(a.fields)
    if a.dry_run:
        return a.fields
    res = train_autoencoder(cfg.autoencoder, _fields(a.fields), cfg.seed, out)
    (out / "metrics.json").write_text(json.dumps(res.metrics, indent=1, sort_keys=True))
    if a.compress:
        from .pretrain import compress_features
        from .scene import save_feature_field

        for p, f in zip(a.fields, _fields(a.fields)):
            save_feature_field(compress_features(res.model, f), out / f"{Path(p).stem}_c16.ssff")
    return a.fields


def cmd_train_vl(a, cfg, out: Path):
    from .pretrain import train_vl

    scenes = a.scenes or list(cfg.data.scenes)
    fields = a.fields or list(cfg.data.fields)
    labels = a.labels or list(cfg.data.labels)
    _exists(scenes + fields + labels)
    if not scenes:
        raise InputError("no training scenes given")
    if labels and len(labels) != len(scenes):
        raise InputError("--labels needs one file per scene")
    sc = [_load_scene(p, cfg) for p in scenes]
    fl = _fields(fields)
    lab = [np.load(p, allow_pickle=False).astype(np.int64) for p in labels] or None
    if a.dry_run:
        return scenes + fields + labels
    train_vl(cfg, sc, fl, lab, out)
    return scenes + fields + labels


def cmd_train_ssl(a, cfg, out: Path):
    from .pretrain import train_ssl

    scenes = a.scenes or list(cfg.data.scenes)
    comp = a.compressed or list(cfg.data.compressed)
    _exists(scenes + comp)
    if not scenes:
        raise InputError("no training scenes given")
    sc = [_load_scene(p, cfg) for p in scenes]
    cf = _fields(comp) or None
    if "la" in cfg.train.objectives and cf is None:
        raise ConfigError("objective 'la' needs --compressed feature fields")
    if a.dry_run:
        return scenes + comp
    train_ssl(cfg, sc, cf, out)
    return scenes + comp


def cmd_infer(a, cfg, out: Path):
    from .pretrain import infer, load_model
    from .scene import save_feature_field

    _exists([a.checkpoint, a.scene])
    state, _, _ = load_model(a.checkpoint)
    scene = _load_scene(a.scene, cfg)
    if a.dry_run:
        return [a.checkpoint, a.scene]
    save_feature_field(infer(state.model, scene, cfg.train.max_tokens), out / "field.ssff")
    return [a.checkpoint, a.scene]


def cmd_eval(a, cfg, out: Path):
    from .evaluate import classify_gaussians, knn_vote, load_class_table, load_points, seg_metrics
    from .scene import load_feature_field

    _exists([a.field, a.scene, a.classes, a.points])
    fld = load_feature_field(a.field)
    scene = _load_scene(a.scene, cfg)
    if len(fld) != len(scene):
        raise InputError(f"field has {len(fld)} rows but scene has {len(scene)} Gaussians")
    table = load_class_table(a.classes)
    if table.embeddings.shape[1] != fld.dim:
        raise InputError(f"class embeddings are {table.embeddings.shape[1]}-d, field is {fld.dim}-d")
    pos, gt = load_points(a.points)
    if a.dry_run:
        return [a.field, a.scene, a.classes, a.points]
    g = classify_gaussians(fld, table)
    pred = knn_vote(scene.centers, g, pos, cfg.eval.k, a.threads)
    rep = seg_metrics(pred, gt, table, table.ids_for(cfg.eval.background))
    rep.to_csv(out / "report.csv")
    (out / "summary.txt").write_text(rep.summary() + "\n")
    print(rep.summary())
    return [a.field, a.scene, a.classes, a.points]


def cmd_query(a, cfg, out: Path):
    from .evaluate import export_query, load_class_table, text_query
    from .scene import load_feature_field

    _exists([a.field, a.scene])
    fld = load_feature_field(a.field)
    scene = _load_scene(a.scene, cfg)
    if len(fld) != len(scene):
        raise InputError(f"field has {len(fld)} rows but scene has {len(scene)} Gaussians")
    inputs = [a.field, a.scene]
    if a.embedding:
        _exists([a.embedding])
        q = np.load(a.embedding, allow_pickle=False)
        inputs.append(a.embedding)
    elif a.text and a.classes:
        _exists([a.classes])
        table = load_class_table(a.classes)
        if a.text not in table.names:
            raise InputError(f"class {a.text!r} is not in {a.classes}")
        q = table.embeddings[table.names.index(a.text)]
        inputs.append(a.classes)
    else:
        raise InputError("query needs --embedding, or --text with --classes")
    p = a.top_fraction if a.top_fraction is not None else cfg.eval.top_fraction
    if a.dry_run:
        return inputs
    sel = text_query(fld, q, p)
    export_query(scene, sel, out / "query.ply")
    (out / "selected.json").write_text(json.dumps({"top_fraction": p, "indices": sel.tolist()}))
    print(f"selected {len(sel)} of {int(fld.labeled.sum())} labeled Gaussians")
    return inputs


COMMANDS = {
    "fuse": cmd_fuse, "lift": cmd_lift, "render": cmd_render, "curate": cmd_curate,
    "train-ae": cmd_train_ae, "train-vl": cmd_train_vl, "train-ssl": cmd_train_ssl,
    "infer": cmd_infer, "eval": cmd_eval, "query": cmd_query,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for raster/KNN")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--dry-run", action="store_true", help="validate inputs only")
    p = argparse.ArgumentParser(prog="splatsem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fuse", parents=[common], help="fuse segment embeddings into feature maps")
    s.add_argument("--mask", nargs="+", required=True)
    s.add_argument("--triples", nargs="+", required=True)
    s.add_argument("--frame-feature", help=".npy frame embedding shared by all segments")

    s = sub.add_parser("lift", parents=[common], help="lift 2D feature maps onto Gaussians")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--feature-maps", nargs="+", required=True)

    s = sub.add_parser("render", parents=[common], help="render a scene from cameras")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)

    s = sub.add_parser("curate", parents=[common], help="scene keep/drop checks")
    s.add_argument("--scene-dir", required=True)

    s = sub.add_parser("train-ae", parents=[common], help="train the feature autoencoder")
    s.add_argument("--fields", nargs="+", required=True)
    s.add_argument("--compress", action="store_true", help="also write compressed fields")

    s = sub.add_parser("train-vl", parents=[common], help="language-feature pretraining")
    s.add_argument("--scenes", nargs="+", default=[])
    s.add_argument("--fields", nargs="+", default=[])
    s.add_argument("--labels", nargs="+", default=[], help=".npy per-Gaussian class ids (-1 none)")

    s = sub.add_parser("train-ssl", parents=[common], help="self-supervised pretraining")
    s.add_argument("--scenes", nargs="+", default=[])
    s.add_argument("--compressed", nargs="+", default=[])

    s = sub.add_parser("infer", parents=[common], help="predict a feature field for a scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)

    s = sub.add_parser("eval", parents=[common], help="zero-shot segmentation metrics")
    s.add_argument("--field", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--points", required=True)

    s = sub.add_parser("query", parents=[common], help="highlight Gaussians matching a query")
    s.add_argument("--field", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--embedding")
    s.add_argument("--text")
    s.add_argument("--classes")
    s.add_argument("--top-fraction", type=float)
    return p


def _setup_logging():
    level = os.environ.get("SPLATSEM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    from .fusion import FusionError
    from .nn.checkpoint import CheckpointError
    from .scene import PlyError, SceneValidationError

    invalid = (ConfigError, InputError, FusionError, PlyError, SceneValidationError,
               CheckpointError, FileNotFoundError, ValueError, KeyError)
    try:
        cfg = load_config(a.config) if a.config else RunConfig()
        if a.seed is not None:
            cfg = cfg.with_(seed=a.seed)
        if a.threads < 1:
            raise InputError("--threads must be at least 1")
        out = Path(a.out)
        if not a.dry_run:
            out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[a.command](a, cfg, out)
        if not a.dry_run:
            write_manifest(out, a.command, inputs + ([a.config] if a.config else []), cfg)
    except invalid as e:
        print(f"splatsem {a.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"splatsem {a.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
