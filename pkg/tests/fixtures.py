"""Synthetic scenes shared by the training, evaluation and acceptance tests."""

import numpy as np

from splatsem.scene import SH_C0, GaussianScene, SemanticFeatureField

CLASS_NAMES = ("floor", "chair", "table")


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def labeled_scene(n=512, d=16, seed=0, noise=0.05):
    """Three spatially and chromatically distinct classes with class-consistent target features.

    Returns ``(scene, field, labels, embeddings)``; class 0 is a flat floor.
    """
    rng = np.random.default_rng(seed)
    sizes = [n // 2, n // 4, n - n // 2 - n // 4]
    cls = np.repeat([0, 1, 2], sizes)
    c = np.zeros((n, 3))
    c[cls == 0] = np.c_[rng.uniform(0, 2, (sizes[0], 2)), rng.normal(0, 0.01, sizes[0])]
    c[cls == 1] = rng.normal([0.5, 0.5, 0.4], 0.12, (sizes[1], 3))
    c[cls == 2] = rng.normal([1.4, 1.4, 0.7], 0.15, (sizes[2], 3))
    rgb = np.array([[0.5, 0.5, 0.5], [0.8, 0.1, 0.1], [0.5, 0.3, 0.1]])[cls]
    rgb = np.clip(rgb + rng.normal(0, 0.03, (n, 3)), 0, 1)
    sh = np.zeros((n, 48))
    sh[:, :3] = (rgb - 0.5) / SH_C0
    scene = GaussianScene(c, rng.uniform(0.01, 0.03, (n, 3)), _unit(rng.normal(size=(n, 4))),
                          rng.uniform(0.5, 1, n), sh, scene_id=f"labeled{seed}")
    emb = _unit(rng.normal(size=(3, d)))
    field = SemanticFeatureField.from_rows(emb[cls] + rng.normal(0, noise, (n, d)),
                                           scene_id=scene.scene_id)
    return scene, field, cls, emb


def grid_scene(side=4, spacing=0.1, seed=0):
    """side^3 Gaussians on a regular lattice with random appearance."""
    rng = np.random.default_rng(seed)
    g = np.stack(np.meshgrid(*[np.arange(side) * spacing] * 3, indexing="ij"), -1).reshape(-1, 3)
    n = len(g)
    sh = np.concatenate([(rng.uniform(0, 1, (n, 3)) - 0.5) / SH_C0,
                         rng.normal(0, 0.05, (n, 45))], 1)
    return GaussianScene(g, rng.uniform(0.01, 0.05, (n, 3)), _unit(rng.normal(size=(n, 4))),
                         rng.uniform(0.1, 0.9, n), sh, scene_id="grid")


def two_cluster_corpus(n=600, dim=768, seed=0, noise=0.02):
    """Rows drawn around two random unit directions."""
    rng = np.random.default_rng(seed)
    centers = _unit(rng.normal(size=(2, dim)))
    rows = centers[rng.integers(0, 2, n)] + rng.normal(0, noise / np.sqrt(dim), (n, dim))
    return rows


def knn_vote_oracle(centers, classes, queries, k):
    """Full distance sort per query, then a counting vote with nearest-first tie-break."""
    centers = np.asarray(centers, np.float64)
    classes = np.asarray(classes)
    idx = np.arange(len(centers))
    out = []
    for q in np.asarray(queries, np.float64):
        d2 = np.sum((centers - q) ** 2, axis=1)
        labs = [int(c) for c in classes[np.lexsort((idx, d2))[:k]] if c != -1]
        if not labs:
            out.append(-1)
            continue
        counts = {c: labs.count(c) for c in labs}
        best = max(counts.values())
        out.append(next(c for c in labs if counts[c] == best))
    return np.array(out, np.int64)


def random_knn_instance(rng, n_max=2000, m_max=500, n_classes=6, grid=False):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    if grid:
        # coarse lattice coordinates make exact distance ties common
        centers = rng.integers(0, 6, (n, 3)).astype(np.float64)
        queries = rng.integers(0, 6, (m, 3)) + rng.choice([0.0, 0.5], (m, 3))
    else:
        centers = rng.uniform(-1, 1, (n, 3))
        queries = rng.uniform(-1.2, 1.2, (m, 3))
    classes = rng.integers(-1, n_classes, n)
    return centers, classes, queries


def pipeline_cameras(center=(1.0, 1.0, 0.3), size=64):
    from splatsem.raster import Camera

    cx, cy, cz = center
    eyes = [(cx, cy, 4.0), (cx + 1.5, cy - 0.5, 3.5), (cx - 1.2, cy + 1.2, 3.5),
            (cx - 0.3, cy - 1.6, 3.2)]
    return [Camera.look_at(e, center, up=(0, 1, 0), fx=70.0, width=size, height=size,
                           frame_id=f"v{i}") for i, e in enumerate(eyes)]


def write_pipeline_inputs(root, n=256, d=8, seed=0):
    """Scene, cameras, per-view segment masks and triples, labels, class table and eval points.

    Segments are the rendered class regions; every triple carries its class embedding,
    so fused maps paint exact class features.
    """
    from pathlib import Path

    from splatsem.evaluate import ClassTable, save_class_table, save_points
    from splatsem.fusion import SegmentFeatureTriple, SegmentMask, save_segment_mask, save_triples
    from splatsem.raster import composite, save_cameras
    from splatsem.scene import save_scene_ply

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scene, _, cls, emb = labeled_scene(n, d, seed)
    cams = pipeline_cameras()
    save_scene_ply(scene, root / "scene.ply")
    save_cameras(cams, root / "cameras.json")
    masks, triples = [], []
    for i, cam in enumerate(cams):
        _, con = composite(scene, cam)
        best = np.zeros(cam.width * cam.height)
        seg = np.zeros(cam.width * cam.height, np.uint32)
        for p, g, w in zip(con.pixel, con.primitive, con.weight):
            if w > best[p]:
                best[p], seg[p] = w, cls[g] + 1
        save_segment_mask(SegmentMask(seg.reshape(cam.height, cam.width)), root / f"mask{i}.sseg")
        save_triples([SegmentFeatureTriple(c + 1, emb[c], emb[c], emb[c]) for c in range(3)],
                     root / f"triples{i}.sstr")
        masks.append(root / f"mask{i}.sseg")
        triples.append(root / f"triples{i}.sstr")
    np.save(root / "labels.npy", cls)
    save_class_table(ClassTable(np.arange(3), CLASS_NAMES, emb), root / "classes.json")
    rng = np.random.default_rng(seed + 1)
    save_points(root / "points.sspt", scene.centers + rng.normal(0, 0.005, (n, 3)), cls)
    return {"scene": root / "scene.ply", "cameras": root / "cameras.json", "masks": masks,
            "triples": triples, "labels": root / "labels.npy", "classes": root / "classes.json",
            "points": root / "points.sspt", "n_labels": cls}


def run_cli_pipeline(inp, out, cfg_path, extra=()):
    """fuse, lift, train-vl, infer and eval through the CLI; returns manifest text per stage."""
    from splatsem.cli import main

    steps = [
        ["fuse", "--mask", *map(str, inp["masks"]), "--triples", *map(str, inp["triples"])],
        ["lift", "--scene", str(inp["scene"]), "--cameras", str(inp["cameras"]),
         "--feature-maps", *[str(out / "fuse" / f"featmap_{i:03d}.ssfm")
                             for i in range(len(inp["masks"]))]],
        ["train-vl", "--scenes", str(inp["scene"]), "--fields", str(out / "lift" / "field.ssff"),
         "--labels", str(inp["labels"])],
        ["infer", "--checkpoint", str(out / "train-vl" / "final.ssck"), "--scene",
         str(inp["scene"])],
        ["eval", "--field", str(out / "infer" / "field.ssff"), "--scene", str(inp["scene"]),
         "--classes", str(inp["classes"]), "--points", str(inp["points"])],
    ]
    manifests = {}
    for argv in steps:
        name = argv[0]
        rc = main(argv + ["--config", str(cfg_path), "--out", str(out / name), *extra])
        if rc != 0:
            raise AssertionError(f"{name} exited with {rc}")
        manifests[name] = (out / name / "manifest.json").read_text()
    return manifests
