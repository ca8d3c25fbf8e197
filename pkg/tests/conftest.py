import numpy as np
import pytest

from splatsem.scene import GaussianScene


def random_scene(n, seed=0, lo=-1.0, hi=1.0, scale=(0.01, 0.06)):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(rng.uniform(lo, hi, (n, 3)), rng.uniform(*scale, (n, 3)), q,
                         rng.uniform(0.05, 1.0, n), rng.normal(0, 0.5, (n, 48)),
                         scene_id=f"rand{seed}")


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scene100():
    return random_scene(100, seed=7)


def composite_oracle(scene, cam, max_contribs=64, alpha_max=0.99, t_min=1e-4):
    """Per-pixel reference blend written without tiles or vectorization."""
    from splatsem.raster.camera import project_scene

    proj = project_scene(scene, cam)
    vis = [i for i in range(len(scene)) if proj.visible[i]]
    vis.sort(key=lambda i: (proj.depths[i], i))
    prims = []
    for i in vis:
        cov = proj.covs[i]
        ev = np.linalg.eigvalsh(cov)
        if ev[0] <= 0 or ev[1] > 1e8 * ev[0]:
            continue
        r = 3.0 * np.sqrt(ev[1])
        prims.append((i, proj.means[i], np.linalg.inv(cov), r))
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    contribs = []
    rgb = scene.rgb.astype(np.float64)
    for row in range(H):
        for col in range(W):
            T, n = 1.0, 0
            px = np.array([col + 0.5, row + 0.5])
            for i, mu, inv, r in prims:
                if T < t_min or n >= max_contribs:
                    break
                d = px - mu
                if abs(d[0]) > r or abs(d[1]) > r:
                    continue
                a = min(float(scene.opacities[i]) * np.exp(-0.5 * d @ inv @ d), alpha_max)
                if a <= 0:
                    continue
                contribs.append((row * W + col, i, a * T))
                image[row, col] += a * T * rgb[i]
                T *= 1 - a
                n += 1
            trans[row, col] = T
    return np.clip(image, 0, 1), trans, contribs


def separated_scene(n=20, seed=0, spacing=0.5, scale=0.03):
    """Small Gaussians on a jittered grid in the z=0 plane, far apart relative to their size."""
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n)))
    ij = np.array([(i, j) for i in range(side) for j in range(side)][:n], float)
    centers = np.c_[(ij - (side - 1) / 2) * spacing, np.zeros(n)]
    centers[:, :2] += rng.uniform(-0.05, 0.05, (n, 2))
    q = np.tile([1.0, 0, 0, 0], (n, 1))
    return GaussianScene(centers, np.full((n, 3), scale), q, np.full(n, 0.9),
                         rng.normal(0, 0.3, (n, 48)), scene_id="sep")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[n])
