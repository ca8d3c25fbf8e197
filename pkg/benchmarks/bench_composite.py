"""Compare the compiled and NumPy compositing kernels on random scenes.

Usage: python3 benchmarks/bench_composite.py [--sizes 1000 5000 20000] [--repeat 3]
"""

import argparse
import time

import numpy as np

from splatsem.raster import Camera, available_backends, composite
from splatsem.scene import GaussianScene


def random_scene(n, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(rng.uniform(-1, 1, (n, 3)), rng.uniform(0.01, 0.06, (n, 3)), q,
                         rng.uniform(0.05, 1.0, n), rng.normal(0, 0.5, (n, 48)))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 5000, 20000])
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--height", type=int, default=192)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    cam = Camera.look_at([0, -4, 0.5], [0, 0, 0], fx=a.width, width=a.width, height=a.height)
    backends = available_backends()
    print(f"{'N':>7} " + " ".join(f"{b:>10}" for b in backends) + "   speedup  max|diff|")
    for n in a.sizes:
        scene = random_scene(n)
        res = {b: composite(scene, cam, threads=a.threads, backend=b) for b in backends}
        t = {b: best_of(lambda b=b: composite(scene, cam, threads=a.threads, backend=b), a.repeat)
             for b in backends}
        line = f"{n:>7} " + " ".join(f"{t[b]:>9.3f}s" for b in backends)
        if len(backends) == 2:
            diff = np.abs(res["python"][0].image - res["cython"][0].image).max()
            line += f"   {t['python'] / t['cython']:>6.1f}x  {diff:.1e}"
        print(line)


if __name__ == "__main__":
    main()
