#!/usr/bin/env python3
"""Smoke test for the nexmf Python extension.

Builds the cdylib with cargo, stages it as an importable module, and checks
a handful of known values end to end. Exits nonzero on the first failure.

Usage: python3 python/smoke_test.py [--release]
"""

import math
import shutil
import subprocess
import sys
import sysconfig
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_and_import(release: bool):
    profile = "release" if release else "debug"
    cmd = ["cargo", "build", "-p", "nexmf-python"]
    if release:
        cmd.append("--release")
    subprocess.run(cmd, cwd=REPO, check=True)

    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    stage = REPO / "target" / "python"
    stage.mkdir(parents=True, exist_ok=True)
    built = REPO / "target" / profile / "libnexmf_python.so"
    if not built.exists():  # e.g. macOS
        built = REPO / "target" / profile / "libnexmf_python.dylib"
    shutil.copy2(built, stage / f"nexmf{suffix}")

    sys.path.insert(0, str(stage))
    import nexmf

    return nexmf


def check(name, got, want, tol=1e-9):
    ok = abs(got - want) <= tol
    print(f"{'PASS' if ok else 'FAIL'}  {name}: got {got!r}, want {want!r} (tol {tol:g})")
    if not ok:
        sys.exit(1)


def main():
    nx = build_and_import("--release" in sys.argv[1:])

    # Torus geometry and the interaction kernel.
    check("torus_dist wraps the short way", nx.torus_dist(0.9, 0.1), 0.2)
    lam_max, lam_min = nx.lambda_range()
    check("lambda max (series)", lam_max, math.cosh(0.5) / (2 * math.sinh(0.5)), 1e-8)
    check("lambda min (series)", lam_min, 1 / (2 * math.sinh(0.5)), 1e-8)
    check("lambda kernel at 0 (closed form)", nx.lambda_kernel(0.0), lam_max, 1e-8)

    # H^-1 geometry: the norm of a unit Dirac is sqrt(lambda_max), and the
    # distance between opposite Diracs follows from the kernel at 0 and 1/2.
    check(
        "dirac pair distance",
        nx.h_neg1_distance([0.0], [1.0], [0.5], [1.0]),
        math.sqrt(2 * (nx.lambda_kernel(0.0) - nx.lambda_kernel(0.5))),
        1e-9,
    )

    # Transport: rotating lattice atoms by less than half their spacing moves
    # every atom to its image, so the cost is exactly the angle.
    pos = [i / 8 for i in range(8)]
    shifted = [(p + 0.05) % 1.0 for p in pos]
    wts = [1 / 8] * 8
    check("circular W1 of a small rotation", nx.circular_w1(pos, wts, shifted, wts), 0.05, 1e-12)

    # Cut norms (normalized by n^2); heuristic certifies the exact value here.
    w2 = [[1.0, -1.0], [-1.0, 1.0]]
    check("exact cut norm, 2x2 sign matrix", nx.cut_norm_exact(w2), 0.25, 1e-12)
    check(
        "heuristic matches exact",
        nx.cut_norm_heuristic(w2, restarts=8, seed=1),
        nx.cut_norm_exact(w2),
        1e-12,
    )

    # A two-block matrix is captured exactly by a two-class partition.
    n = 8
    blocky = [[0.8 if (i < n // 2) == (j < n // 2) else 0.2 for j in range(n)] for i in range(n)]
    labels, residual = nx.regularity_partition(blocky, 2)
    assert len(labels) == n and max(labels) <= 1, f"bad labels {labels}"
    check("regularity residual on two blocks", residual, 0.0, 1e-9)

    # Oriented tree family sizes and a hand-checkable density.
    for cap, count in [(2, 1), (3, 4), (4, 12), (5, 39)]:
        check(f"tree count up to {cap} vertices", nx.count_trees(cap), count, 0)
    tree_names = nx.tree_labels(3)
    assert len(tree_names) == 4, tree_names
    half = [[0.5] * 4 for _ in range(4)]
    check(
        "edge density in constant kernel",
        nx.homomorphism_density(half, [(0, 1)], [1]),
        0.5,
        1e-12,
    )

    # Metrics vanish on identical systems.
    x = [0.05, 0.3, 0.55, 0.8]
    w = [[0.0, 0.6, 0.2, 0.1],
         [0.6, 0.0, 0.5, 0.3],
         [0.2, 0.5, 0.0, 0.7],
         [0.1, 0.3, 0.7, 0.0]]
    check("observable metric, identical systems", nx.observable_metric(x, w, x, w), 0.0, 1e-12)
    r = nx.bicoupling_distance(x, w, x, w, max_iter=200, tol=1e-6, seed=7)
    check("bi-coupling distance, identical systems", r["value"], 0.0, 1e-6)
    assert len(r["gamma"]) == len(x) and r["iterations"] >= 0

    # Dynamics: pure constant drift translates every particle exactly.
    end = nx.simulate(x, w, drift="constant", drift_param=0.25, t_end=1.0, steps=50, seed=3)
    worst = max(nx.torus_dist(e, (s + 0.25) % 1.0) for e, s in zip(end, x))
    check("constant drift translates particles", worst, 0.0, 1e-12)

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
