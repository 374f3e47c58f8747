"""Time the compiled element kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--size 8] [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from pmlfwi import _kernels_py, operators
from pmlfwi.harness import RunConfig, config_model
from pmlfwi.operators import assemble
from pmlfwi.specgrid import build_mesh

try:
    from pmlfwi import _kernels as compiled
except ImportError:
    compiled = None


def bench(size: int, repeat: int) -> list[tuple[str, str, float]]:
    cfg = RunConfig(extent=(2.5 * size,) * 3, element_size=2.5, pml_thickness=5.0)
    mesh = build_mesh(cfg.grid())
    ops = assemble(mesh, config_model(cfg, mesh), cfg.profile(mesh))
    rng = np.random.default_rng(0)
    x = [rng.standard_normal(ops.size) for _ in range(3)]
    u = rng.standard_normal((3, mesh.n_nodes))
    w = rng.standard_normal((3, mesh.n_nodes))
    gl = np.zeros(mesh.n_nodes)
    gm = np.zeros(mesh.n_nodes)
    backends = [("numpy", _kernels_py)] + ([("compiled", compiled)] if compiled is not None else [])
    rows = []
    for name, mod in backends:
        operators.kernels = mod
        cases = {
            "system apply": lambda: ops.system_internal(*x),
            "transpose apply": lambda: ops.system_transpose_internal(*x),
            "material gradient": lambda m=mod: m.material_gradient(u, w, mesh.conn_rd, mesh.derivative_matrix,
                                                                   mesh.quad_weights, 1.0, gl, gm),
        }
        for case, fn in cases.items():
            fn()
            best = min(timeit.repeat(fn, number=1, repeat=repeat))
            rows.append((case, name, best))
    return rows


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=8, help="RD elements per axis")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    rows = bench(args.size, args.repeat)
    times = {(c, b): t for c, b, t in rows}
    print(f"{'kernel':<20}{'backend':<10}{'best [ms]':>12}{'speedup':>10}")
    for case, name, t in rows:
        ref = times[(case, "numpy")]
        print(f"{case:<20}{name:<10}{1e3 * t:>12.2f}{ref / t:>10.1f}")


if __name__ == "__main__":
    main()
