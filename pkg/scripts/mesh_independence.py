"""Compare the L2 loss of fixed analytic fields with a raw nodal sum under refinement."""
import numpy as np

from afem.fem_ops import op_l2_lossq
from afem.mesh import build_unit_square_mesh, interpolate
from afem.tape import Tape

FIELDS = {
    "kappa_pred": lambda x, y: np.sin(np.pi * x) * y * (1 - y),
    "kappa_exact": lambda x, y: np.cos(2 * x) * np.sin(np.pi * y),
    "u_pred": lambda x, y: x * x * np.exp(y),
    "u_obs": lambda x, y: np.sin(3 * x * y),
}


def losses(n, alpha=0.5):
    mesh = build_unit_square_mesh(n, n)
    v = {k: interpolate(g, mesh) for k, g in FIELDS.items()}
    t = Tape()
    l2 = op_l2_lossq(t.constant(v["kappa_pred"].dofs), v["kappa_exact"], 0.5, mesh=mesh) + op_l2_lossq(
        t.constant(v["u_pred"].dofs), v["u_obs"], 0.5 * alpha, mesh=mesh)
    raw = 0.5 * np.sum((v["kappa_pred"].dofs - v["kappa_exact"].dofs) ** 2) + 0.5 * alpha * np.sum(
        (v["u_pred"].dofs - v["u_obs"].dofs) ** 2)
    return float(l2.value), float(raw), mesh.n_vertices


def main():
    levels = [8, 16, 32, 64, 128]
    rows = [losses(n) for n in levels]
    print(f"{'n':>5} {'dofs':>7} {'L2 loss':>14} {'raw sum':>14} {'diff ratio':>11}")
    for i, (n, (l2, raw, dofs)) in enumerate(zip(levels, rows)):
        ratio = ""
        if 0 < i < len(rows) - 1:
            ratio = f"{(rows[i - 1][0] - l2) / (l2 - rows[i + 1][0]):11.3f}"
        print(f"{n:>5} {dofs:>7} {l2:14.8f} {raw:14.4f} {ratio:>11}")


if __name__ == "__main__":
    main()
