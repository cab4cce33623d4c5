"""Desk-scale run: generate, train, evaluate, and write a JSON summary."""
import argparse
import time
from pathlib import Path

from afem.io import write_checkpoint, write_dataset, write_report
from afem.nn import ModelConfig, init_params
from afem.pipeline import GenConfig, InverseProblem, TrainConfig, evaluate, generate_dataset, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=16, help="cells per side")
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = p.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    gcfg = GenConfig(n_train=args.n_train, n_test=args.n_test, nx=args.n, ny=args.n, seed=args.seed)
    ds = generate_dataset(gcfg)
    write_dataset(ds, args.out / "data.afem")

    tcfg = TrainConfig(alpha=args.alpha, lr=args.lr, epochs=args.epochs, seed=args.seed)
    params = init_params(ModelConfig(grid_shape=ds.mesh.grid_shape), args.seed)

    def log(state, wall):
        if state.epoch % 10 == 0 or state.epoch == tcfg.epochs:
            print(f"epoch {state.epoch:4d}  loss {state.history[-1]:.6e}  {wall:.2f}s", flush=True)

    state = train(params, ds, tcfg, on_epoch=log)
    write_checkpoint(state, args.out / "model.ckp")
    problem = InverseProblem.from_dataset(ds)
    r_test = evaluate(state.params, ds.test, problem)
    r_train = evaluate(state.params, ds.train, problem)
    print(f"R test {100 * r_test:.2f}%   R train {100 * r_train:.2f}%")
    write_report({
        "gen_config": gcfg.to_dict(), "train_config": tcfg.to_dict(),
        "loss_history": state.history, "R_test": r_test, "R_train": r_train,
        "wall_time_s": time.perf_counter() - t0,
    }, args.out / "summary.json")


if __name__ == "__main__":
    main()
