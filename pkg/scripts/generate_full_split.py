"""Generate the 500/100 split on a 32x32 mesh and check the file round trip."""
import argparse
import time
from pathlib import Path

from afem.io import dataset_to_bytes, read_dataset, write_dataset
from afem.pipeline import GenConfig, generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/full_split.afem"))
    args = p.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    ds = generate_dataset(
        GenConfig(n_train=500, n_test=100, nx=args.n, ny=args.n, seed=args.seed),
        progress=lambda i, n: i % 100 == 0 and print(f"{i}/{n}", flush=True),
    )
    write_dataset(ds, args.out)
    wall = time.perf_counter() - t0
    same = dataset_to_bytes(read_dataset(args.out)) == args.out.read_bytes()
    print(f"{len(ds.train)} train / {len(ds.test)} test in {wall:.1f}s, round trip identical: {same}")


if __name__ == "__main__":
    main()
