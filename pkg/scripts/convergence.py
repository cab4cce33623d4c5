"""Manufactured-solution convergence of the forward solver."""
import argparse

from afem.verify import manufactured_convergence


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("levels", nargs="*", type=int, default=[8, 16, 32, 64, 128])
    args = p.parse_args()
    errors, orders = manufactured_convergence(args.levels)
    for i, (n, e) in enumerate(zip(args.levels, errors)):
        print(f"{n:5d}  {e:.6e}  {orders[i - 1]:.3f}" if i else f"{n:5d}  {e:.6e}      -")


if __name__ == "__main__":
    main()
