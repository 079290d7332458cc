"""Condition number of the dense marginal prior covariance of eta.

For the random walk with unit observation variance the prior covariance over
time is ``A[t, s] = c + w * min(t, s) + [t == s]``. Working with A directly
means factorising a matrix whose condition number grows with T, which is
what the recursive filter avoids. This prints kappa(A) for a few lengths.

    python3 scripts/conditioning.py --T 50 100 250 500 --w 0.45
"""

import argparse

import numpy as np


def prior_matrix(T, w, c=1.0, gamma=1.0):
    t = np.arange(1, T + 1)
    return c + w * np.minimum.outer(t, t) + gamma * np.eye(T)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, nargs="+", default=[50, 100, 250, 500])
    ap.add_argument("--w", type=float, default=0.45)
    ap.add_argument("--c", type=float, default=1.0)
    args = ap.parse_args(argv)

    print("T,cond,min_eig,max_eig")
    for T in args.T:
        ev = np.linalg.eigvalsh(prior_matrix(T, args.w, args.c))
        print(f"{T},{ev[-1] / ev[0]:.4e},{ev[0]:.4e},{ev[-1]:.4e}")


if __name__ == "__main__":
    main()
