"""Laplace log marginal likelihood against tensor quadrature as the number
of Bernoulli rows grows."""
import argparse

import numpy as np

from dstsom.inference import LatentGaussianProblem, log_laplace_marginal
from dstsom.ordinal import Link, link_inverse
from dstsom.simulate import brute_marginal


def instance(rng, n, m, link):
    levels = rng.normal(size=(12, m)) * 0.5
    A = levels[rng.integers(12, size=n)]
    theta = rng.normal(size=m) * 0.7
    y = (rng.random(n) < link_inverse(A @ theta, link)).astype(float)
    L = rng.normal(size=(m, m))
    Q = L @ L.T + np.eye(m)
    return LatentGaussianProblem(y, A, Q, np.linalg.slogdet(Q)[1], link)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'rows':>6} {'median err':>11} {'max err':>9}")
    for n in (10, 50, 200, 1000, 4000):
        errs = []
        for i in range(args.reps):
            p = instance(rng, n, 1 + i % 2, list(Link)[i % 3])
            errs.append(abs(log_laplace_marginal(p) - brute_marginal(p)))
        print(f"{n:>6} {np.median(errs):>11.2e} {max(errs):>9.2e}")


if __name__ == "__main__":
    main()
