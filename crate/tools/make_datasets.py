#!/usr/bin/env python3
"""Regenerate the CSV datasets under data/.

iris and wine are scikit-learn's bundled copies of the classic UCI tables.
breast_cancer_250 and digits_220 are seeded subsamples of the bundled
breast-cancer-wisconsin and digits tables, sized for desk-scale runs.
blobs_200 is a synthetic four-class Gaussian mixture with deliberate class
overlap so a trained classifier always makes some mistakes.
"""

import numpy as np
from sklearn.datasets import load_breast_cancer, load_digits, load_iris, load_wine


def write_csv(path, X, y):
    m = X.shape[1]
    with open(path, "w") as f:
        f.write(",".join([f"f{j}" for j in range(m)] + ["label"]) + "\n")
        for row, lab in zip(X, y):
            f.write(",".join(f"{v:.17g}" for v in row) + f",{int(lab)}\n")
    print(path, X.shape, "K =", len(np.unique(y)))


def main():
    iris = load_iris()
    write_csv("data/iris.csv", iris.data, iris.target)

    wine = load_wine()
    write_csv("data/wine.csv", wine.data, wine.target)

    rng = np.random.default_rng(20260811)

    bc = load_breast_cancer()
    idx = rng.choice(len(bc.data), size=250, replace=False)
    idx.sort()
    write_csv("data/breast_cancer_250.csv", bc.data[idx], bc.target[idx])

    dg = load_digits()
    idx = rng.choice(len(dg.data), size=220, replace=False)
    idx.sort()
    write_csv("data/digits_220.csv", dg.data[idx], dg.target[idx])

    rng2 = np.random.default_rng(7)
    centers = rng2.normal(0, 1.6, size=(4, 6))
    xs, ys = [], []
    for k in range(4):
        xs.append(centers[k] + rng2.normal(0, 1.25, size=(50, 6)))
        ys.append(np.full(50, k))
    X = np.vstack(xs)
    y = np.concatenate(ys)
    perm = rng2.permutation(len(y))
    write_csv("data/blobs_200.csv", X[perm], y[perm])


if __name__ == "__main__":
    main()
