"""Write the 5000-image MNIST subset bundled with mlxtend as gzipped IDX files.

Stratified split: per digit, the first 400 images go to train and the last
100 to test.  Output: data/mnist5k/{train,test}-{images-idx3,labels-idx1}-ubyte.gz

    pip install mlxtend
    python scripts/build_mnist_subset.py
"""

from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from byov.data import write_idx

OUT = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


def main():
    X, y = mnist_data()
    X = X.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    train, test = [], []
    for digit in range(10):
        idx = np.flatnonzero(y == digit)
        train.extend(idx[:400])
        test.extend(idx[400:])
    OUT.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.array(train)), ("test", np.array(test))):
        write_idx(OUT / f"{split}-images-idx3-ubyte.gz", X[idx])
        write_idx(OUT / f"{split}-labels-idx1-ubyte.gz", y[idx])
        print(split, len(idx))


if __name__ == "__main__":
    main()
