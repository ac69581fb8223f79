"""Regenerates the bundled datasets under data/.

corpus.txt: early State of the Union addresses (US government works, public
domain; taken from the @stdlib/datasets-sotu npm package, PDDL-1.0/CC0),
lowercased and wrapped to 80 columns, truncated after ~200 KB.

digits_{train,test}.csv: the UCI optical-digits 8x8 set as shipped with
scikit-learn, pixel values scaled to [0, 1], one row per image:
label followed by 64 values (8 rows of 8 columns, row-major).
"""
import pathlib
import sys
import textwrap

import numpy as np
from sklearn.datasets import load_digits

out = pathlib.Path(__file__).resolve().parent.parent / "data"


def corpus(sotu_dir: pathlib.Path, limit: int = 200_000) -> None:
    lines = []
    size = 0
    for path in sorted(sotu_dir.glob("*.txt")):
        text = " ".join(path.read_text(encoding="utf-8").split()).lower()
        text = "".join(ch for ch in text if ord(ch) < 128)
        for line in textwrap.wrap(text, 80):
            lines.append(line)
            size += len(line) + 1
        if size >= limit:
            break
    (out / "corpus.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def digits() -> None:
    ds = load_digits()
    rng = np.random.default_rng(0)
    order = rng.permutation(len(ds.target))
    x = ds.data[order] / 16.0
    y = ds.target[order]
    cut = len(y) - 360
    for name, rows in (("digits_train.csv", range(cut)), ("digits_test.csv", range(cut, len(y)))):
        with open(out / name, "w") as f:
            for i in rows:
                f.write(str(int(y[i])) + "," + ",".join(repr(float(v)) for v in x[i]) + "\n")


if __name__ == "__main__":
    corpus(pathlib.Path(sys.argv[1]))
    digits()
