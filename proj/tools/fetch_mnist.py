#!/usr/bin/env python3
"""Build the desk-scale MNIST subset under data/mnist-desk.

The raw IDX files come from the `mnist-data` npm package (fetched with
`npm pack`), or from --source if the four files are already on disk.
"""
import argparse
import pathlib
import shutil
import struct
import subprocess
import tarfile
import tempfile

FILES = {
    "train-images": "train-images-idx3-ubyte",
    "train-labels": "train-labels-idx1-ubyte",
    "test-images": "t10k-images-idx3-ubyte",
    "test-labels": "t10k-labels-idx1-ubyte",
}


def head_idx(src: pathlib.Path, dst: pathlib.Path, n: int) -> None:
    raw = src.read_bytes()
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = magic & 0xFF
    dims = list(struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim]))
    if n > dims[0]:
        raise SystemExit(f"{src} has only {dims[0]} records")
    per = 1
    for d in dims[1:]:
        per *= d
    body_at = 4 + 4 * ndim
    dims[0] = n
    out = struct.pack(">I", magic) + struct.pack(">" + "I" * ndim, *dims) + raw[body_at : body_at + n * per]
    dst.write_bytes(out)


def fetch(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=workdir, check=True)
    tgz = next(workdir.glob("mnist-data-*.tgz"))
    with tarfile.open(tgz) as tar:
        tar.extractall(workdir)
    return workdir / "package" / "data"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source", type=pathlib.Path, help="directory holding the raw IDX files")
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path(__file__).resolve().parents[1] / "data" / "mnist-desk")
    ap.add_argument("--train", type=int, default=10000)
    ap.add_argument("--test", type=int, default=2000)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        src = args.source or fetch(pathlib.Path(tmp))
        args.out.mkdir(parents=True, exist_ok=True)
        for key, name in FILES.items():
            n = args.train if key.startswith("train") else args.test
            head_idx(src / name, args.out / f"{key}.idx", n)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
