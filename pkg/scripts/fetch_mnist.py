"""Download the MNIST idx files into a directory (default ``data/mnist``).

Usage: python3 scripts/fetch_mnist.py [target_dir] [--mirror URL]
"""
import argparse
import sys
import urllib.request
from pathlib import Path

MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"
FILES = ["train-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte.gz"]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("target", nargs="?", default="data/mnist")
    p.add_argument("--mirror", default=MIRROR)
    args = p.parse_args(argv)
    target = Path(args.target)
    target.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        dest = target / name
        if dest.exists():
            print(f"{dest} exists, skipping")
            continue
        print(f"fetching {args.mirror + name}")
        try:
            urllib.request.urlretrieve(args.mirror + name, dest)
        except OSError as err:
            dest.unlink(missing_ok=True)
            print(f"download failed: {err}", file=sys.stderr)
            return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
