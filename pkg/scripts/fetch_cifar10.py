#!/usr/bin/env python3
"""Convenience fetcher for the CIFAR-10 binary batches.

Downloads and unpacks cifar-10-binary.tar.gz into the target directory,
then prints the export line for the loader. Requires network access;
everything else in the package works offline.

Usage: python scripts/fetch_cifar10.py [target_dir]
"""

import sys
import tarfile
import urllib.request
from pathlib import Path

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


def main() -> int:
    target = Path(sys.argv[1] if len(sys.argv) > 1 else "data")
    target.mkdir(parents=True, exist_ok=True)
    archive = target / "cifar-10-binary.tar.gz"
    if not archive.exists():
        print(f"downloading {URL} ...")
        urllib.request.urlretrieve(URL, archive)
    with tarfile.open(archive) as tf:
        tf.extractall(target)
    batches = target / "cifar-10-batches-bin"
    print(f"done. export QUANTNOISE_CIFAR10={batches}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
