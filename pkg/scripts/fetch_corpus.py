"""Assemble a public-domain byte corpus from the `shakespeare` sdist on PyPI.

The archive bundles Project Gutenberg texts of the plays, poems and Milton's
works. Only the modern-spelling `*_gut.txt` files are kept (the `_gut_f`
folio variants duplicate the same plays). One file per document.

    python scripts/fetch_corpus.py data/corpus
"""

import argparse
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "shakespeare==0.6"


def fetch(dest: Path) -> int:
    dest.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
                        "-q", "-d", tmp, PACKAGE], check=True)
        (archive,) = Path(tmp).glob("shakespeare-*.tar.gz")
        total = 0
        with tarfile.open(archive) as tar:
            for member in tar.getmembers():
                name = Path(member.name)
                if member.isfile() and "texts" in name.parts and name.name.endswith("_gut.txt"):
                    data = tar.extractfile(member).read()
                    (dest / f"{name.parts[-3]}__{name.name}").write_bytes(data)
                    total += len(data)
    return total


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("dest", nargs="?", default="data/corpus")
    n = fetch(Path(ap.parse_args().dest))
    print(f"{n / 1e6:.2f} MB written")
