"""Smoke test for the Python extension.

Builds the extension module with cargo when needed, loads it from the
target directory and checks a few values against closed forms.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import subprocess
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]
NAME = "nat_prosody_py"


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "nat-prosody-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / f"lib{NAME}.so"
    if not lib.exists():
        sys.exit(f"extension not found at {lib}")
    return lib


def load(path):
    loader = importlib.machinery.ExtensionFileLoader(NAME, str(path))
    spec = importlib.util.spec_from_file_location(NAME, str(path), loader=loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def main():
    m = load(build())
    assert abs(m.softplus(0.0) - math.log(2.0)) < 1e-12
    assert abs(m.sigmoid(0.0) - 0.5) < 1e-12
    assert abs(m.emd2_loss([1, 0, 0, 0, 0], [0, 0, 0, 0, 1]) - 4.0) < 1e-9
    assert m.emd2_loss([0.2] * 5, [0.2] * 5) == 0.0

    durations = [3, 1, 5, 2]
    rows = m.gaussian_upsample(durations, [0.2] * len(durations))
    assert len(rows) == sum(durations)
    for r in rows:
        assert abs(sum(r) - 1.0) < 1e-9

    pe = m.positional_encoding(0.0, 8)
    assert len(pe) == 8
    assert m.categorize_pause(0.0, 1.0) == "-"

    try:
        m.emd2_loss([0.5, 0.5], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch was accepted")

    assert m.cli(["--version"]) == 0
    assert m.cli(["gen-data", "--out", "/tmp/unused", "--utterances", "0"]) == 1
    print("python smoke test ok")


if __name__ == "__main__":
    main()
