#!/usr/bin/env python3
"""End-to-end smoke test for the cbof_py extension module.

Builds the cdylib with cargo, loads it, and exercises the bound surface:
parameter counting, the membership function against a hand-worked case,
histogram invariants across image sizes, prediction, and the checkpoint
round trip. Exits nonzero on the first failure.
"""

import math
import random
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
BUILD_DIR = REPO / "python" / "_build"


def build_and_import():
    subprocess.run(
        ["cargo", "build", "-p", "cbof-py", "--release"],
        cwd=REPO,
        check=True,
    )
    BUILD_DIR.mkdir(exist_ok=True)
    shutil.copy2(REPO / "target/release/libcbof_py.so", BUILD_DIR / "cbof_py.so")
    sys.path.insert(0, str(BUILD_DIR))
    import cbof_py

    return cbof_py


def check(name, condition, detail=""):
    if not condition:
        print(f"FAIL {name}: {detail}")
        sys.exit(1)
    print(f"ok   {name}")


def random_image(side, rng):
    return [[rng.random() for _ in range(side)] for _ in range(side)]


def main():
    m = build_and_import()
    rng = random.Random(12345)

    # published head+MLP parameter counts
    table = [
        (dict(head="cbof", codewords=32, level=0), 45_090),
        (dict(head="cbof", codewords=32, level=1), 147_330),
        (dict(head="cbof", codewords=64, level=1), 283_650),
        (dict(head="gmp"), 75_010),
        (dict(head="spp"), 331_010),
        (dict(head="cnn_flatten"), 1_035_010),
    ]
    for kwargs, expected in table:
        got = m.count_head_params(**kwargs)
        check(f"count_head_params {kwargs}", got == expected, f"{got} != {expected}")

    # hand-worked membership case: equidistant centers, widths 1 and 0.5,
    # so the logits are -1 and -2 and the memberships softmax to
    # (e/(e+1), 1/(e+1))
    got = m.rbf_memberships([1.0, 0.0], [[0.0, 0.0], [2.0, 0.0]], [1.0, 0.5])
    want = [math.e / (math.e + 1.0), 1.0 / (math.e + 1.0)]
    check(
        "rbf_memberships hand case",
        all(abs(g - w) < 1e-12 for g, w in zip(got, want)),
        f"{got} != {want}",
    )
    check("rbf_memberships sums to 1", abs(sum(got) - 1.0) < 1e-12, f"sum {sum(got)}")

    # histogram invariants: fixed length across image sizes, nonnegative,
    # unit mass per spatial region
    model = m.Model(head="cbof", codewords=8, level=1, hidden=32, seed=7)
    for side in (16, 20, 28, 36):
        hist = model.histogram(random_image(side, rng))
        check(f"histogram length at {side}px", len(hist) == 4 * 8, f"{len(hist)}")
        check(f"histogram nonnegative at {side}px", all(v >= 0.0 for v in hist))
        for region in range(4):
            mass = sum(hist[region * 8 : (region + 1) * 8])
            check(
                f"histogram region {region} mass at {side}px",
                abs(mass - 1.0) < 1e-5,
                f"mass {mass}",
            )

    # prediction returns a class index at any admissible size
    for side in (16, 28):
        label = model.predict(random_image(side, rng))
        check(f"predict at {side}px", 0 <= label < 10, f"label {label}")

    # checkpoint round trip: weights transfer to a differently seeded model
    other = m.Model(head="cbof", codewords=8, level=1, hidden=32, seed=999)
    probe = random_image(28, rng)
    check(
        "fresh models differ",
        model.histogram(probe) != other.histogram(probe),
    )
    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "model.ckpt")
        model.save(path)
        other.load(path)
    check(
        "checkpoint round trip",
        model.histogram(probe) == other.histogram(probe),
    )

    # architecture mismatches are rejected, not silently accepted
    small = m.Model(head="cbof", codewords=4, level=0, hidden=16, seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "model.ckpt")
        model.save(path)
        try:
            small.load(path)
        except RuntimeError:
            check("mismatched checkpoint rejected", True)
        else:
            check("mismatched checkpoint rejected", False, "load succeeded")

    # evaluation over the bundled test split, truncated for speed; an
    # untrained model should sit near the 90% error of random guessing
    data = REPO / "data/mnist"
    err = model.evaluate_idx(
        str(data / "t10k-images-idx3-ubyte.gz"),
        str(data / "t10k-labels-idx1-ubyte.gz"),
        28,
        limit=200,
    )
    check("evaluate_idx returns percentage", 50.0 <= err <= 100.0, f"{err}")

    print(f"smoke test passed ({m.__name__} via {BUILD_DIR / 'cbof_py.so'})")


if __name__ == "__main__":
    main()
