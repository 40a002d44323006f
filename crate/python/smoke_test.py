#!/usr/bin/env python3
"""End-to-end smoke test for the pymamba_py extension module.

Builds the cdylib with cargo if needed, loads it straight from the target
directory, and walks the public surface: scan primitives, the pooling
ladder, metrics, the LR schedule, and a tiny synth -> train -> evaluate ->
infer round trip.

Run from anywhere:  python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import random
import subprocess
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    so = None
    for profile in ("debug", "release"):
        cand = REPO / "target" / profile / "libpymamba_py.so"
        if cand.exists():
            so = cand
            break
    if so is None:
        subprocess.run(
            ["cargo", "build", "-p", "pymamba-py"], cwd=REPO, check=True
        )
        so = REPO / "target" / "debug" / "libpymamba_py.so"
    loader = importlib.machinery.ExtensionFileLoader("pymamba_py", str(so))
    spec = importlib.util.spec_from_loader("pymamba_py", loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def check_scan(m):
    rng = random.Random(7)
    n, lanes = 96, 2
    a = [rng.uniform(0.1, 0.9) for _ in range(n * lanes)]
    b = [rng.uniform(-1.0, 1.0) for _ in range(n * lanes)]
    seq = m.scan(a, b, lanes=lanes, parallel=False)
    par = m.scan(a, b, lanes=lanes, parallel=True)

    # Reference recurrence in plain Python.
    h = [0.0] * lanes
    ref = []
    for t in range(n):
        for lane in range(lanes):
            i = t * lanes + lane
            h[lane] = a[i] * h[lane] + b[i]
            ref.append(h[lane])
    assert max(abs(x - y) for x, y in zip(seq, ref)) < 1e-12, "sequential scan"
    assert max(abs(x - y) for x, y in zip(par, ref)) < 1e-10, "parallel scan"
    print("scan: sequential and parallel match the reference recurrence")


def check_ladder(m):
    assert m.dspp_scales(2) == [1]
    assert m.dspp_scales(4) == [1, 2, 3]
    assert m.dspp_scales(32) == [1, 5, 9, 13, 17, 21, 25, 29]
    print("dspp_scales: ladder matches for N in {2, 4, 32}")


def check_metrics(m):
    r = m.segmentation_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert abs(r["miou"] - 7.0 / 12.0) < 1e-12, r
    assert abs(r["oa"] - 0.75) < 1e-12, r
    print(f"metrics: two-class example gives miou {r['miou']:.4f}, oa {r['oa']:.2f}")


def check_schedule(m):
    base, warm, total = 6e-4, 100, 1100
    assert m.lr_at(base, warm, total, warm) == base
    mid = m.lr_at(base, warm, total, warm + (total - warm) // 2)
    assert abs(mid - base * 0.5**0.9) < 1e-12
    print("lr_at: warmup boundary exact, poly midpoint matches closed form")


def check_pipeline(m):
    with tempfile.TemporaryDirectory(prefix="pymamba-smoke-") as tmp:
        tmp = pathlib.Path(tmp)
        manifest = m.synth_dataset(str(tmp / "data"), seed=0, n=6, size=64, classes=4)
        config = tmp / "run.toml"
        config.write_text(
            "\n".join(
                [
                    'preset = "desk"',
                    "seed = 0",
                    f'out_dir = "{tmp / "run"}"',
                    "",
                    "[data]",
                    f'train_manifest = "{manifest}"',
                    "classes = 4",
                    "",
                    "[train]",
                    "max_epochs = 2",
                    "warmup_epochs = 1",
                ]
            )
        )
        report = m.train(str(config))
        assert report["epochs_run"] == 2, report
        assert report["steps"] == 4, report  # 6 samples / batch 4 -> 2 steps/epoch
        ckpt = tmp / "run" / "last.ckpt"
        assert ckpt.exists(), "training must write last.ckpt"
        print(f"train: 2 epochs, final loss {report['final_loss']:.4f}")

        ev = m.evaluate(str(config), str(ckpt))
        assert ev["tiles"] == 6 and 0.0 <= ev["miou"] <= 1.0, ev
        print(f"evaluate: miou {ev['miou']:.4f} over {ev['tiles']} tiles")

        out = tmp / "pred.pgm"
        m.infer(str(ckpt), str(tmp / "data" / "img_000.ppm"), str(out))
        blob = out.read_bytes()
        assert blob.startswith(b"P5\n64 64\n255\n"), blob[:20]
        assert max(blob[13:]) < 4, "mask values must stay below the class count"
        print("infer: wrote a P5 mask with values in [0, 4)")

        model = m.Model.load(str(ckpt))
        assert model.num_classes() == 4
        img = [0.5] * (3 * 64 * 64)
        logits, shape = model.forward(img, 64, 64)
        assert shape == [4, 64, 64] and len(logits) == 4 * 64 * 64
        pred = model.predict(img, 64, 64)
        assert len(pred) == 64 * 64 and all(v < 4 for v in pred)
        print(f"model: {model.param_count()} parameters, forward shape {shape}")


def main():
    m = load_module()
    print(f"loaded pymamba_py, classes: {m.CLASS_NAMES}")
    check_scan(m)
    check_ladder(m)
    check_metrics(m)
    check_schedule(m)
    check_pipeline(m)
    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
