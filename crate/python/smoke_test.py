"""Smoke test for the splitq extension module.

Build and stage the module first:

    cargo build -p splitq-py --release
    cp target/release/libsplitq.so python/splitq.so

then run `python3 python/smoke_test.py` from the repository root.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import splitq


def check(name, cond, detail=""):
    print(f"{'ok  ' if cond else 'FAIL'} {name} {detail}".rstrip())
    return cond


def main():
    results = []

    batch = splitq.generate(seed=7)
    results.append(check("generate", batch.tokens == 128 and batch.channels == 64, repr(batch)))
    tags = batch.tags()
    results.append(check("text rows come first", tags[:64] == ["text"] * 64 and tags[64:] == ["vision"] * 64))

    part = splitq.build_partition(batch)
    results.append(check("planted channels recovered", part.vision == [3] and part.text == [9], repr(part)))
    trivial = splitq.build_partition(batch, ratio_vision=0.0, ratio_text=0.0)
    results.append(check("zero ratios give trivial partition", trivial == splitq.ChannelPartition.trivial(64)))

    q = splitq.quantize([[0.1, -0.7, 0.33]], bits=4)
    again = splitq.quantize(q, bits=4)
    results.append(check("quantize is idempotent", q == again, str(q)))
    results.append(check("identity quantizer", splitq.quantize([[0.1, 0.2]], bits=None) == [[0.1, 0.2]]))

    weight = splitq.generate_weight(seed=7)
    exact = splitq.SplitQLayer.build(weight, batch, part, identity_quant=True)
    ref = splitq.forward_reference(weight, batch)
    out = exact.forward(batch)
    err = max(abs(a - b) for ra, rb in zip(out, ref) for a, b in zip(ra, rb))
    results.append(check("identity layer matches X @ W", err < 1e-9, f"max abs err {err:.2e}"))

    layer = splitq.SplitQLayer.build(weight, batch, part)
    calibrated, trace = layer.calibrate(batch, steps=30, seed=7)
    results.append(check(
        "calibration best <= initial",
        trace.best_loss <= trace.losses[0] and len(trace.losses) == 31,
        f"{trace.losses[0]:.4g} -> {trace.best_loss:.4g} at step {trace.best_step}",
    ))
    mse, mse_text, mse_vision = calibrated.evaluate(batch)
    results.append(check("evaluate", all(math.isfinite(v) for v in (mse, mse_text, mse_vision)), f"mse {mse:.4g}"))
    deciles = calibrated.weight_error_deciles()
    results.append(check("deciles nondecreasing", all(a <= b for a, b in zip(deciles, deciles[1:]))))

    with tempfile.TemporaryDirectory() as d:
        calibrated.save(os.path.join(d, "layer"))
        loaded = splitq.SplitQLayer.load(os.path.join(d, "layer"))
        results.append(check("layer save/load round trip", loaded.forward(batch) == calibrated.forward(batch)))
        batch.save(os.path.join(d, "acts.spqt"))
        back = splitq.ActivationBatch.load(os.path.join(d, "acts.spqt"))
        results.append(check("batch save/load round trip", back.rows() == batch.rows() and back.tags() == tags))

    rows = splitq.stability(batch, [128, 32], trials=5, seed=7)
    results.append(check("stability", rows[0][1] == 1.0 and all(0.0 <= r[1] <= 1.0 for r in rows), str(rows)))
    results.append(check("jaccard", splitq.jaccard([1, 2], [2, 3]) == 1 / 3))

    try:
        splitq.generate(text_outliers=[99])
        results.append(check("invalid config raises", False))
    except splitq.SplitqError as e:
        results.append(check("invalid config raises", "text_outlier_channels" in str(e), str(e)))

    try:
        splitq.ActivationBatch.load("/nonexistent/acts.spqt")
        results.append(check("missing file raises OSError", False))
    except OSError:
        results.append(check("missing file raises OSError", True))

    passed = sum(results)
    print(f"{passed} of {len(results)} checks passed")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
