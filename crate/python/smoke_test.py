#!/usr/bin/env python3
"""Smoke test for the fedsim_py extension module.

Builds nothing itself: it looks for the compiled cdylib under target/
(or uses an already-importable fedsim_py, e.g. after `maturin develop`),
then drives the main entry points end to end on the smoke config.

    cargo build -p fedsim-py --release
    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    try:
        import fedsim_py  # noqa: F401  (installed via maturin develop)
        return fedsim_py
    except ImportError:
        pass
    names = {
        "linux": "libfedsim_py.so",
        "darwin": "libfedsim_py.dylib",
        "win32": "fedsim_py.dll",
    }
    lib = names.get(sys.platform, "libfedsim_py.so")
    candidates = [REPO / "target" / profile / lib for profile in ("release", "debug")]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit(
            "fedsim_py is not importable and no built library was found; "
            "run `cargo build -p fedsim-py --release` first"
        )
    stage = Path(tempfile.mkdtemp(prefix="fedsim_py_"))
    shutil.copy2(built, stage / "fedsim_py.so")
    sys.path.insert(0, str(stage))
    import fedsim_py
    return fedsim_py


def main():
    m = import_module()

    # sigmoid sanity
    assert m.predict_prob(0.0) == 0.5
    assert abs(m.predict_prob(math.log(3.0)) - 0.75) < 1e-12
    assert m.trigger(0.3, 0.3) and not m.trigger(0.3, 0.31)

    # threshold sweep on a hand-checked dataset
    rows = m.threshold_sweep(
        scores=[2.0, 1.0, 0.0, -1.0],
        clicked=[True, False, True, False],
        taus=[0.5, 1.5],
    )
    assert rows[0]["retained_impressions"] == 0.5
    assert rows[0]["retained_clicks"] == 0.5
    assert abs(rows[0]["delta_ctr"]) < 1e-12
    assert rows[1]["retained_impressions"] == 0.25
    assert abs(rows[1]["delta_ctr"] - 1.0) < 1e-12

    # an experiment config is available programmatically
    assert "goal_client_count = 100" in m.default_config_toml()

    # end-to-end simulation on the smoke config
    out_dir = Path(tempfile.mkdtemp(prefix="fedsim_out_"))
    summary = m.run_simulation(str(REPO / "configs" / "smoke.toml"), str(out_dir))
    print("simulation summary:", summary)
    assert summary["committed_train_rounds"] > 0
    assert summary["model_version"] == summary["committed_train_rounds"]
    assert summary["impressions"] > 0

    # the checkpoint written by the run parses and scores
    names, weights, bias = m.load_checkpoint(str(out_dir / "checkpoint.txt"))
    assert len(names) == len(weights)
    assert names[-1].startswith("day_of_week")
    assert any(w != 0.0 for w in weights)
    score = bias + weights[0] * 1.0
    assert 0.0 < m.predict_prob(score) < 1.0

    # determinism through the bindings
    rerun_dir = Path(tempfile.mkdtemp(prefix="fedsim_out_"))
    rerun = m.run_simulation(str(REPO / "configs" / "smoke.toml"), str(rerun_dir))
    a = (out_dir / "checkpoint.txt").read_bytes()
    b = (rerun_dir / "checkpoint.txt").read_bytes()
    assert a == b, "checkpoints differ between identical runs"
    assert rerun["committed_train_rounds"] == summary["committed_train_rounds"]

    print("fedsim_py smoke test: OK")


if __name__ == "__main__":
    main()
