"""Smoke test for the Python extension module.

Build it first:

    cargo build -p pam-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built shared
library next to a temporary package path as `pam_py.so` and imports it.
"""

import glob
import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_module(tmp):
    candidates = sorted(
        glob.glob(os.path.join(ROOT, "target", "*", "libpam_py.so")),
        key=os.path.getmtime,
        reverse=True,
    )
    if not candidates:
        sys.exit("libpam_py.so not found; run: cargo build -p pam-py --features extension-module")
    shutil.copy(candidates[0], os.path.join(tmp, "pam_py.so"))
    sys.path.insert(0, tmp)
    import pam_py

    return pam_py


def main():
    tmp = tempfile.mkdtemp()
    pam = import_module(tmp)
    assert "SL+ImplicitRAS" in pam.METHODS

    env = pam.Env("granular")
    state = env.reset(seed=3)
    obs = state.observe()
    assert len(obs) == 64
    before = env.metrics(state)
    action = env.expert_action(state)
    assert action.kind == "sweep"
    after = env.metrics(env.step(state, action))
    assert after["emd"] < before["emd"], (before, after)

    # Same seed, same reset.
    assert env.reset(seed=3).observe() == obs

    cands = [action, pam.Action("sweep", (0.1, 0.1), (0.2, 0.1)), pam.Action("sweep", (0.9, 0.9), (0.8, 0.9))]
    ordering, unrankable, optimal, scores = env.oracle_rank(state, cands)
    assert sorted(ordering + unrankable) == [0, 1, 2]
    assert len(scores) == 3
    assert pam.expected_pair_count(5, 3) == 33
    assert pam.emd(obs, obs) == 0.0

    try:
        pam.Action("sweep", (0.5, 0.5), (1.5, 0.5))
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-workspace action accepted")

    # A tiny run through every stage.
    sl = os.path.join(tmp, "sl.jsonl")
    assert pam.collect("granular", sl, states=6, k=2, seed=1) == 6
    ref = os.path.join(tmp, "ref.ckpt")
    losses = pam.train_sl("granular", sl, ref, epochs=2, seed=1)
    assert len(losses) == 2
    policy = pam.Policy.load(ref, "granular")
    assert len(policy.predict(obs, 3, seed=0)) == 3
    pl = os.path.join(tmp, "pl.jsonl")
    written, total, complete = pam.rollout("granular", ref, pl, states=3, n=3, seed=1)
    assert (written, total, complete) == (3, 3, True)
    fine = os.path.join(tmp, "fine.ckpt")
    curve = pam.train_dpo("granular", pl, ref, fine, epochs=1)
    assert abs(curve[0] - 0.6931471805599453) < 1e-12
    result = json.loads(
        pam.evaluate("granular", "SL+ImplicitRAS", ref, os.path.join(tmp, "eval"), finetuned=fine, trials=1, n=2, max_steps=2)
    )
    assert len(result["emd_mean"]) == 3
    try:
        pam.Policy.load(fine, "granular")
    except ValueError:
        pass
    else:
        raise AssertionError("finetuned checkpoint loaded as reference")

    shutil.rmtree(tmp)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
