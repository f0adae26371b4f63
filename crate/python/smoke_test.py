"""Smoke test for the mfg_charge_py extension.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py` from the repository root.
"""

import math
import pathlib
import sys

import mfg_charge_py as mfg

CONFIG = pathlib.Path(__file__).resolve().parent.parent / "configs" / "reference.toml"


def main() -> int:
    eq = mfg.solve(str(CONFIG), solver="affine")
    assert len(eq.t) == 1601, len(eq.t)
    assert eq.method == "affine"
    assert abs(eq.soc[-1] - 54.0) < 1.0, eq.soc[-1]

    var = mfg.solve(str(CONFIG), solver="variational", overrides=["price.kind=affine"])
    gap = max(abs(a - b) for a, b in zip(eq.power, var.power))
    assert gap <= 1e-4, gap

    pop = mfg.simulate(str(CONFIG), overrides=["sim.agents=50", "sim.baseline=false"])
    assert len(pop.mean_power) == 1601
    assert math.isfinite(pop.consistency) and pop.consistency > 0.0

    try:
        mfg.solve(str(CONFIG), overrides=["price.c1=-1"])
    except ValueError as err:
        assert "c1>0" in str(err), err
    else:
        raise AssertionError("negative slope accepted")

    try:
        mfg.solve(str(CONFIG), solver="fixedpoint", overrides=["solve.max_iter=1"])
    except RuntimeError:
        pass
    else:
        raise AssertionError("one fixed-point iteration converged")

    ok, checks = mfg.verify(str(CONFIG), quick=True)
    failed = [c for c in checks if not c[1]]
    assert ok and not failed, failed

    print(f"ok: {len(checks)} checks, consistency gap {pop.consistency:.4f} kW")
    return 0


if __name__ == "__main__":
    sys.exit(main())
