"""Smoke test for the pyfbz extension module.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import pyfbz


def main():
    grid = pyfbz.PhaseGrid(nx=4, nv=12, nomega=8, vmax=5.0)
    print(grid)

    f = pyfbz.Distribution.maxwellian(grid, rho=1.0, u=[0.2, 0.0], temp=1.0)
    m = f.moments()
    assert abs(m["mass"] - 1.0) < 1e-2, m
    print("moments", m, "H", f.entropy(), "M_2", f.moment(2.0))

    op = pyfbz.CollisionOperator(grid)
    gain, loss, net = op.collide(f, sigma=0.2)
    assert len(gain) == len(grid)
    assert min(gain) >= 0.0 and min(loss) >= 0.0
    print("max |net| on a Maxwellian", max(abs(q) for q in net))
    d = op.dissipation(f, sigma=0.2)
    assert d >= 0.0
    print("D", d)

    config = pyfbz.Config(
        "grid.Nx = 4\ngrid.vmax = 4\ngrid.Nv = 8\ngrid.Nomega = 8\n"
        "time.T = 0.06\ntime.dt = 0.02\n"
    )
    traj = pyfbz.run(config)
    drift = traj.drift()
    print("steps", traj.steps, "drift", drift)
    assert traj.steps == 3 and drift[0] < 1e-12
    h = traj.entropy()
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:])), h

    config.sigma = None
    local = pyfbz.run(config)
    print("fuzzy vs local L1 at T", traj.last().l1_distance(local.last()))

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "final.fbz")
        traj.last().save(path, traj.times()[-1])
        g, t = pyfbz.Distribution.load(path)
        assert g.values() == traj.last().values() and math.isclose(t, 0.06)

    try:
        pyfbz.Config("sigma = 0\n")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("sigma = 0 must be rejected")

    print("oracle max deviation", pyfbz.oracle(pyfbz.Config(
        "grid.Nx = 2\ngrid.vmax = 3\ngrid.Nv = 8\ngrid.Nomega = 8\nsigma = 0.3\n")))
    print("smoke test ok")


if __name__ == "__main__":
    main()
