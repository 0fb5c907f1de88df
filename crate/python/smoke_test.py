"""Smoke test for the stratcheck extension module.

Build and run from the repository root:

    cargo build --release -p stratcheck-py --features extension-module
    cp target/release/libstratcheck.so python/stratcheck.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import stratcheck as sc


def main():
    # subspace angles
    p = sc.Subspace(3, [[1.0, 0.0, 0.0]])
    q = sc.Subspace(3, [[1.0, 1.0, 0.0]])
    assert abs(sc.angle(p, q) - math.sqrt(0.5)) < 1e-12
    assert sc.angle(p, sc.Subspace(3, [[1, 0, 0], [0, 1, 0]])) < 1e-12

    # expressions
    e = sc.Expression("x^2 + sqrt(y)", ["x", "y"])
    assert abs(e.eval([3.0, 4.0]) - 11.0) < 1e-12
    gx, gy = e.gradient([3.0, 4.0])
    assert abs(gx - 6.0) < 1e-12 and abs(gy - 0.25) < 1e-12
    try:
        e.eval([0.0, -1.0])
    except sc.StratcheckError:
        pass
    else:
        raise AssertionError("sqrt of a negative must raise")

    # the Santa's hat set and its apex fault
    assert "santa_hat" in sc.fixture_names()
    hat = sc.StrataSet.fixture("santa_hat")
    names = sorted(s.name for s in hat.strata)
    assert names == ["annulus", "circle", "cone"], names
    again = sc.StrataSet.from_json(hat.to_json())
    assert again.to_json() == hat.to_json()

    pair = hat.pair("X,Y")
    apex = pair.check_a([1.0, 0.0, 0.0])
    assert apex.status == "fault" and 0.4 <= apex.score <= 0.6, apex
    far = pair.check_a([-1.0, 0.0, 0.0])
    assert far.status == "regular", far
    comps = pair.components([1.0, 0.0, 0.0])
    assert len(comps) == 2 and comps.essential.count(True) == 1, comps
    assert pair.sing_a([1.0, 0.0, 0.0]).status == "regular"

    report = pair.scan("a", samples=32)
    assert len(report.clusters) == 1, report
    assert report.csv.startswith("y0,y1,y2,status")

    # flat pieces of the circle
    circle = hat.stratum("circle")
    pieces = sc.flatten(circle, 0.5)
    assert 12 <= len(pieces) <= 64, len(pieces)
    try:
        sc.flatten(circle, 0.5, max_pieces=4)
    except sc.BudgetError:
        pass
    else:
        raise AssertionError("expected BudgetError")

    # command-line front end
    code, out, _ = sc.run_cli(["check-a", "--set", "santa_hat", "--pair", "X,Y", "--point", "1,0,0"])
    assert code == 1 and out.startswith("# stratcheck check-a seed=42"), (code, out)
    code, _, err = sc.run_cli(["check-a", "--set", "no_such_set", "--point", "0"])
    assert code == 3 and err

    print("smoke test passed")


if __name__ == "__main__":
    main()
