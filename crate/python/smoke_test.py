"""Smoke test for the cleanmorse Python module.

Build and install it first:

    pip install --no-build-isolation ./crates/py

Pass --full to also run the whole pipeline on the round sphere (a few seconds).
"""

import json
import sys

import cleanmorse


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    return bool(cond)


def main():
    ok = True
    ok &= check("upright_torus" in cleanmorse.builtin_setups(), "builtin setups listed")

    torus = cleanmorse.Setup("upright_torus")
    crits = torus.critical_points()
    ok &= check([c[1] for c in crits] == [2, 1, 1, 0], "torus critical indices")
    ok &= check(torus.euler_characteristic == 0, "torus euler characteristic")
    ok &= check(len(torus.strata(1)) >= 1, "catalog strata available")

    ok &= check(cleanmorse.smith_normal_form([[2, 0], [0, 0]]) == [2], "smith invariants")
    circle = cleanmorse.betti_numbers([("a", 1), ("b", 0)], [("a", "b", 1), ("a", "b", -1)])
    ok &= check(circle == [1, 1], "circle betti numbers")
    rp2 = [("e2", 2), ("e1", 1), ("e0", 0)]
    ok &= check(cleanmorse.betti_numbers(rp2, [("e2", "e1", 1), ("e2", "e1", 1)], "Z2") == [1, 1, 1], "projective plane over Z/2")

    try:
        cleanmorse.Setup("no_such_surface")
        ok &= check(False, "unknown setup rejected")
    except ValueError:
        ok &= check(True, "unknown setup rejected")

    cfg = cleanmorse.RunConfig("round_sphere", seed=3)
    ok &= check(json.loads(cfg.to_json())["seed"] == 3, "config round trip")

    if "--full" in sys.argv:
        report = cleanmorse.run(cfg)
        ok &= check(report.passed, "sphere pipeline passes")
        ok &= check(report.betti == [1, 0, 1], "sphere betti numbers")

    for name, passed, detail in cleanmorse.selftest():
        ok &= check(passed, f"selftest {name}: {detail}")

    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
