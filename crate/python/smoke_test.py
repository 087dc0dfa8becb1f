#!/usr/bin/env python3
"""End-to-end smoke test of the implicit_motion_py extension module.

Builds the cdylib if it is missing, imports it straight from the cargo
target directory, and spot-checks each binding against hand-computed
values. Exits nonzero on the first failed check.
"""

import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]

CDYLIB_NAMES = (
    "libimplicit_motion_py.so",
    "implicit_motion_py.so",
    "libimplicit_motion_py.dylib",
    "implicit_motion_py.dylib",
    "implicit_motion_py.dll",
)


def find_cdylib():
    hits = [
        ROOT / "target" / profile / name
        for profile in ("debug", "release")
        for name in CDYLIB_NAMES
        if (ROOT / "target" / profile / name).exists()
    ]
    return max(hits, key=lambda p: p.stat().st_mtime) if hits else None


def load_module():
    lib = find_cdylib()
    if lib is None:
        subprocess.run(
            ["cargo", "build", "-p", "implicit-motion-py"], cwd=ROOT, check=True
        )
        lib = find_cdylib()
    if lib is None:
        sys.exit("no implicit_motion_py cdylib under target/")
    stage = pathlib.Path(tempfile.mkdtemp(prefix="implicit_motion_py."))
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy2(lib, stage / f"implicit_motion_py{suffix}")
    sys.path.insert(0, str(stage))
    import implicit_motion_py

    return implicit_motion_py


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    mod = load_module()
    checks = []

    def check(name, ok, detail=""):
        checks.append((name, ok))
        mark = "ok" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"{name}: {mark}{suffix}")

    names = mod.examples()
    check(
        "examples",
        len(names) == 8 and "gravita" in names and "dae3d" in names,
        ", ".join(names),
    )

    value, jac = mod.eval_expr(
        ["x1^2*y1 + sin(x1)"], ["x1", "y1"], [2.0, 3.0]
    )
    want_value = 4.0 * 3.0 + math.sin(2.0)
    want_dx = 2.0 * 2.0 * 3.0 + math.cos(2.0)
    check(
        "eval_expr",
        close(value[0], want_value)
        and close(jac[0][0], want_dx)
        and close(jac[0][1], 4.0),
        f"value {value[0]:.12f}",
    )

    p = mod.Problem.example("parabola1")
    check("dims", p.dims() == (1, 1), repr(p))

    xi, eta = p.lift([1.0], [1.0])
    residual = p.residual(xi)
    check(
        "lift",
        max(abs(r) for r in residual) < 1e-10 and close(xi[0], 1.0),
        f"xi {xi}",
    )

    reactive = p.reactive([1.0], [1.0])
    check(
        "reactive",
        close(reactive["r"][0], -0.5) and close(reactive["r"][1], 0.5)
        and reactive["route_gap"] < 1e-12,
        f"r {reactive['r']}",
    )

    tangent = p.tangent_project(xi, [1.0, 0.0])
    normal_part = sum(t * w for t, w in zip(tangent, (-1.0, 1.0)))
    check("tangent_project", abs(normal_part) < 1e-12, f"w_T {tangent}")

    grav = mod.Problem.example("gravita")
    report = grav.check()
    check(
        "check",
        report["status"] == "ok" and report["spd_min_eigenvalue"] > 0.0,
        f"s_sign {report['s_sign']}",
    )

    degree = grav.degree(verify=True)
    check(
        "degree",
        degree["report"]["degree"] == 1
        and degree["report"]["manifold_degree"] == 1
        and len(degree["report"]["zeros"]) == 1,
        f"method {degree['report']['method']}",
    )

    sim = grav.simulate(t1=1.0)
    check(
        "simulate",
        sim["samples"] == 1001 and sim["max_g_drift"] < 1e-9,
        f"drift {sim['max_g_drift']:.3e}",
    )

    twin = mod.Problem.example("parabola2").simulate(t1=2.0, twin=True)
    check(
        "twin",
        twin["twin_gap"] is not None and twin["twin_gap"] < 1e-6,
        f"gap {twin['twin_gap']:.3e}",
    )

    trace = mod.Problem.example("dae_sin").trace(origin="auto", steps=4)
    check(
        "trace",
        trace["points"] >= 1
        and trace["branch"][0]["lambda"] == 0.0
        and trace["worst_residual"] <= 1e-8,
        f"termination {trace['termination']}",
    )

    try:
        mod.Problem.example("lemniscate")
        check("unknown example", False)
    except ValueError as err:
        check("unknown example", "lemniscate" in str(err))

    failed = [name for name, ok in checks if not ok]
    if failed:
        sys.exit(f"failed: {', '.join(failed)}")
    print(f"all {len(checks)} checks passed")


if __name__ == "__main__":
    main()
