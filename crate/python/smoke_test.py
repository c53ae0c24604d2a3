"""Smoke test for the morrey_lab_py extension."""

import json
import math

import morrey_lab_py as ml


def main():
    field = ml.Field.hardy(3, 0.5)
    assert field.dim == 3
    b = field.eval(0.0, [0.5, 0.0, 0.0])
    assert abs(b[0] - math.sqrt(0.5) * 0.5 / 0.5) < 1e-12, b

    again = ml.Field(field.to_json())
    assert again.eval(0.3, [0.1, 0.2, 0.0]) == field.eval(0.3, [0.1, 0.2, 0.0])

    norms = [ml.morrey_norm(field, q, 0.125, 3, anchor_extent=1)["value"] for q in (1.2, 1.5, 2.0, 3.0)]
    assert all(a <= b for a, b in zip(norms, norms[1:])), norms
    k = ml.morrey_norm(ml.Field.constant([0.0, 3.0, 4.0]), 2.0, 1.0, 4)["value"]
    assert abs(k - 40.0) < 0.4, k

    assert ml.lps_classify(3, 4.0, 8.0)["class"] == "critical"
    assert ml.lps_classify(3, 6.0, 8.0)["class"] == "subcritical"
    assert ml.hardy_criticality(3, 100.0) == "super_critical"

    grid = ml.Grid(3, 17, 0.25, 9, 0.0625)
    assert grid.shape == [9, 17, 17, 17]
    one = ml.Lattice(grid, [1.0] * len(grid.times()) * 17**3)
    out = ml.potential_apply(one, 1.0, 4.0)
    centre = [out.interpolate(t, [0.0, 0.0, 0.0]) for t in grid.times()]
    assert all(a <= b for a, b in zip(centre, centre[1:])), centre
    assert max(out.values) <= 0.5 + 1e-9

    f = ml.Lattice.gaussian(grid, 1.0, 0.5, time_power=1)
    u, report = ml.neumann_solve(field, f, 4.0, level=10.0, probes=16)
    assert report["converged"] and report["gate"]["max_ratio"] < 1.0, report["gate"]
    assert len(u) == len(f) and all(math.isfinite(v) for v in u.values)

    try:
        ml.neumann_solve(ml.Field.hardy(3, 100.0), f, 1.0, level=1000.0, probes=16)
    except RuntimeError as e:
        assert "gate" in str(e)
    else:
        raise AssertionError("strong drift was not refused")

    ens = ml.simulate(ml.Field.zero(3), [0.0, 0.0, 0.0], 0.5, 0.01, 4000, seed=3)
    m, se = ens.second_moment()
    assert abs(m - 3.0) < 4 * se, (m, se)
    assert ens.tail_mass(0.0) == 1.0 and ens.flagged == []
    fit = ml.simulate(field, [0.2, 0.0, 0.0], 0.5, 0.002, 2000, seed=5, level=10.0).krylov_fit(
        field, 10.0, [0.02, 0.04, 0.08, 0.16]
    )
    assert 0.0 < fit["gamma"] < 1.5, json.dumps(fit)

    print("smoke test passed:", ml.__version__)


if __name__ == "__main__":
    main()
