"""Smoke test for the pymarkovid extension. Run after `pip install`."""

import math

import pymarkovid as m


def main():
    sys = m.StateSpaceModel.preset("siso-paper")
    print(sys)

    data = m.simulate(sys, 200, 10, seed=1)
    print(data)
    for method in ["ols", "wls-optimal", "wls-estimated-recursive", "wls-estimated-hokalman"]:
        r = m.estimate(data, method, system=sys)
        print(f"{method:26s} relative error {r['relative_error']:.4f}")
        assert 0.0 < r["relative_error"] < 1.0

    clean = m.simulate(sys, 50, 6, sigma_e=0.0, seed=2)
    assert m.estimate(clean, "ols", system=sys)["relative_error"] < 1e-9

    b = m.bounds(1, 1, 10, 0.1, 1.0, 500)
    assert abs(b["n_min_ols"] - (80 + 24 * math.log(200))) < 1e-9
    assert b["n_min_wls"] < b["n_min_ols"]

    try:
        m.simulate(sys, 10, 5, sigma_u=0.0)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("sigma_u = 0 accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
