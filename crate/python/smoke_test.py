"""Smoke test for the df2m_py extension.

Build it first:

    cargo build --release -p df2m-py --features extension-module

The script copies target/release/libdf2m_py.so (or the path in DF2M_PY_LIB)
next to a temporary import path as df2m_py.so and exercises the bindings.
"""

import json
import math
import os
import shutil
import sys
import sysconfig
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension(tmp):
    lib = os.environ.get("DF2M_PY_LIB")
    if lib is None:
        name = "df2m_py.dll" if sys.platform == "win32" else (
            "libdf2m_py.dylib" if sys.platform == "darwin" else "libdf2m_py.so")
        lib = os.path.join(ROOT, "target", "release", name)
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(lib, os.path.join(tmp, "df2m_py" + suffix))
    sys.path.insert(0, tmp)
    import df2m_py
    return df2m_py


def main():
    with tempfile.TemporaryDirectory() as tmp:
        df2m = import_extension(tmp)
        assert "factors" in df2m.config_keys()

        sim = {"sim.n": "16", "sim.p": "3", "sim.l": "5", "sim.factors": "2"}
        values, grid = df2m.simulate(sim, seed=3)
        assert (len(values), len(values[0]), len(values[0][0])) == (16, 3, 5)
        assert grid[0] == 0.0 and grid[-1] == 1.0

        small = {"factors": "3", "inducing": "4", "hidden_size": "4",
                 "max_iters": "40", "window": "5"}
        model = df2m.Model.fit(values, grid, small, seed=1)
        assert 0 < len(model.elbo_trace) <= 40
        assert all(math.isfinite(e) for e in model.elbo_trace)
        forecast = model.predict(2)
        assert (len(forecast), len(forecast[0]), len(forecast[0][0])) == (2, 3, 5)

        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        loaded = df2m.Model.load(path)
        assert loaded.predict(2) == forecast
        assert loaded.active_columns() == model.active_columns()

        again = df2m.Model.fit(values, grid, small, seed=1)
        assert again.predict(2) == forecast

        report = json.loads(df2m.evaluate(
            values, grid, dict(small, n1="13", baseline_steps="10"), seed=1))
        assert [r["model"] for r in report["reports"]][-1] == "global-mean"
        assert report["reports"][0]["horizons"][0]["windows"] == 3

        try:
            df2m.Model.fit(values, grid, {"encoder": "transformer"})
        except ValueError as e:
            assert "encoder" in str(e)
        else:
            raise AssertionError("unknown encoder accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
