"""Exercises the bindings end to end on a small synthetic sample."""

import json
import math
import os
import tempfile

import crcca_py


def main():
    x, y, labels = crcca_py.synth(800, seed=3)
    assert len(x) == len(y) == len(labels) == 800
    assert set(labels) <= {0, 1, 2, 3}

    for method in ("linear", "crcca", "ace"):
        model = crcca_py.fit(x, y, method=method, levels=5, k=20)
        assert model.kind == method
        metrics = model.evaluate(x, y)
        u, v = model.transform(x, y)
        rho = crcca_py.normalized_objective(u, v)
        assert abs(rho - metrics["normalized_objective"]) < 1e-9, (method, rho, metrics)

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.json")
            model.save(path)
            again = crcca_py.Model.load(path)
            assert again.to_json() == model.to_json()
        print(f"{method}: normalized objective {rho:.4f}")

    grid = [-3.0 + 0.2 * i for i in range(31)]
    weights = [math.exp(-v * v / 2) for v in grid]
    total = sum(weights)
    sol = crcca_py.solve_rd([[v] for v in grid], [w / total for w in weights], 0.5, points=41)
    assert abs(sol["mean"][0]) < 1e-6 and abs(sol["second_moment"][0] - 1) < 1e-6
    print(f"rd: {sol['rate_bits']:.4f} bits at distortion {sol['distortion']:.4f}")

    report = crcca_py.run_experiment(
        json.dumps({"method": "linear", "data": {"source": "synth", "n": 600, "seed": 1}, "repetitions": 2})
    )
    assert len(report["repetitions"]) == 2

    try:
        crcca_py.fit(x, y, method="pca")
    except ValueError as err:
        assert "unknown method" in str(err)
    else:
        raise AssertionError("bad method accepted")
    try:
        crcca_py.Model.load("/nonexistent/model.json")
    except OSError:
        pass
    else:
        raise AssertionError("missing file accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
