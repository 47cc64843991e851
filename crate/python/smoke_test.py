"""Smoke test for the `fdia` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/py`,
then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile
from pathlib import Path

import fdia


def check_simulation(grid):
    theta = [0.0] * grid.n_buses
    omega = [0.05] * grid.n_buses
    clean = fdia.simulate(grid, theta, omega, steps=200)
    assert len(clean) == 200 and len(clean[0]) == 2 * grid.n_buses
    hit = fdia.simulate(grid, theta, omega, steps=200, attack_bus=7, attack_steps=list(range(50, 200)))
    assert clean[49] == hit[49]
    assert clean[50] != hit[50]
    assert max(abs(r[10 + 7]) for r in hit) > max(abs(r[10 + 7]) for r in clean[50:])
    assert grid.energy(clean[-1][:10], clean[-1][10:]) < grid.energy(theta, omega) + 1.0
    again = fdia.Grid.from_config(grid.to_config())
    assert again.droop == grid.droop


def check_predictor_and_detector(grid, tmp):
    obs, targets = fdia.dataset(grid, episodes=3, stride=20, seed=1)
    assert len(obs) == len(targets) > 0
    assert len(obs[0]) == 5 * 20 and len(targets[0]) == 20

    pred = fdia.Predictor.train(grid, units=8, episodes=20, epochs=3, stride=10, seed=4)
    assert len(pred.history) == 3
    mae_theta, _, mae_omega, _ = pred.evaluate(grid, episodes=3)
    assert math.isfinite(mae_theta) and math.isfinite(mae_omega)
    out = pred.predict(obs[0])
    assert len(out) == 20

    path = Path(tmp) / "p.ckpt"
    pred.save(str(path))
    back = fdia.Predictor.load(str(path))
    assert back.fingerprint == pred.fingerprint
    assert back.predict(obs[0]) == out

    det = fdia.Detector.train(pred, grid, mode="sliding", n_benign=200, n_adversarial=200, m=0, epochs=10, seed=2)
    assert 0.0 <= det.test_accuracy <= 1.0
    flagged, score = det.detect(pred, obs[0], targets[0])
    assert isinstance(flagged, bool) and 0.0 <= score <= 1.0
    det.save(str(Path(tmp) / "d.ckpt"))
    assert len(fdia.Detector.load(str(Path(tmp) / "d.ckpt")).score([[1e-6] * 20])) == 1

    try:
        fdia.Detector.train(pred, grid, mode="sideways")
    except ValueError:
        pass
    else:
        raise AssertionError("bad mode accepted")
    return det


def check_table(tmp):
    config = {
        "prediction": {
            "sigmas": [0.0],
            "episodes": 10,
            "epochs": 1,
            "test_episodes": 2,
        }
    }
    doc = json.loads(fdia.run_table("mae-noise", str(Path(tmp) / "t"), config=json.dumps(config), seed=5))
    assert doc["table"] == "mae-noise" and doc["seed"] == 5
    assert len(doc["records"]) == 1


def main():
    grid = fdia.Grid()
    assert grid.n_buses == 10 and fdia.EPISODE_STEPS == 500
    check_simulation(grid)
    with tempfile.TemporaryDirectory() as tmp:
        det = check_predictor_and_detector(grid, tmp)
        check_table(tmp)
    print(f"fdia smoke test ok (toy detector accuracy {det.test_accuracy:.3f})")


if __name__ == "__main__":
    main()
