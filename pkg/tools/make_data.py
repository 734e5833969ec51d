"""Regenerate the files under src/ppcreg/data.

The loss expectations are computed here with plain double loops, independent
of ppcreg.losses, so the shipped numbers double as an oracle.
"""

import json
import math
from pathlib import Path

import numpy as np

from ppcreg.geometry import exp_motion
from ppcreg.volume import make_phantom, save_volume, vertebra_stack_spec

DATA = Path(__file__).resolve().parents[1] / "src" / "ppcreg" / "data"


def brute_losses(fx):
    T, T_hat, pts = fx["T"], fx["T_hat"], fx["points"]
    acc = 0.0
    for w in pts:
        a = [sum(T[r][c] * w[c] for c in range(3)) + T[r][3] for r in range(3)]
        b = [sum(T_hat[r][c] * w[c] for c in range(3)) + T_hat[r][3] for r in range(3)]
        acc += math.sqrt(sum((a[k] - b[k]) ** 2 for k in range(3)))
    l_reg = acc / len(pts)

    acc, cnt = 0.0, 0
    h, w_, _ = fx["flow_pred"].shape
    for i in range(h):
        for j in range(w_):
            if fx["valid"][i, j]:
                d0 = fx["flow_pred"][i, j, 0] - fx["flow_gt"][i, j, 0]
                d1 = fx["flow_pred"][i, j, 1] - fx["flow_gt"][i, j, 1]
                acc += math.sqrt(d0 * d0 + d1 * d1)
                cnt += 1
    l_flow = acc / cnt
    l_m = sum(float(v) ** 2 for v in fx["dv"])
    l_dirn = l_reg + 0.5 * l_flow + 1e-3 * l_m

    def standardize(Z):
        B, D = Z.shape
        out = [[0.0] * D for _ in range(B)]
        for d in range(D):
            mean = sum(Z[b][d] for b in range(B)) / B
            var = sum((Z[b][d] - mean) ** 2 for b in range(B)) / B
            for b in range(B):
                out[b][d] = (Z[b][d] - mean) / math.sqrt(var)
        return out

    z1, z2 = standardize(fx["Z1"]), standardize(fx["Z2"])
    B, D = fx["Z1"].shape
    inv = red = 0.0
    for i in range(D):
        for j in range(D):
            c = sum(z1[b][i] * z2[b][j] for b in range(B)) / B
            if i == j:
                inv += (1.0 - c) ** 2
            else:
                red += c * c
    l_bt = inv + 0.005 * red
    l_afe = (sum(math.log(p) for p in fx["p_sim"]) / len(fx["p_sim"])
             + sum(math.log(1.0 - p) for p in fx["p_real"]) / len(fx["p_real"]))
    return {
        "registration_loss": l_reg, "flow_loss": l_flow, "motion_reg_loss": l_m,
        "dirn_loss": l_dirn, "barlow_twins_loss": l_bt, "adversarial_feature_loss": l_afe,
        "total_loss": l_dirn + 0.2 * l_afe + 0.05 * l_bt,
    }


def main():
    rng = np.random.Generator(np.random.PCG64(20240))
    fx = {
        "T": exp_motion(np.r_[0.1 * rng.standard_normal(3), 5 * rng.standard_normal(3)]).matrix,
        "T_hat": exp_motion(np.r_[0.1 * rng.standard_normal(3), 5 * rng.standard_normal(3)]).matrix,
        "points": 40 * rng.standard_normal((50, 3)),
        "flow_pred": 3 * rng.standard_normal((12, 16, 2)),
        "flow_gt": 3 * rng.standard_normal((12, 16, 2)),
        "valid": rng.random((12, 16)) < 0.7,
        "dv": rng.standard_normal(6),
        "Z1": rng.standard_normal((16, 8)),
        "Z2": rng.standard_normal((16, 8)),
        "p_sim": rng.uniform(0.05, 0.95, 32),
        "p_real": rng.uniform(0.05, 0.95, 32),
    }
    fx["Z2"] = 0.8 * fx["Z1"] + 0.6 * fx["Z2"]
    np.savez(DATA / "loss_fixtures.npz", **fx)
    expected = brute_losses(fx)
    (DATA / "loss_expected.json").write_text(json.dumps(expected, indent=2, sort_keys=True) + "\n")

    ref = make_phantom(vertebra_stack_spec(dims=(32, 32, 32), spacing=(4.0, 4.0, 4.0)))
    save_volume(ref, DATA / "reference_phantom.vol")
    full = make_phantom(vertebra_stack_spec())
    checks = {"reference_phantom.vol": ref.checksum(), "vertebra-stack": full.checksum()}
    (DATA / "checksums.json").write_text(json.dumps(checks, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
