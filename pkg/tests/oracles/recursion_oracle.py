"""Throwaway re-derivation of the order-parameter recursions.

Written independently of the package (plain floats, one loop per
direction) and used once to freeze the golden files under tests/golden/.
Run as ``python tests/oracles/recursion_oracle.py`` to regenerate.
"""
import json
import math
from pathlib import Path

GOLDEN = Path(__file__).resolve().parent.parent / "golden"


def relu_corr(gam, c):
    return gam / (2 * math.pi) * (math.sqrt(1 - c * c) + c * math.pi / 2 + c * math.asin(c))


def evaluate(layers, sw, sb, hat_seed="zero", per_site=True):
    """layers: list of dicts with keys kind, fan_in, bn, gamma, K.

    With ``per_site`` the conv backward quantities are site averages: the
    flattened FC value is split over the K sites at the boundary and each
    conv-to-conv step picks up the mean hit count K_{l+1}|F| / K_l.
    """
    L = len(layers)
    H, Ht, Hh = [1.0], [0.0], [0.0]
    G, Gt, Gh = [None], [None], [None]
    for l in range(1, L + 1):
        lay = layers[l - 1]
        g = sb + sw * H[l - 1]
        gt = sb + sw * Ht[l - 1]
        gh = sb + sw * Hh[l - 1]
        G.append(g)
        Gt.append(gt)
        Gh.append(gh)
        if l == L:
            H.append(g)
            Ht.append(gt)
            Hh.append(gh)
        elif lay["bn"]:
            H.append(lay["gamma"] ** 2 / 2)
            Ht.append(lay["gamma"] ** 2 / (2 * math.pi))
            Hh.append(lay["gamma"] ** 2 / (2 * math.pi))
        else:
            H.append(g / 2)
            Ht.append(relu_corr(g, min(gt / g, 1.0)))
            Hh.append(relu_corr(g, min(gh / g, 1.0)))
    D = [None] * (L + 1)
    Dt = [None] * (L + 1)
    Dh = [None] * (L + 1)
    D[L] = 1.0
    Dt[L] = 1.0
    Dh[L] = 0.0 if hat_seed == "zero" else 1.0
    for l in range(L - 1, 0, -1):
        lay = layers[l - 1]
        up = layers[l]
        if per_site and lay["kind"] == "conv":
            ratio = (up["K"] if up["kind"] == "conv" else 1.0) / lay["K"]
        else:
            ratio = 1.0
        if lay["bn"]:
            k = lay["gamma"] ** 2 * sw / G[l]
            D[l] = k / 2 * D[l + 1]
            Dt[l] = k / 4 * Dt[l + 1]
            Dh[l] = k / 4 * Dh[l + 1]
        else:
            ct = min(Gt[l] / G[l], 1.0)
            ch = min(Gh[l] / G[l], 1.0)
            D[l] = sw / 2 * D[l + 1]
            Dt[l] = sw * Dt[l + 1] / (2 * math.pi) * (math.pi / 2 + math.asin(ct))
            Dh[l] = sw * Dh[l + 1] / (2 * math.pi) * (math.pi / 2 + math.asin(ch))
        D[l] *= ratio
        Dt[l] *= ratio
        Dh[l] *= ratio
    f = []
    for l in range(1, L + 1):
        lay = layers[l - 1]
        if lay["kind"] == "fc":
            f.append(lay["fan_in"] * Ht[l - 1] * Dt[l])
        else:
            K = lay["K"]
            f.append(lay["fan_in"] * ((K - 1) * Dh[l] + Dt[l]) * ((K - 1) * Hh[l - 1] + Ht[l - 1]))
    return {
        "Gamma": G[1:], "Gamma_tilde": Gt[1:], "Gamma_hat": Gh[1:],
        "H": H, "H_tilde": Ht, "H_hat": Hh,
        "Delta": D[1:], "Delta_tilde": Dt[1:], "Delta_hat": Dh[1:],
        "f": f, "lambda_bound": sum(f),
    }


def fc_layers(gamma, bn):
    widths = [784, 1000, 1000, 1000, 10]
    out = []
    for i in range(4):
        out.append({"kind": "fc", "fan_in": widths[i], "bn": bn and i < 3, "gamma": gamma})
    return out


def conv_layers(gamma, bn):
    # 32x32x3 input, 3x3 stride-2 valid convs: 15x15, 7x7, 3x3 sites
    chans = [3, 30, 60, 90]
    sites = [1024, 225, 49, 9]
    out = []
    for i in range(3):
        out.append({"kind": "conv", "fan_in": chans[i] * 9, "K": sites[i + 1], "bn": bn, "gamma": gamma})
    out.append({"kind": "fc", "fan_in": 90 * 9, "bn": False, "gamma": gamma})
    return out


def main():
    GOLDEN.mkdir(exist_ok=True)
    cases = {}
    for name, build in (("fc", fc_layers), ("conv", conv_layers)):
        for bn in (True, False):
            for gamma in (0.5, 1.0, 2.0, 4.0):
                if not bn and gamma != 1.0:
                    continue
                key = f"{name}_{'bn' if bn else 'vanilla'}_g{gamma}"
                cases[key] = evaluate(build(gamma, bn), 2.0, 0.5)
    cases["conv_bn_g1.0_tildeseed"] = evaluate(conv_layers(1.0, True), 2.0, 0.5, hat_seed="tilde")
    cases["conv_bn_g1.0_flattened"] = evaluate(conv_layers(1.0, True), 2.0, 0.5, per_site=False)
    cases["conv_vanilla_g1.0_flattened"] = evaluate(conv_layers(1.0, False), 2.0, 0.5, per_site=False)
    # eta* curves for the sweep golden: mu = 0.9
    grid = [round(0.1 * i, 10) for i in range(1, 41)]
    curves = {}
    for name, build in (("fc", fc_layers), ("conv", conv_layers)):
        rows = []
        for gamma in grid:
            lam = evaluate(build(gamma, True), 2.0, 0.5)["lambda_bound"]
            rows.append([gamma, lam, 2 * 1.9 / lam])
        van = evaluate(build(1.0, False), 2.0, 0.5)["lambda_bound"]
        curves[name] = {"bn": rows, "vanilla": [van, 2 * 1.9 / van]}
    (GOLDEN / "recursions.json").write_text(json.dumps(cases, indent=1))
    (GOLDEN / "eta_curves.json").write_text(json.dumps(curves, indent=1))


if __name__ == "__main__":
    main()
