"""Evaluate the seed-42 instances by direct formulas in 50-digit arithmetic.

Writes ``frozen.json`` next to this file. Only mpmath and the instance
builders are used; nothing from the package under test.

    python3 tests/oracles/generate.py
"""

import json
from pathlib import Path

import mpmath as mp

from instances import contrastive_instance, joint_instance, tripartite_instance

mp.mp.dps = 50


def sp(t):
    return mp.log1p(mp.exp(t))


def dot(a, b):
    return mp.fsum(mp.mpf(float(p)) * mp.mpf(float(q)) for p, q in zip(a, b))


def norm(a):
    return mp.sqrt(dot(a, a))


def cos(a, b):
    return dot(a, b) / (norm(a) * norm(b))


def logits(W, b, x, unit_w):
    out = []
    for j in range(len(b)):
        s = dot(W[j], x)
        if unit_w:
            s = s / norm(W[j])
        out.append(s + mp.mpf(float(b[j])))
    return out


def ce_row(s, k, include=None):
    idx = [j for j in range(len(s)) if include is None or include[j] or j == k]
    return mp.log(mp.fsum(mp.exp(s[j]) for j in idx)) - s[k]


def bce_row(s, k, keep=None):
    neg = [j for j in range(len(s)) if j != k and (keep is None or keep[j])]
    return sp(-s[k]) + mp.fsum(sp(s[j]) for j in neg)


def uniform_row(W, k, family):
    s = [dot(W[k], W[j]) for j in range(len(W))]
    if family == "ce":
        return ce_row(s, k)
    return mp.fsum(sp(s[j]) for j in range(len(W)) if j != k)


def tripartite(inst, family):
    X, y, Z, W, b = inst["X"], inst["y"], inst["Z"], inst["W"], inst["b"]
    B, K = len(y), len(b)
    sc = []
    for i in range(B):
        s = logits(W, b, X[i], unit_w=True)
        k = int(y[i])
        sc.append(bce_row(s, k, inst["keep"][i]) if family == "bce" else ce_row(s, k))
    ss = []
    tau = mp.mpf(inst["tau"])
    for i in range(B):
        k = int(y[i])
        if not inst["init"][k]:
            continue
        c = [cos(Z[i], inst["slots"][j]) / tau if inst["init"][j] else mp.mpf(0) for j in range(K)]
        ss.append(bce_row(c, k, inst["init"]) if family == "bce" else ce_row(c, k, inst["init"]))
    cc = [uniform_row(W, k, family) for k in range(K)]
    total = (mp.fsum(sc) / B + mp.mpf(inst["lambda_ss"]) * mp.fsum(ss) / B
             + mp.mpf(inst["lambda_cc"]) * mp.fsum(cc) / K)
    return total


def main():
    out = {}
    j = joint_instance()
    s = logits(j["W"], j["b"], j["x"], unit_w=False)
    out["ce_joint_42"] = ce_row(s, j["k"])
    out["bce_joint_42"] = bce_row(s, j["k"], j["keep"])
    out["bce_joint_42_r1"] = bce_row(s, j["k"])
    c = contrastive_instance()
    tau = mp.mpf(c["tau"])
    cs = [cos(c["z"], c["slots"][l]) / tau if c["init"][l] else mp.mpf(0) for l in range(len(c["init"]))]
    out["bce_contrastive_42"] = bce_row(cs, c["k"], c["init"])
    out["ce_contrastive_42"] = ce_row(cs, c["k"], c["init"])
    beta = mp.mpf("0.9999")
    out["cb_weight_5000"] = (1 - beta) / (1 - beta ** 5000)
    t = tripartite_instance()
    out["tripartite_bce_42"] = tripartite(t, "bce")
    out["tripartite_ce_42"] = tripartite(t, "ce")
    frozen = {k: mp.nstr(v, 25) for k, v in out.items()}
    path = Path(__file__).with_name("frozen.json")
    path.write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n")
    for k, v in frozen.items():
        print(f"{k:24s} {v}")


if __name__ == "__main__":
    main()
