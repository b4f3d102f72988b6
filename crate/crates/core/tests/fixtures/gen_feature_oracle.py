"""Regenerates feature_oracle.json with 50-digit arithmetic.

    python3 gen_feature_oracle.py > feature_oracle.json
"""
import json
import random

from mpmath import mp, mpf, exp, log

mp.dps = 50
K = 20


def random_step(rng):
    kind = rng.random()
    if kind < 0.1:
        # near-degenerate alternatives
        sel = -rng.random() * 1e-6
        alts = sorted((-700 - rng.random() * 300 for _ in range(K - 1)), reverse=True)
    elif kind < 0.2:
        # heavy ties
        v = -rng.random() * 5
        sel = v if rng.random() < 0.5 else v - 1.0
        alts = [v] * (K - 1)
    elif kind < 0.3:
        # selected far down the ranking
        alts = sorted((-rng.random() * 6 for _ in range(K - 1)), reverse=True)
        sel = alts[-1] - rng.random() * 3
    else:
        scale = rng.choice([0.5, 2.0, 8.0, 40.0])
        alts = sorted((-rng.random() * scale for _ in range(K - 1)), reverse=True)
        sel = -rng.random() * scale
    return [sel] + alts


def shannon(ps):
    return -sum(p * log(p) for p in ps if p > 0)


def oracle(step):
    v = [mpf(x) for x in step]
    z = sum(exp(x) for x in v)
    p = [exp(x) / z for x in v]
    alt_mass = sum(p[1:])
    h_alts = shannon([q / alt_mass for q in p[1:]]) if alt_mass >= mpf("1e-300") else mpf(0)
    margin = v[0] - max(v[1:])
    s = 1 / (1 + exp(-margin))
    h_dec = shannon([s, 1 - s])
    return {
        "logprobs": step,
        "trunc_softmax": [float(q) for q in p],
        "avg_logp": float(sum(v) / K),
        "rank_proxy": 1 + sum(1 for a in step[1:] if a > step[0]),
        "entropy_overall": float(shannon(p)),
        "entropy_alts": float(h_alts),
        "decision_entropy": float(h_dec),
    }


def main():
    rng = random.Random(20240601)
    cases = [oracle(random_step(rng)) for _ in range(1000)]
    print(json.dumps(cases))


if __name__ == "__main__":
    main()
