"""Regenerate the bundled 50-query LETOR toy extract and its score sidecar."""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "fairrank" / "data"


def main(num_queries=50, seed=20240501):
    rng = np.random.default_rng(seed)
    feature_lines, score_lines = [], []
    for q in range(1, num_queries + 1):
        n = int(rng.integers(8, 16))
        rel = rng.choice(5, size=n, p=[0.4, 0.3, 0.15, 0.1, 0.05])
        if q % 17 == 0:
            rel[:] = 0
        feats = rng.normal(size=(n, 6)) + 0.4 * rel[:, None]
        scores = 0.8 * rel + rng.normal(0, 0.6, size=n)
        for j in range(n):
            fv = " ".join(f"{i + 1}:{feats[j, i]:.4f}" for i in range(6))
            feature_lines.append(f"{rel[j]} qid:{1000 + q} {fv} # doc{j}")
            score_lines.append(f"{scores[j]:.6f}")
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "toy_letor.txt").write_text("\n".join(feature_lines) + "\n")
    (OUT / "toy_letor.scores").write_text("\n".join(score_lines) + "\n")


if __name__ == "__main__":
    main()
