"""Regenerates the committed test fixtures.

Exemplar selection is transcribed here with plain Python loops, independently
of the Rust code. Run from this directory: python3 generate.py
"""

import json
import struct

import numpy as np

DAMPING = 0.5
ITERATIONS = 200


def median(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else (v[n // 2 - 1] + v[n // 2]) / 2.0


def similarity(rows, beta):
    n = len(rows)
    s = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                s[i][i] = beta * median(rows[i])
            else:
                s[i][j] = -sum((a - b) ** 2 for a, b in zip(rows[i], rows[j]))
    return s


def first_argmax(pairs):
    best = pairs[0]
    for j, v in pairs[1:]:
        if v > best[1]:
            best = (j, v)
    return best[0]


def affinity_propagation(s):
    n = len(s)
    if n == 1:
        return [0]
    r = [[0.0] * n for _ in range(n)]
    a = [[0.0] * n for _ in range(n)]
    for _ in range(ITERATIONS):
        raw = [[0.0] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                if i == j:
                    m = max(s[i][k] for k in range(n) if k != i)
                else:
                    m = max(a[i][k] + s[i][k] for k in range(n) if k != j)
                raw[i][j] = s[i][j] - m
        r = [[DAMPING * r[i][j] + (1 - DAMPING) * raw[i][j] for j in range(n)] for i in range(n)]
        raw = [[0.0] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                total = sum(max(0.0, r[k][j]) for k in range(n) if k not in (i, j))
                raw[i][j] = total if i == j else min(0.0, r[j][j] + total)
        a = [[DAMPING * a[i][j] + (1 - DAMPING) * raw[i][j] for j in range(n)] for i in range(n)]
    choice = [first_argmax([(j, r[i][j] + a[i][j]) for j in range(n)]) for i in range(n)]
    exemplars = [i for i in range(n) if choice[i] == i]
    if not exemplars:
        exemplars = [first_argmax([(i, r[i][i] + a[i][i]) for i in range(n)])]
    return exemplars


def write_matrix(path, s, header):
    with open(path, "w") as f:
        f.write(f"# {header}\n")
        for row in s:
            f.write(" ".join(repr(v) for v in row) + "\n")


def ap_matrix():
    rng = np.random.default_rng(10)
    centers = rng.normal(0.0, 3.0, size=(3, 2))
    points = np.concatenate([c + rng.normal(0.0, 0.5, size=(4, 2)) for c in centers])[:10]
    rows = [list(map(float, p)) for p in points]
    n = len(rows)
    s = [[-sum((a - b) ** 2 for a, b in zip(rows[i], rows[j])) for j in range(n)] for i in range(n)]
    pref = median([s[i][j] for i in range(n) for j in range(n) if i != j])
    for i in range(n):
        s[i][i] = pref
    write_matrix("ap_10x10.txt", s, "10 points in 3 clusters; diagonal is the median similarity")
    with open("ap_10x10.expected", "w") as f:
        f.write("".join(f"{e}\n" for e in affinity_propagation(s)))


def beta_sweep():
    # Four clusters of increasingly loose filters around strongly negative
    # centers, so medians are negative and the count moves with beta.
    rng = np.random.default_rng(21)
    filters, dim = 16, 18
    centers = -2.0 + rng.normal(0.0, 0.4, size=(4, dim))
    rows = [centers[i % 4] + rng.normal(0.0, 0.15 * (1 + i / filters), size=dim) for i in range(filters)]
    rows = [list(map(float, r)) for r in rows]
    assert all(median(r) < 0 for r in rows)
    write_matrix("beta_sweep_layer.txt", rows, f"{filters} filters x {dim} weights, every median negative")
    betas = [round(0.1 * k, 1) for k in range(1, 11)]
    counts = [len(affinity_propagation(similarity(rows, b))) for b in betas]
    with open("beta_sweep.expected.json", "w") as f:
        json.dump({"beta": betas, "exemplars": counts}, f, indent=2)
        f.write("\n")


def write_bundle(path, tensors):
    manifest = {"tensors": [{"name": n, "shape": list(t.shape), "dtype": "f32"} for n, t in tensors]}
    head = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(b"EPRBND01")
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for _, t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def toy_cnn():
    rng = np.random.default_rng(30)
    tensors = [
        ("conv1.weight", rng.normal(0, 0.3, size=(8, 3, 3, 3))),
        ("conv1.bias", rng.normal(0, 0.1, size=(8,))),
        ("conv2.weight", rng.normal(0, 0.2, size=(16, 8, 3, 3))),
        ("conv2.bias", rng.normal(0, 0.1, size=(16,))),
        ("fc.weight", rng.normal(0, 0.1, size=(10, 16))),
        ("fc.bias", np.zeros(10)),
    ]
    write_bundle("toy_cnn.bundle", tensors)
    layers = [
        {"name": "input", "kind": "input", "params": {"channels": 3, "height": 8, "width": 8}},
        {"name": "conv1", "kind": "conv", "prunable": True, "inputs": ["input"],
         "params": {"in_channels": 3, "out_channels": 8, "kernel": 3, "padding": 1, "bias": True}},
        {"name": "conv2", "kind": "conv", "prunable": True, "inputs": ["conv1"],
         "params": {"in_channels": 8, "out_channels": 16, "kernel": 3, "padding": 1, "bias": True}},
        {"name": "pool", "kind": "pool", "inputs": ["conv2"], "params": {"mode": "avg", "global": True}},
        {"name": "fc", "kind": "fc", "inputs": ["pool"],
         "params": {"in_features": 16, "out_features": 10, "bias": True}},
        {"name": "output", "kind": "output", "inputs": ["fc"]},
    ]
    with open("toy_cnn.json", "w") as f:
        json.dump({"name": "toy-cnn", "layers": layers}, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    ap_matrix()
    beta_sweep()
    toy_cnn()
