"""Builds the eval and relsim fixtures and their expected outputs.

Expected values come from numpy, scipy and scikit-learn, independently of
the Rust implementation. Run from this directory: python3 gen_oracle.py
"""

import json
import struct

import numpy as np
from scipy.stats import pearsonr
from sklearn.metrics import roc_auc_score
from sklearn.metrics.cluster import pair_confusion_matrix

LABELS = ["VD", "SD", "SS", "VS"]


def write_embeddings(path, x):
    x = np.asarray(x, dtype="<f4")
    n, d = x.shape
    with open(path, "wb") as f:
        f.write(b"MRL1" + struct.pack("<III", 1, n, d) + x.tobytes())


def prefix_cos(x, a, b, m):
    u = x[a, :m].astype(np.float64)
    v = x[b, :m].astype(np.float64)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def tree_json(ids, layers):
    """layers: list of per-layer label arrays, coarsest first."""
    out = {"documents": ids, "layers": []}
    names = ["theme", "topic", "story"]
    prev_owner = None
    for l, labels in enumerate(layers):
        blocks = {}
        for r, g in enumerate(labels):
            blocks.setdefault(g, []).append(r)
        ordered = sorted(blocks.values(), key=lambda b: b[0])
        owner = {}
        clusters = []
        for cid, rows in enumerate(ordered):
            for r in rows:
                owner[r] = cid
            clusters.append({
                "cluster_id": cid,
                "parent_id": None if prev_owner is None else prev_owner[rows[0]],
                "member_ids": [ids[r] for r in rows],
                "size": len(rows),
            })
        out["layers"].append({"layer": l + 1, "name": names[l], "clusters": clusters})
        prev_owner = owner
    return json.dumps(out, indent=2) + "\n"


def fmt(x):
    return "NA" if x is None else f"{x:.6f}"


def eval_fixture():
    rng = np.random.default_rng(20241016)
    n, d, m = 12, 8, 4
    x = rng.normal(size=(n, d)).astype(np.float32)
    ids = [f"d{i:02d}" for i in range(n)]
    write_embeddings("eval/embeddings.bin", x)
    with open("eval/ids.txt", "w") as f:
        f.write("\n".join(ids) + "\n")

    pairs = []
    seen = set()
    while len(pairs) < 24:
        a, b = sorted(rng.choice(n, size=2, replace=False).tolist())
        if (a, b) in seen:
            continue
        seen.add((a, b))
        pairs.append((a, b, int(rng.integers(0, 4))))
    with open("eval/pairs.jsonl", "w") as f:
        for a, b, l in pairs:
            f.write(json.dumps({"id_a": ids[a], "id_b": ids[b], "label": LABELS[l]}) + "\n")

    cos = np.array([prefix_cos(x, a, b, m) for a, b, _ in pairs])
    ordinal = np.array([l for _, _, l in pairs], dtype=float)
    pearson = float(pearsonr(cos, ordinal)[0])
    auroc = {}
    for cut in (1, 2, 3):
        y = (ordinal >= cut).astype(int)
        auroc[LABELS[cut]] = float(roc_auc_score(y, cos)) if 0 < y.sum() < len(y) else None

    gold = [
        [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1],
        [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3],
        [0, 0, 1, 2, 2, 3, 4, 4, 5, 6, 7, 7],
    ]
    pred = [
        [0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1],
        [0, 0, 1, 1, 2, 2, 3, 3, 3, 4, 4, 4],
        [0, 1, 2, 3, 4, 5, 6, 6, 7, 8, 9, 10],
    ]
    with open("eval/gold_tree.json", "w") as f:
        f.write(tree_json(ids, gold))
    with open("eval/pred_tree.json", "w") as f:
        f.write(tree_json(ids, pred))
    pairwise = []
    for l in range(3):
        c = pair_confusion_matrix(gold[l], pred[l]) // 2
        tp, fp, fn = int(c[1, 1]), int(c[0, 1]), int(c[1, 0])
        predicted, gold_same = tp + fp, tp + fn
        p = tp / predicted if predicted else (1.0 if gold_same == 0 else 0.0)
        r = tp / gold_same if gold_same else (1.0 if predicted == 0 else 0.0)
        f1 = 0.0 if p == 0 or r == 0 else 2 * p * r / (p + r)
        pairwise.append((l + 1, p, r, f1))

    rows = ["metric,key,value", f"pearson,,{fmt(pearson)}"]
    rows += [f"auroc,>={k},{fmt(v)}" for k, v in sorted(auroc.items())]
    for layer, p, r, f1 in pairwise:
        rows += [f"precision,layer{layer},{fmt(p)}", f"recall,layer{layer},{fmt(r)}", f"f1,layer{layer},{fmt(f1)}"]
    with open("eval/expected.csv", "w") as f:
        f.write("\n".join(rows) + "\n")

    six = lambda v: None if v is None else float(fmt(v))
    report = {
        "pearson": six(pearson),
        "auroc": {k: six(v) for k, v in sorted(auroc.items())},
        "pairwise": [
            {"layer": layer, "precision": six(p), "recall": six(r), "f1": six(f1)} for layer, p, r, f1 in pairwise
        ],
        "relsim": {},
        "warnings": [],
    }
    with open("eval/expected.json", "w") as f:
        f.write(json.dumps(report, indent=2) + "\n")


def relsim_fixture():
    rng = np.random.default_rng(7)
    n, d = 9, 8
    a = rng.normal(size=(n, d)).astype(np.float32)
    b = (a + 0.5 * rng.normal(size=(n, d))).astype(np.float32)
    write_embeddings("relsim/a.bin", a)
    write_embeddings("relsim/b.bin", b)
    xs, ys = [], []
    for s in range(n):
        for t in range(n):
            if s != t:
                xs.append(prefix_cos(a, s, t, d))
                ys.append(prefix_cos(b, s, t, d))
    with open("relsim/expected.txt", "w") as f:
        f.write(f"{np.corrcoef(xs, ys)[0, 1]:.12f}\n")


if __name__ == "__main__":
    eval_fixture()
    relsim_fixture()
