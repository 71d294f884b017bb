"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import numpy as np


def log_softmax(x):
    m = x.max(-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))


def collapse_path(path, blank):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_brute_force(logits, label):
    """-ln of the total probability of every frame path that collapses to ``label``."""
    probs = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    t_len, c = probs.shape
    blank = c - 1
    total = 0.0
    for path in itertools.product(range(c), repeat=t_len):
        if collapse_path(path, blank) == tuple(label):
            total += np.prod(probs[np.arange(t_len), path])
    return -np.log(total)


def labeling_distribution(logits):
    """Probability of every labeling reachable in ``T`` frames, by enumeration."""
    probs = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    t_len, c = probs.shape
    dist: dict = {}
    for path in itertools.product(range(c), repeat=t_len):
        key = collapse_path(path, c - 1)
        dist[key] = dist.get(key, 0.0) + np.prod(probs[np.arange(t_len), path])
    return dist
