import json
import logging
import zlib
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from deskrec.errors import TrainingDivergence

logger = logging.getLogger(__name__)

# Checkpoint format version
CHECKPOINT_VERSION = 1


class Embedding:
    """
    Growable id -> row embedding table. A new id's row is drawn from a
    stream seeded by (seed, table name, id), so the table content does not
    depend on the order in which ids first appear.
    """

    def __init__(self, name: str, dim: int, seed: int, scale: float = 0.1):
        self.name = name
        self.dim = dim
        self.seed = seed
        self.scale = scale
        self.ids: Dict[int, int] = {}
        self.weight = np.zeros((0, dim))

    def _init_row(self, key: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, zlib.crc32(self.name.encode()), int(key) & 0xFFFFFFFF])
        return rng.normal(0.0, self.scale, self.dim)

    def rows(self, keys: Iterable[int], grow: bool = True) -> np.ndarray:
        """
        Row indices for `keys`; unknown keys get a fresh row when `grow`,
        otherwise -1
        """
        keys = [int(k) for k in keys]

        # Allocate rows for unseen ids in first-appearance order
        if grow:
            fresh = []
            for key in keys:
                if key in self.ids: continue
                self.ids[key] = self.weight.shape[0] + len(fresh)
                fresh.append(key)
            if fresh: self.weight = np.vstack([self.weight, np.stack([self._init_row(k) for k in fresh])])

        # Lookup
        return np.array([self.ids.get(k, -1) for k in keys], dtype=np.int64)

    def __contains__(self, key: int) -> bool:
        return int(key) in self.ids

    def __len__(self) -> int:
        return len(self.ids)


def gather(weight: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """
    weight[rows] with zero vectors where rows == -1
    """
    known = rows >= 0
    out = weight[np.where(known, rows, 0)] if weight.shape[0] else np.zeros(rows.shape + weight.shape[1:])
    return out * known[..., None]


def scatter_add(grad: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    """
    grad[rows] += values, skipping rows == -1 and summing repeats
    """
    known = rows >= 0
    np.add.at(grad, rows[known], values[known])


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Glorot-uniform weights and zero bias
    """
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out)


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    """
    Stable log(sigmoid(x))
    """
    return -np.logaddexp(0.0, -x)


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Elementwise binary cross-entropy of soft targets in [0, 1]
    """
    return np.logaddexp(0.0, logits) - targets * logits


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            params[name] -= self.learning_rate * grad


class Adagrad:
    """
    Adagrad with accumulators that grow with the embedding tables
    """

    def __init__(self, learning_rate: float, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.eps = eps
        self.accumulators: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            acc = self.accumulators.get(name)

            # New parameter or grown table
            if acc is None: acc = np.zeros_like(grad)
            elif acc.shape != grad.shape:
                padded = np.zeros_like(grad)
                padded[:acc.shape[0]] = acc
                acc = padded
            acc += grad * grad
            self.accumulators[name] = acc
            params[name] -= self.learning_rate * grad / (np.sqrt(acc) + self.eps)


def make_optimizer(name: str, learning_rate: float):
    if name == "sgd": return SGD(learning_rate)
    if name == "adagrad": return Adagrad(learning_rate)
    raise ValueError(f"unknown optimizer {name}")


def check_finite(model: str, day: int, batch: int, loss: float, grads: Dict[str, np.ndarray]) -> None:
    """
    Abort training with a diagnostic when the loss or a gradient is not finite
    """
    norms = {name: float(np.linalg.norm(g)) for name, g in grads.items()}
    if np.isfinite(loss) and all(np.isfinite(v) for v in norms.values()): return
    logger.error("%s diverged on day %d batch %d", model, day, batch)
    raise TrainingDivergence(model, day, batch, float(loss), norms)


def zero_grads(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in params.items()}


def save_checkpoint(path: str, kind: str, header: dict, params: Dict[str, np.ndarray],
                    tables: Optional[Dict[str, Embedding]] = None) -> None:
    """
    Versioned JSON checkpoint: header, named parameter arrays and embedding id maps
    """
    document = {
        "header": {"version": CHECKPOINT_VERSION, "kind": kind, **header},
        "params": {name: {"shape": list(p.shape), "data": p.ravel().tolist()} for name, p in sorted(params.items())},
        "ids": {name: sorted(table.ids.items()) for name, table in sorted((tables or {}).items())},
    }
    with open(path, "w") as f: json.dump(document, f)


def load_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray], Dict[str, List[Tuple[int, int]]]]:
    """
    Read a checkpoint written by save_checkpoint
    """
    with open(path, "r") as f: document = json.load(f)
    header = document["header"]
    if header.get("version") != CHECKPOINT_VERSION: raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    params = {name: np.array(entry["data"], dtype=float).reshape(entry["shape"]) for name, entry in document["params"].items()}
    ids = {name: [(int(k), int(v)) for k, v in pairs] for name, pairs in document["ids"].items()}
    return header, params, ids
